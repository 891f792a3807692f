//! Pairwise attributes that condition convolution kernels.
//!
//! Each regime exposes exactly the geometric information its kernels are
//! allowed to see: distances for SE(3) on ℝ³, relative positions for
//! translations only, the position-orientation invariants for ℝ³×S², and
//! raw coordinates for the unconstrained regimes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom3d::{SphereGrid, Vec3};
use crate::pointcloud::{NeighborGraph, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Se3R3,
    T3R3,
    Se3R3S2,
    NoneR3,
    NoneR3S2,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Se3R3,
        Regime::T3R3,
        Regime::Se3R3S2,
        Regime::NoneR3,
        Regime::NoneR3S2,
    ];

    /// Whether features live on ℝ³×S² (an orientation axis per point).
    pub fn has_fiber(self) -> bool {
        matches!(self, Regime::Se3R3S2 | Regime::NoneR3S2)
    }

    /// Number of variables the spatial kernel polynomial is evaluated on.
    pub fn spatial_vars(self) -> usize {
        match self {
            Regime::Se3R3 => 1,
            Regime::T3R3 => 3,
            Regime::Se3R3S2 => 2,
            Regime::NoneR3 => 6,
            Regime::NoneR3S2 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Se3R3 => "SE3_R3",
            Regime::T3R3 => "T3_R3",
            Regime::Se3R3S2 => "SE3_R3S2",
            Regime::NoneR3 => "NONE_R3",
            Regime::NoneR3S2 => "NONE_R3S2",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown regime '{s}'")))
    }
}

/// Attribute rows, `width` values each.
///
/// Row layout depends on how the attributes were built: one row per edge
/// for ℝ³ regimes, `edge * O + k` for the per-fiber spatial attributes, and
/// `(edge * O + k) * O + l` for the full fiber-pair block.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAttributes {
    pub values: Vec<f64>,
    pub width: usize,
    pub regime: Regime,
    pub fiber_size: usize,
}

impl PairAttributes {
    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.values.len() / self.width
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.width..(r + 1) * self.width]
    }
}

fn check_graph(cloud: &PointCloud, graph: &NeighborGraph) -> Result<()> {
    if graph.n_points != cloud.len() {
        return Err(Error::Precondition(format!(
            "graph built for {} points, cloud has {}",
            graph.n_points,
            cloud.len()
        )));
    }
    Ok(())
}

fn relative(cloud: &PointCloud, i: usize, j: usize) -> Vec3 {
    cloud.positions[j] - cloud.positions[i]
}

/// Distance `‖xⱼ − xᵢ‖` per edge.
pub fn attrs_se3_r3(cloud: &PointCloud, graph: &NeighborGraph) -> Result<PairAttributes> {
    check_graph(cloud, graph)?;
    Ok(PairAttributes {
        values: graph.edges().map(|(i, j)| relative(cloud, i, j).norm()).collect(),
        width: 1,
        regime: Regime::Se3R3,
        fiber_size: 1,
    })
}

/// Relative position `xⱼ − xᵢ` per edge.
pub fn attrs_t3_r3(cloud: &PointCloud, graph: &NeighborGraph) -> Result<PairAttributes> {
    check_graph(cloud, graph)?;
    let mut values = Vec::with_capacity(3 * graph.len());
    for (i, j) in graph.edges() {
        values.extend_from_slice(relative(cloud, i, j).as_slice());
    }
    Ok(PairAttributes {
        values,
        width: 3,
        regime: Regime::T3R3,
        fiber_size: 1,
    })
}

/// Relative position followed by the absolute source coordinates `xᵢ`.
pub fn attrs_none(cloud: &PointCloud, graph: &NeighborGraph) -> Result<PairAttributes> {
    check_graph(cloud, graph)?;
    let mut values = Vec::with_capacity(6 * graph.len());
    for (i, j) in graph.edges() {
        values.extend_from_slice(relative(cloud, i, j).as_slice());
        values.extend_from_slice(cloud.positions[i].as_slice());
    }
    Ok(PairAttributes {
        values,
        width: 6,
        regime: Regime::NoneR3,
        fiber_size: 1,
    })
}

/// Invariants of the position-orientation pair `(xᵢ, nᵢ)`, `(xⱼ, nⱼ)`:
/// the component of `xⱼ − xᵢ` along `nᵢ`, the length of its orthogonal
/// remainder, and `nᵢᵀnⱼ`.
pub fn pair_invariants(xi: &Vec3, ni: &Vec3, xj: &Vec3, nj: &Vec3) -> [f64; 3] {
    let r = xj - xi;
    let a1 = ni.dot(&r);
    let a2 = (r - a1 * ni).norm();
    [a1, a2, ni.dot(nj)]
}

/// All fiber pairs of every edge, shaped `E x O x O x 3` (edge-major, then
/// source fiber `k`, then target fiber `l`).
pub fn attrs_se3_r3s2(
    cloud: &PointCloud,
    graph: &NeighborGraph,
    grid: &SphereGrid,
) -> Result<PairAttributes> {
    check_graph(cloud, graph)?;
    if grid.is_empty() {
        return Err(Error::Precondition("empty sphere grid".into()));
    }
    let dirs = grid.directions();
    let o = dirs.len();
    let mut values = Vec::with_capacity(graph.len() * o * o * 3);
    for (i, j) in graph.edges() {
        let (xi, xj) = (&cloud.positions[i], &cloud.positions[j]);
        for nk in dirs {
            for nl in dirs {
                values.extend_from_slice(&pair_invariants(xi, nk, xj, nl));
            }
        }
    }
    Ok(PairAttributes {
        values,
        width: 3,
        regime: Regime::Se3R3S2,
        fiber_size: o,
    })
}

/// Kernel inputs of the spatial (same-fiber) stage, divided by `scale`.
///
/// | regime    | rows       | columns                         |
/// |-----------|------------|---------------------------------|
/// | SE3_R3    | `E`        | `d`                             |
/// | T3_R3     | `E`        | `xⱼ − xᵢ`                       |
/// | NONE_R3   | `E`        | `xⱼ − xᵢ`, `xᵢ`                 |
/// | SE3_R3S2  | `E * O`    | `nₖᵀ(xⱼ − xᵢ)`, orthogonal norm |
/// | NONE_R3S2 | `E * O`    | the two above, `xᵢ`             |
///
/// With the same fiber on both ends the orientation invariant is 1 and
/// carries no information, so it is omitted.
pub fn spatial_attrs(
    regime: Regime,
    cloud: &PointCloud,
    graph: &NeighborGraph,
    grid: &SphereGrid,
    scale: f64,
) -> Result<PairAttributes> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Precondition(format!("attribute scale must be positive, got {scale}")));
    }
    let inv = 1.0 / scale;
    let mut attrs = match regime {
        Regime::Se3R3 => attrs_se3_r3(cloud, graph)?,
        Regime::T3R3 => attrs_t3_r3(cloud, graph)?,
        Regime::NoneR3 => attrs_none(cloud, graph)?,
        Regime::Se3R3S2 | Regime::NoneR3S2 => {
            check_graph(cloud, graph)?;
            if grid.is_empty() {
                return Err(Error::Precondition("empty sphere grid".into()));
            }
            let dirs = grid.directions();
            let width = regime.spatial_vars();
            let mut values = Vec::with_capacity(graph.len() * dirs.len() * width);
            for (i, j) in graph.edges() {
                let (xi, xj) = (&cloud.positions[i], &cloud.positions[j]);
                for nk in dirs {
                    let [a1, a2, _] = pair_invariants(xi, nk, xj, nk);
                    values.push(a1);
                    values.push(a2);
                    if regime == Regime::NoneR3S2 {
                        values.extend_from_slice(xi.as_slice());
                    }
                }
            }
            PairAttributes {
                values,
                width,
                regime,
                fiber_size: dirs.len(),
            }
        }
    };
    attrs.values.iter_mut().for_each(|v| *v *= inv);
    Ok(attrs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::{make_sphere_grid, random_motion, random_rotation, rotate_grid, GridMethod, RigidMotion};
    use crate::pointcloud::{build_neighbors, transform_cloud, NeighborMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_positions(
            (0..n)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    fn pair_cloud(a: Vec3, b: Vec3) -> (PointCloud, NeighborGraph) {
        let cloud = PointCloud::from_positions(vec![a, b]);
        let graph = NeighborGraph {
            targets: vec![0, 0],
            sources: vec![0, 1],
            mode: NeighborMode::Knn(1),
            n_points: 2,
        };
        (cloud, graph)
    }

    #[test]
    fn distance_examples() {
        let (c, g) = pair_cloud(Vec3::zeros(), Vec3::new(3.0, 4.0, 0.0));
        assert_eq!(attrs_se3_r3(&c, &g).unwrap().values, vec![0.0, 5.0]);
        let t = attrs_t3_r3(&c, &g).unwrap();
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[3.0, 4.0, 0.0]);
        let n = attrs_none(&c, &g).unwrap();
        assert_eq!(n.row(0), &[0.0; 6]);
    }

    #[test]
    fn orientation_invariants_examples() {
        let z = Vec3::z();
        assert_eq!(
            pair_invariants(&Vec3::zeros(), &z, &Vec3::new(1.0, 0.0, 2.0), &z),
            [2.0, 1.0, 1.0]
        );
        let grid = make_sphere_grid(4, GridMethod::Fibonacci).unwrap();
        let (c, g) = pair_cloud(Vec3::new(0.3, -0.2, 0.1), Vec3::new(1.0, 0.0, 2.0));
        let a = attrs_se3_r3s2(&c, &g, &grid).unwrap();
        assert_eq!(a.rows(), 2 * 4 * 4);
        for k in 0..4 {
            // Self edge, same fiber.
            let r = a.row(k * 4 + k);
            assert!(r[0].abs() < 1e-15 && r[1].abs() < 1e-15 && (r[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn none_attributes_see_translation_in_source_coordinates_only() {
        let c = random_cloud(3, 8);
        let g = build_neighbors(&c, NeighborMode::Knn(3)).unwrap();
        let t = RigidMotion::from_translation(Vec3::new(0.5, -1.0, 2.0));
        let a = attrs_none(&c, &g).unwrap();
        let b = attrs_none(&transform_cloud(&c, &t), &g).unwrap();
        for e in 0..g.len() {
            for d in 0..3 {
                assert!((a.row(e)[d] - b.row(e)[d]).abs() < 1e-12);
            }
            let moved = (3..6).any(|d| (a.row(e)[d] - b.row(e)[d]).abs() > 0.1);
            assert!(moved);
        }
        let r = RigidMotion::from_rotation(random_rotation(&mut ChaCha8Rng::seed_from_u64(1)));
        let rotated = attrs_none(&transform_cloud(&c, &r), &g).unwrap();
        for e in 0..g.len() {
            assert!((0..6).any(|d| (a.row(e)[d] - rotated.row(e)[d]).abs() > 1e-6));
        }
    }

    #[test]
    fn spatial_attrs_layout_and_scale() {
        let c = random_cloud(4, 6);
        let g = build_neighbors(&c, NeighborMode::Knn(2)).unwrap();
        let grid = make_sphere_grid(3, GridMethod::Fibonacci).unwrap();
        let full = attrs_se3_r3s2(&c, &g, &grid).unwrap();
        let s = spatial_attrs(Regime::Se3R3S2, &c, &g, &grid, 2.0).unwrap();
        assert_eq!(s.rows(), g.len() * 3);
        for e in 0..g.len() {
            for k in 0..3 {
                let f = full.row((e * 3 + k) * 3 + k);
                let r = s.row(e * 3 + k);
                assert!((r[0] * 2.0 - f[0]).abs() < 1e-15 && (r[1] * 2.0 - f[1]).abs() < 1e-15);
            }
        }
        let nn = spatial_attrs(Regime::NoneR3S2, &c, &g, &grid, 1.0).unwrap();
        assert_eq!(nn.width, 5);
        let i = g.targets[1];
        assert_eq!(&nn.row(3)[2..], c.positions[i].as_slice());
        for regime in Regime::ALL {
            assert_eq!(
                spatial_attrs(regime, &c, &g, &grid, 1.0).unwrap().width,
                regime.spatial_vars()
            );
        }
        assert!(spatial_attrs(Regime::Se3R3, &c, &g, &grid, 0.0).is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
        }
        assert!("SO2".parse::<Regime>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn se3_attributes_invariant_under_joint_motion(seed in any::<u64>(), n in 2usize..10, o in 1usize..6) {
            let c = random_cloud(seed, n);
            let g = build_neighbors(&c, NeighborMode::Knn(3)).unwrap();
            let grid = make_sphere_grid(o, GridMethod::Fibonacci).unwrap();
            let m = random_motion(&mut ChaCha8Rng::seed_from_u64(seed ^ 1), 3.0);
            let moved = transform_cloud(&c, &m);
            let grid_m = rotate_grid(&grid, &m.rotation);
            let d0 = attrs_se3_r3(&c, &g).unwrap();
            let d1 = attrs_se3_r3(&moved, &g).unwrap();
            for (a, b) in d0.values.iter().zip(&d1.values) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let a0 = attrs_se3_r3s2(&c, &g, &grid).unwrap();
            let a1 = attrs_se3_r3s2(&moved, &g, &grid_m).unwrap();
            for (a, b) in a0.values.iter().zip(&a1.values) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn t3_attributes_translate_and_rotate(seed in any::<u64>(), n in 2usize..10) {
            let c = random_cloud(seed, n);
            let g = build_neighbors(&c, NeighborMode::Knn(3)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let shift = RigidMotion::from_translation(Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)));
            let a0 = attrs_t3_r3(&c, &g).unwrap();
            let a1 = attrs_t3_r3(&transform_cloud(&c, &shift), &g).unwrap();
            for (a, b) in a0.values.iter().zip(&a1.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let r = random_rotation(&mut rng);
            let a2 = attrs_t3_r3(&transform_cloud(&c, &RigidMotion::from_rotation(r)), &g).unwrap();
            for e in 0..g.len() {
                let v = Vec3::from_column_slice(a0.row(e));
                let w = Vec3::from_column_slice(a2.row(e));
                prop_assert!((r.apply(&v) - w).norm() < 1e-12);
            }
        }

        #[test]
        fn orientation_invariants_decompose_distance(seed in any::<u64>()) {
            let c = random_cloud(seed, 6);
            let g = build_neighbors(&c, NeighborMode::Knn(5)).unwrap();
            let grid = make_sphere_grid(5, GridMethod::Fibonacci).unwrap();
            let a = attrs_se3_r3s2(&c, &g, &grid).unwrap();
            let d = attrs_se3_r3(&c, &g).unwrap();
            for e in 0..g.len() {
                for kl in 0..25 {
                    let r = a.row(e * 25 + kl);
                    prop_assert!((r[0] * r[0] + r[1] * r[1] - d.values[e] * d.values[e]).abs() < 1e-10);
                    prop_assert!(r[2].abs() <= 1.0 + 1e-12);
                    prop_assert!(r[1] >= 0.0);
                }
            }
        }
    }
}
