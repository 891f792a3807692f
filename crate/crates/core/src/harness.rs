//! Measures how far a model is from the symmetries it claims, and checks the
//! separable convolution against a direct double sum.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom3d::{random_rotation, rotate_grid, RigidMotion, SphereGrid, Vec3};
use crate::invariants::Regime;
use crate::model::{Model, Readout, Symmetry};
use crate::pointcloud::{permute_cloud, transform_cloud, NeighborGraph, PointCloud};

/// Outputs are compared with this floor in the denominator.
pub const RELATIVE_FLOOR: f64 = 1e-8;
/// A symmetry counts as exact below this violation.
pub const EXACT_THRESHOLD: f64 = 1e-9;
/// A symmetry counts as broken above this violation.
pub const BROKEN_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAction {
    Rotation,
    Translation,
    RigidMotion,
    Permutation,
}

impl GroupAction {
    pub const ALL: [GroupAction; 4] = [
        GroupAction::Rotation,
        GroupAction::Translation,
        GroupAction::RigidMotion,
        GroupAction::Permutation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupAction::Rotation => "rotation",
            GroupAction::Translation => "translation",
            GroupAction::RigidMotion => "rigid_motion",
            GroupAction::Permutation => "permutation",
        }
    }
}

impl fmt::Display for GroupAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupAction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupAction::ALL
            .into_iter()
            .find(|g| g.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown group action '{s}'")))
    }
}

/// Whether the sphere grid is rotated along with the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridMode {
    FixedGrid,
    JointGrid,
}

impl GridMode {
    pub fn name(self) -> &'static str {
        match self {
            GridMode::FixedGrid => "fixed_grid",
            GridMode::JointGrid => "joint_grid",
        }
    }
}

impl fmt::Display for GridMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fixed_grid" => Ok(GridMode::FixedGrid),
            "joint_grid" => Ok(GridMode::JointGrid),
            other => Err(Error::Config(format!("unknown grid mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationMetric {
    /// `‖f(gX) − f(X)‖ / (‖f(X)‖ + 1e-8)`.
    Relative,
    /// `‖f(gX) − R f(X)‖ / (‖f(X)‖ + 1e-8)`.
    VectorRotated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryReport {
    pub group: GroupAction,
    pub mode: GridMode,
    pub metric: ViolationMetric,
    pub trials: usize,
    pub max: f64,
    pub mean: f64,
    pub seed: u64,
}

impl SymmetryReport {
    pub fn csv_header() -> &'static str {
        "group,mode,trials,max,mean,seed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{}",
            self.group, self.mode, self.trials, self.max, self.mean, self.seed
        )
    }
}

pub fn reports_to_csv(reports: &[SymmetryReport]) -> String {
    let mut out = String::from(SymmetryReport::csv_header());
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn random_translation<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Applies the rotation to every consecutive triple.
fn rotate_rows(r: &crate::geom3d::Rotation3, data: &[f64]) -> Vec<f64> {
    data.chunks(3)
        .flat_map(|c| {
            let v = r.apply(&Vec3::new(c[0], c[1], c[2]));
            [v.x, v.y, v.z]
        })
        .collect()
}

/// Violation of one group element on one cloud.
fn trial_violation(
    model: &Model,
    cloud: &PointCloud,
    grid: &SphereGrid,
    group: GroupAction,
    mode: GridMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let base = model.forward(cloud, grid)?;
    let per_point = model.config.readout != Readout::InvariantGlobal;
    let vector = model.config.readout == Readout::Vector;
    let (moved, expected) = match group {
        GroupAction::Permutation => {
            let mut perm: Vec<usize> = (0..cloud.len()).collect();
            // Shuffle inside each sample so batch ids stay sorted.
            for g in cloud.groups() {
                let slice = &mut perm[g];
                for i in (1..slice.len()).rev() {
                    slice.swap(i, rng.gen_range(0..=i));
                }
            }
            let out = model.forward(&permute_cloud(cloud, &perm), grid)?;
            let expected = if per_point {
                let w = base.len() / cloud.len();
                perm.iter()
                    .flat_map(|&i| base.data()[i * w..(i + 1) * w].to_vec())
                    .collect()
            } else {
                base.data().to_vec()
            };
            (out, expected)
        }
        _ => {
            let g = match group {
                GroupAction::Rotation => RigidMotion::from_rotation(random_rotation(rng)),
                GroupAction::Translation => RigidMotion::from_translation(random_translation(rng)),
                _ => RigidMotion::new(random_translation(rng), random_rotation(rng)),
            };
            let grid_g = match mode {
                GridMode::JointGrid => rotate_grid(grid, &g.rotation),
                GridMode::FixedGrid => grid.clone(),
            };
            let out = model.forward(&transform_cloud(cloud, &g), &grid_g)?;
            let expected = if vector {
                rotate_rows(&g.rotation, base.data())
            } else {
                base.data().to_vec()
            };
            (out, expected)
        }
    };
    let diff: Vec<f64> = moved.data().iter().zip(&expected).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / (norm(base.data()) + RELATIVE_FLOOR))
}

fn measure(
    model: &Model,
    clouds: &[PointCloud],
    n_trials: usize,
    group: GroupAction,
    mode: GridMode,
    seed: u64,
) -> Result<SymmetryReport> {
    if clouds.is_empty() {
        return Err(Error::Precondition("no clouds to measure on".into()));
    }
    let grid = model.default_grid()?;
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for t in 0..n_trials {
        // One RNG stream per trial so reports do not depend on trial order.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let cloud = &clouds[t % clouds.len()];
        let v = trial_violation(model, cloud, &grid, group, mode, &mut rng)?;
        max = max.max(v);
        sum += v;
    }
    Ok(SymmetryReport {
        group,
        mode,
        metric: if model.config.readout == Readout::Vector {
            ViolationMetric::VectorRotated
        } else {
            ViolationMetric::Relative
        },
        trials: n_trials,
        max,
        mean: if n_trials == 0 { 0.0 } else { sum / n_trials as f64 },
        seed,
    })
}

/// Invariance of a model with an invariant readout (per-point outputs are
/// compared point by point; permutations permute them).
pub fn measure_invariance(
    model: &Model,
    clouds: &[PointCloud],
    n_trials: usize,
    group: GroupAction,
    mode: GridMode,
    seed: u64,
) -> Result<SymmetryReport> {
    if model.config.readout == Readout::Vector {
        return Err(Error::Precondition(
            "measure_invariance needs an invariant readout".into(),
        ));
    }
    measure(model, clouds, n_trials, group, mode, seed)
}

/// Equivariance of a vector readout: outputs must rotate with the input.
pub fn measure_vector_equivariance(
    model: &Model,
    clouds: &[PointCloud],
    n_trials: usize,
    group: GroupAction,
    mode: GridMode,
    seed: u64,
) -> Result<SymmetryReport> {
    if model.config.readout != Readout::Vector {
        return Err(Error::Precondition(
            "measure_vector_equivariance needs a vector readout".into(),
        ));
    }
    measure(model, clouds, n_trials, group, mode, seed)
}

/// Symmetry check matching the model's readout.
pub fn measure_symmetry(
    model: &Model,
    clouds: &[PointCloud],
    n_trials: usize,
    group: GroupAction,
    mode: GridMode,
    seed: u64,
) -> Result<SymmetryReport> {
    measure(model, clouds, n_trials, group, mode, seed)
}

/// Result of auditing a model against its claimed symmetry.
#[derive(Debug, Clone)]
pub struct Audit {
    pub claimed: Symmetry,
    pub measured: Symmetry,
    /// Joint-grid rotation, translation, fixed-grid rotation, permutation.
    pub reports: Vec<SymmetryReport>,
    /// Measurements that are neither clearly exact nor clearly broken.
    pub ambiguous: Vec<GroupAction>,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.claimed == self.measured && self.ambiguous.is_empty() && self.permutation_ok()
    }

    fn permutation_ok(&self) -> bool {
        self.reports
            .iter()
            .filter(|r| r.group == GroupAction::Permutation)
            .all(|r| r.max < EXACT_THRESHOLD)
    }
}

/// Runs all four measurements and classifies the measured symmetry.
pub fn audit(model: &Model, clouds: &[PointCloud], n_trials: usize, seed: u64) -> Result<Audit> {
    let rot = measure(model, clouds, n_trials, GroupAction::Rotation, GridMode::JointGrid, seed)?;
    let tr = measure(model, clouds, n_trials, GroupAction::Translation, GridMode::JointGrid, seed.wrapping_add(1))?;
    let fixed = measure(model, clouds, n_trials, GroupAction::Rotation, GridMode::FixedGrid, seed.wrapping_add(2))?;
    let perm = measure(model, clouds, n_trials, GroupAction::Permutation, GridMode::JointGrid, seed.wrapping_add(3))?;
    let mut ambiguous = Vec::new();
    for r in [&rot, &tr] {
        if r.max >= EXACT_THRESHOLD && r.max <= BROKEN_THRESHOLD {
            ambiguous.push(r.group);
        }
    }
    let measured = Symmetry::from_parts(rot.max < EXACT_THRESHOLD, tr.max < EXACT_THRESHOLD);
    Ok(Audit {
        claimed: model.config.effective_equivariance(),
        measured,
        reports: vec![rot, tr, fixed, perm],
        ambiguous,
    })
}

/// Random nondegenerate clouds carrying every feature the model may read:
/// `scalar_channels` scalars and `aux_vectors` vectors per point.
pub fn random_clouds(
    n_clouds: usize,
    n_points: usize,
    scalar_channels: usize,
    aux_vectors: usize,
    seed: u64,
) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clouds)
        .map(|_| {
            let pos: Vec<Vec3> = (0..n_points)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let scalars: Vec<f64> = (0..n_points * scalar_channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vectors: Vec<Vec3> = (0..n_points * aux_vectors)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            PointCloud::from_positions(pos)
                .with_scalars(scalar_channels, scalars)
                .and_then(|c| c.with_vectors(aux_vectors, vectors))
                .expect("consistent sizes")
        })
        .collect()
}

/// Degree-≤2 monomials by explicit exponent enumeration, ordered by total
/// degree and then by descending exponent tuple.
fn oracle_monomials(vars: &[f64]) -> Vec<f64> {
    let n = vars.len();
    let mut exps: Vec<Vec<u32>> = Vec::new();
    let mut cur = vec![0u32; n];
    loop {
        if cur.iter().sum::<u32>() <= 2 {
            exps.push(cur.clone());
        }
        // Odometer over {0,1,2}^n.
        let mut d = 0;
        while d < n && cur[d] == 2 {
            cur[d] = 0;
            d += 1;
        }
        if d == n {
            break;
        }
        cur[d] += 1;
    }
    exps.sort_by(|a, b| {
        let da: u32 = a.iter().sum();
        let db: u32 = b.iter().sum();
        da.cmp(&db).then_with(|| b.cmp(a))
    });
    exps.iter()
        .map(|e| e.iter().zip(vars).map(|(&p, &x)| x.powi(p as i32)).product())
        .collect()
}

/// Kernel variables of one (edge, fiber) pair, recomputed from scratch.
fn oracle_attributes(regime: Regime, xi: Vec3, xj: Vec3, n: Vec3, scale: f64) -> Vec<f64> {
    let r = xj - xi;
    let along = n.x * r.x + n.y * r.y + n.z * r.z;
    let ortho = r - n * along;
    let ortho = (ortho.x * ortho.x + ortho.y * ortho.y + ortho.z * ortho.z).sqrt();
    let v = match regime {
        Regime::Se3R3 => vec![(r.x * r.x + r.y * r.y + r.z * r.z).sqrt()],
        Regime::T3R3 => vec![r.x, r.y, r.z],
        Regime::NoneR3 => vec![r.x, r.y, r.z, xi.x, xi.y, xi.z],
        Regime::Se3R3S2 => vec![along, ortho],
        Regime::NoneR3S2 => vec![along, ortho, xi.x, xi.y, xi.z],
    };
    v.into_iter().map(|a| a / scale).collect()
}

/// Direct evaluation of the discretized group convolution with the
/// factorized kernel:
/// `out(i,k,c) = Σ_{j∈N(i)} Σ_l k_fiber(n_kᵀn_l) w_l k_spatial(xᵢ, n_l, xⱼ) f(j,l,c)`.
/// `spatial` is `M x C`, `fiber` is `3 x C` (fiber regimes only), `field` is
/// `P x O x C`. ℝ³ regimes use a single fiber with an identity fiber stage.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_conv(
    regime: Regime,
    cloud: &PointCloud,
    graph: &NeighborGraph,
    grid: &SphereGrid,
    spatial: &Tensor,
    fiber: Option<&Tensor>,
    field: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let [p, o, c] = match field.shape() {
        &[p, o, c] => [p, o, c],
        s => {
            return Err(Error::Shape {
                op: "brute_force_conv",
                detail: format!("field must be P x O x C, got {s:?}"),
            })
        }
    };
    if p > 8 || o > 8 {
        return Err(Error::Precondition("brute-force oracle is for tiny inputs only".into()));
    }
    let dirs = grid.directions();
    let mut out = vec![0.0; p * o * c];
    for (i, j) in graph.edges() {
        for k in 0..o {
            for l in 0..o {
                let (kf, wl) = if regime.has_fiber() {
                    fiber.ok_or_else(|| Error::Precondition("missing fiber kernel".into()))?;
                    let g = dirs[k].dot(&dirs[l]);
                    (oracle_monomials(&[g]), grid.weights()[l])
                } else {
                    if k != l {
                        continue;
                    }
                    (Vec::new(), 1.0)
                };
                let n = if regime.has_fiber() { dirs[l] } else { Vec3::z() };
                let mono = oracle_monomials(&oracle_attributes(regime, cloud.positions[i], cloud.positions[j], n, scale));
                for ch in 0..c {
                    let ks: f64 = mono.iter().enumerate().map(|(m, v)| v * spatial.data()[m * c + ch]).sum();
                    let kfib: f64 = if regime.has_fiber() {
                        let fc = fiber.expect("checked");
                        kf.iter().enumerate().map(|(m, v)| v * fc.data()[m * c + ch]).sum()
                    } else {
                        1.0
                    };
                    out[(i * o + k) * c + ch] += kfib * wl * ks * field.data()[(j * o + l) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![p, o, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::geom3d::{make_sphere_grid, GridMethod};
    use crate::layers::{push_monomials, ConvNextBlock, Forward, LevelGeometry, LevelVars, EXPANSION};
    use crate::model::{build, ModelConfig};
    use crate::pointcloud::{build_neighbors, NeighborMode};

    #[test]
    fn oracle_monomials_agree_with_layer_ordering() {
        let vars = [0.3, -1.2, 2.0];
        let mut layer = Vec::new();
        push_monomials(&vars, &mut layer);
        assert_eq!(oracle_monomials(&vars), layer);
    }

    fn layer_conv(
        regime: Regime,
        cloud: &PointCloud,
        graph: &NeighborGraph,
        grid: &SphereGrid,
        store: &ParamStore,
        block: &ConvNextBlock,
        field: &Tensor,
    ) -> Tensor {
        let geo = LevelGeometry::new(regime, cloud, graph, grid, 1.0).unwrap();
        let mut fw = Forward::new(store, false);
        let vars = LevelVars::new(&mut fw, &geo);
        let x = fw.constant(field.clone());
        let y = block.convolve(&mut fw, x, &geo, &vars).unwrap();
        fw.tape.value(y).clone()
    }

    #[test]
    fn oracle_matches_separable_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (regime, n_points, o) in [(Regime::Se3R3S2, 1, 2), (Regime::T3R3, 3, 1), (Regime::Se3R3S2, 4, 3)] {
            let cloud = &random_clouds(1, n_points, 0, 0, rng.gen())[0];
            let graph = build_neighbors(cloud, NeighborMode::Knn(2)).unwrap();
            let grid = if regime.has_fiber() {
                make_sphere_grid(o, GridMethod::Fibonacci).unwrap()
            } else {
                SphereGrid::trivial()
            };
            let mut store = ParamStore::new();
            let block = ConvNextBlock::new(&mut store, "b", 0, regime, 3, 3 * EXPANSION, &mut rng);
            let field = Tensor::new(
                vec![n_points, o, 3],
                (0..n_points * o * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let fast = layer_conv(regime, cloud, &graph, &grid, &store, &block, &field);
            let slow = brute_force_conv(
                regime,
                cloud,
                &graph,
                &grid,
                store.get(block.spatial),
                block.fiber.map(|f| store.get(f)),
                &field,
                1.0,
            )
            .unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{regime}");
        }
    }

    #[test]
    fn oracle_of_zero_weights_is_zero() {
        let cloud = &random_clouds(1, 3, 0, 0, 2)[0];
        let graph = build_neighbors(cloud, NeighborMode::Knn(2)).unwrap();
        let grid = make_sphere_grid(2, GridMethod::Fibonacci).unwrap();
        let out = brute_force_conv(
            Regime::Se3R3S2,
            cloud,
            &graph,
            &grid,
            &Tensor::zeros(&[6, 2]),
            Some(&Tensor::zeros(&[3, 2])),
            &Tensor::full(&[3, 2, 2], 1.0),
            1.0,
        )
        .unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    fn small(regime: Regime, readout: Readout) -> ModelConfig {
        ModelConfig {
            regime,
            layers: 2,
            channels: 4,
            fiber_size: if regime.has_fiber() { 6 } else { 0 },
            readout,
            neighbors: 4,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn joint_grid_invariance_is_exact_and_fixed_grid_is_not() {
        let model = build(&small(Regime::Se3R3S2, Readout::InvariantGlobal)).unwrap();
        let clouds = random_clouds(3, 7, 0, 0, 3);
        let joint = measure_invariance(&model, &clouds, 5, GroupAction::RigidMotion, GridMode::JointGrid, 1).unwrap();
        assert!(joint.max < 1e-9, "{joint:?}");
        let fixed = measure_invariance(&model, &clouds, 5, GroupAction::Rotation, GridMode::FixedGrid, 1).unwrap();
        assert!(fixed.max > 1e-6, "{fixed:?}");
        let tr = measure_invariance(&model, &clouds, 5, GroupAction::Translation, GridMode::FixedGrid, 1).unwrap();
        assert!(tr.max < 1e-12, "{tr:?}");
        let again = measure_invariance(&model, &clouds, 5, GroupAction::Rotation, GridMode::FixedGrid, 1).unwrap();
        assert_eq!(fixed, again);
        let csv = reports_to_csv(&[joint]);
        assert!(csv.starts_with("group,mode,trials,max,mean,seed\nrigid_motion,joint_grid,5,"));
    }

    #[test]
    fn vector_equivariance_and_breaking() {
        let mut cfg = small(Regime::Se3R3S2, Readout::Vector);
        cfg.input.aux_vectors = 1;
        cfg.input.aux_as_vectors = true;
        let clouds = random_clouds(2, 6, 0, 1, 4);
        let model = build(&cfg).unwrap();
        let r = measure_vector_equivariance(&model, &clouds, 5, GroupAction::Rotation, GridMode::JointGrid, 2).unwrap();
        assert!(r.max < 1e-9, "{r:?}");
        cfg.input.aux_as_vectors = false;
        cfg.input.aux_as_scalars = true;
        let model = build(&cfg).unwrap();
        let r = measure_vector_equivariance(&model, &clouds, 5, GroupAction::Rotation, GridMode::JointGrid, 2).unwrap();
        assert!(r.max > 0.1, "{r:?}");
        assert!(measure_invariance(&model, &clouds, 1, GroupAction::Rotation, GridMode::JointGrid, 2).is_err());
    }

    #[test]
    fn audit_classifies_breaking_inputs() {
        let mut cfg = small(Regime::Se3R3, Readout::InvariantGlobal);
        cfg.input.coords_as_scalars = true;
        let clouds = random_clouds(2, 6, 0, 0, 5);
        let a = audit(&build(&cfg).unwrap(), &clouds, 4, 3).unwrap();
        assert_eq!(a.measured, Symmetry::None);
        assert!(a.passed());
        let a = audit(&build(&small(Regime::Se3R3S2, Readout::InvariantPerPoint)).unwrap(), &clouds, 4, 3).unwrap();
        assert_eq!(a.measured, Symmetry::Se3);
        assert!(a.passed());
    }
}
