//! Rotations, rigid motions and discretized spherical fibers.
//!
//! All geometry is carried in `f64`. The canonical fiber axis is
//! `e3 = (0, 0, 1)`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used when validating unit-vector preconditions.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A proper rotation matrix (`RᵀR = I`, `det R = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    matrix: Matrix3<f64>,
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Wraps a matrix, checking orthogonality and orientation to `tol`.
    pub fn from_matrix(matrix: Matrix3<f64>, tol: f64) -> Result<Self> {
        let defect = (matrix.transpose() * matrix - Matrix3::identity()).abs().max();
        let det = matrix.determinant();
        if !defect.is_finite() || defect > tol || (det - 1.0).abs() > tol {
            return Err(Error::Precondition(format!(
                "matrix is not a rotation (orthogonality defect {defect:e}, det {det})"
            )));
        }
        Ok(Self { matrix })
    }

    /// Rotation from a (not necessarily normalized) quaternion `(w, x, y, z)`.
    ///
    /// Returns `None` when the quaternion is too close to zero to normalize.
    pub fn from_quaternion(q: [f64; 4]) -> Option<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return None;
        }
        let [w, x, y, z] = q.map(|c| c / norm);
        let matrix = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Some(Self { matrix })
    }

    /// Rotation by `angle` radians about the unit `axis`.
    pub fn about_axis(axis: &Vec3, angle: f64) -> Self {
        let half = 0.5 * angle;
        let a = axis.normalize() * half.sin();
        Self::from_quaternion([half.cos(), a.x, a.y, a.z]).unwrap_or_default()
    }

    /// Exact quarter turns about `e3` (no rounding in the matrix entries).
    pub fn quarter_turns_z(turns: i32) -> Self {
        let (c, s) = match turns.rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        Self {
            matrix: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.matrix * v
    }

    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        Rotation3 {
            matrix: self.matrix * other.matrix,
        }
    }

    pub fn inverse(&self) -> Rotation3 {
        Rotation3 {
            matrix: self.matrix.transpose(),
        }
    }

    /// Column `m` of the matrix, i.e. the image of the canonical axis `e_m`.
    pub fn axis(&self, m: usize) -> Vec3 {
        self.matrix.column(m).into_owned()
    }
}

/// Samples a Haar-uniform rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    rotation_from_quaternion_source(|| {
        [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ]
    })
}

/// Draws quaternions from `source` until one can be normalized.
///
/// An isotropic Gaussian quaternion normalizes to a Haar-uniform rotation.
pub fn rotation_from_quaternion_source<F>(mut source: F) -> Rotation3
where
    F: FnMut() -> [f64; 4],
{
    loop {
        if let Some(r) = Rotation3::from_quaternion(source()) {
            return r;
        }
    }
}

/// Returns `R_n` with `R_n e3 = n`.
///
/// The antipodal case `n = -e3` uses the half turn about `e1`.
pub fn align_axis_to(n: &Vec3) -> Result<Rotation3> {
    let norm = n.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Precondition(format!(
            "align_axis_to expects a unit vector, got norm {norm}"
        )));
    }
    let n = n / norm;
    let c = n.z;
    if c < -1.0 + 1e-12 {
        return Ok(Rotation3 {
            matrix: Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
        });
    }
    // Rodrigues with v = e3 x n = (-n.y, n.x, 0).
    let v = Vec3::new(-n.y, n.x, 0.0);
    let vx = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    let matrix = Matrix3::identity() + vx + vx * vx / (1.0 + c);
    Ok(Rotation3 { matrix })
}

/// Element `(x, R)` of SE(3) acting as `p -> R p + x`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidMotion {
    pub translation: Vec3,
    pub rotation: Rotation3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(translation: Vec3, rotation: Rotation3) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn from_rotation(rotation: Rotation3) -> Self {
        Self::new(Vec3::zeros(), rotation)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(translation, Rotation3::identity())
    }

    /// `(x, R)(x', R') = (R x' + x, R R')`.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        RigidMotion {
            translation: self.rotation.apply(&other.translation) + self.translation,
            rotation: self.rotation.compose(&other.rotation),
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let rinv = self.rotation.inverse();
        RigidMotion {
            translation: -rinv.apply(&self.translation),
            rotation: rinv,
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }
}

/// Samples a rigid motion with Haar rotation and Gaussian translation of
/// standard deviation `translation_scale`.
pub fn random_motion<R: Rng + ?Sized>(rng: &mut R, translation_scale: f64) -> RigidMotion {
    let rotation = random_rotation(rng);
    let t = Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * translation_scale;
    RigidMotion::new(t, rotation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GridMethod {
    #[default]
    Fibonacci,
    Repulsion,
}

impl FromStr for GridMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fibonacci" => Ok(Self::Fibonacci),
            "repulsion" => Ok(Self::Repulsion),
            other => Err(Error::Parse(format!("unknown grid method `{other}`"))),
        }
    }
}

impl std::fmt::Display for GridMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fibonacci => "fibonacci",
            Self::Repulsion => "repulsion",
        })
    }
}

pub const REPULSION_STEPS: usize = 200;
pub const REPULSION_STEP_SIZE: f64 = 0.01;

/// Discretized orientations `n_k` on S² with quadrature weights `w_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    directions: Vec<Vec3>,
    weights: Vec<f64>,
}

impl SphereGrid {
    /// Builds a grid from explicit unit directions and weights.
    pub fn from_parts(directions: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if directions.is_empty() || directions.len() != weights.len() {
            return Err(Error::Precondition(format!(
                "sphere grid needs matching non-empty directions/weights ({} vs {})",
                directions.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Precondition("negative quadrature weight".into()));
        }
        if let Some(d) = directions
            .iter()
            .find(|d| !((d.norm() - 1.0).abs() <= UNIT_TOLERANCE))
        {
            return Err(Error::Precondition(format!(
                "grid direction {d:?} is not a unit vector"
            )));
        }
        Ok(Self {
            directions,
            weights,
        })
    }

    /// The single-direction fiber that degenerates to the ℝ³ base space.
    pub fn trivial() -> Self {
        Self {
            directions: vec![Vec3::new(0.0, 0.0, 1.0)],
            weights: vec![4.0 * PI],
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `n_kᵀ n_l`, row-major `O x O`.
    pub fn gram(&self) -> Vec<f64> {
        let o = self.len();
        let mut g = Vec::with_capacity(o * o);
        for a in &self.directions {
            for b in &self.directions {
                g.push(a.dot(b));
            }
        }
        g
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,weight\n");
        for (d, w) in self.directions.iter().zip(&self.weights) {
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e}", d.x, d.y, d.z, w);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "x,y,z,weight" => {}
            _ => return Err(Error::Parse("sphere grid CSV must start with x,y,z,weight".into())),
        }
        let mut directions = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 4 {
                return Err(Error::Parse(format!("line {}: expected 4 columns", lineno + 1)));
            }
            directions.push(Vec3::new(vals[0], vals[1], vals[2]));
            weights.push(vals[3]);
        }
        Self::from_parts(directions, weights)
    }
}

/// Builds an `n_points` grid with uniform weights `4π/N`.
pub fn make_sphere_grid(n_points: usize, method: GridMethod) -> Result<SphereGrid> {
    if n_points == 0 {
        return Err(Error::Precondition("sphere grid needs at least one point".into()));
    }
    let mut directions = fibonacci_directions(n_points);
    if method == GridMethod::Repulsion && n_points > 1 {
        repel(&mut directions, REPULSION_STEPS, REPULSION_STEP_SIZE);
    }
    let w = 4.0 * PI / n_points as f64;
    Ok(SphereGrid {
        directions,
        weights: vec![w; n_points],
    })
}

fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    if n == 1 {
        return vec![Vec3::new(0.0, 0.0, 1.0)];
    }
    let golden_angle = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2 * k + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden_angle * k as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z).normalize()
        })
        .collect()
}

/// Projected gradient descent on the inverse-distance energy.
fn repel(points: &mut [Vec3], steps: usize, step_size: f64) {
    let n = points.len();
    let mut forces = vec![Vec3::zeros(); n];
    for _ in 0..steps {
        forces.iter_mut().for_each(|f| *f = Vec3::zeros());
        for i in 0..n {
            for j in (i + 1)..n {
                let d = points[i] - points[j];
                let r2 = d.norm_squared().max(1e-12);
                let f = d / (r2 * r2.sqrt());
                forces[i] += f;
                forces[j] -= f;
            }
        }
        for (p, f) in points.iter_mut().zip(&forces) {
            let tangential = f - *p * p.dot(f);
            *p = (*p + tangential * step_size).normalize();
        }
    }
}

/// Rotates every direction by `r`; weights are unchanged.
pub fn rotate_grid(grid: &SphereGrid, r: &Rotation3) -> SphereGrid {
    SphereGrid {
        directions: grid.directions.iter().map(|d| r.apply(d)).collect(),
        weights: grid.weights.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orth_defect(r: &Rotation3) -> f64 {
        (r.matrix().transpose() * r.matrix() - Matrix3::identity())
            .abs()
            .max()
    }

    #[test]
    fn zero_quaternion_is_rejected_and_resampled() {
        let mut calls = 0;
        let r = rotation_from_quaternion_source(|| {
            calls += 1;
            if calls == 1 {
                [0.0; 4]
            } else {
                [0.3, -0.2, 0.9, 0.1]
            }
        });
        assert_eq!(calls, 2);
        assert!(orth_defect(&r) < 1e-12);
        assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rotations_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            assert!(orth_defect(&r) < 1e-12);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn haar_mean_of_rotated_axis_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut mean = Vec3::zeros();
        for _ in 0..n {
            mean += random_rotation(&mut rng).axis(2);
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.02, "mean {mean:?}");
    }

    #[test]
    fn align_axis_cases() {
        let e3 = Vec3::new(0.0, 0.0, 1.0);
        let id = align_axis_to(&e3).unwrap();
        assert_eq!(id, Rotation3::identity());

        let down = align_axis_to(&-e3).unwrap();
        assert!((down.apply(&e3) - (-e3)).norm() < 1e-12);
        assert!(orth_defect(&down) < 1e-12);

        let x = Vec3::new(1.0, 0.0, 0.0);
        let r = align_axis_to(&x).unwrap();
        assert!((r.apply(&e3) - x).norm() < 1e-12);
        assert!(orth_defect(&r) < 1e-12);

        assert!(align_axis_to(&Vec3::new(2.0, 0.0, 0.0)).is_err());
        assert!(align_axis_to(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn align_axis_near_antipode_is_finite() {
        let n = Vec3::new(1e-9, 0.0, -1.0).normalize();
        let r = align_axis_to(&n).unwrap();
        assert!(r.matrix().iter().all(|v| v.is_finite()));
        assert!((r.apply(&Vec3::z()) - n).norm() < 1e-8);
    }

    #[test]
    fn single_point_grid_is_trivial_fiber() {
        let g = make_sphere_grid(1, GridMethod::Fibonacci).unwrap();
        assert_eq!(g, SphereGrid::trivial());
        assert!(make_sphere_grid(0, GridMethod::Fibonacci).is_err());
    }

    #[test]
    fn two_point_grid_is_spread() {
        let g = make_sphere_grid(2, GridMethod::Fibonacci).unwrap();
        assert!(g.directions()[0].dot(&g.directions()[1]) < 0.0);
    }

    fn check_grid_invariants(g: &SphereGrid) {
        for d in g.directions() {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        let total: f64 = g.weights().iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-9);
        if g.len() >= 16 {
            let mean: Vec3 = g.directions().iter().sum::<Vec3>() / g.len() as f64;
            assert!(mean.norm() < 0.05, "N={} mean {}", g.len(), mean.norm());
        }
    }

    #[test]
    fn grid_invariants_hold_for_both_methods() {
        for method in [GridMethod::Fibonacci, GridMethod::Repulsion] {
            for n in [1, 2, 3, 4, 8, 16, 17, 32, 64] {
                check_grid_invariants(&make_sphere_grid(n, method).unwrap());
            }
        }
    }

    #[test]
    fn repulsion_is_deterministic_and_lowers_energy() {
        let energy = |g: &SphereGrid| {
            let d = g.directions();
            let mut e = 0.0;
            for i in 0..d.len() {
                for j in (i + 1)..d.len() {
                    e += 1.0 / (d[i] - d[j]).norm();
                }
            }
            e
        };
        let a = make_sphere_grid(24, GridMethod::Repulsion).unwrap();
        let b = make_sphere_grid(24, GridMethod::Repulsion).unwrap();
        assert_eq!(a, b);
        let fib = make_sphere_grid(24, GridMethod::Fibonacci).unwrap();
        assert!(energy(&a) <= energy(&fib));
    }

    #[test]
    fn covering_radius_at_32_points() {
        let g = make_sphere_grid(32, GridMethod::Fibonacci).unwrap();
        // Dense probe directions from a fine fibonacci lattice.
        let probes = fibonacci_directions(20_000);
        let worst = probes
            .iter()
            .map(|u| {
                g.directions()
                    .iter()
                    .map(|n| u.dot(n).clamp(-1.0, 1.0).acos())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        assert!(worst.to_degrees() < 40.0, "covering radius {}", worst.to_degrees());
    }

    #[test]
    fn rotate_grid_identity_inverse_and_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = make_sphere_grid(12, GridMethod::Fibonacci).unwrap();
        assert_eq!(rotate_grid(&g, &Rotation3::identity()), g);
        let r = random_rotation(&mut rng);
        let back = rotate_grid(&rotate_grid(&g, &r), &r.inverse());
        for (a, b) in back.directions().iter().zip(g.directions()) {
            assert!((a - b).norm() < 1e-12);
        }
        let rotated = rotate_grid(&g, &r);
        assert_eq!(rotated.weights(), g.weights());
        for (a, b) in rotated.gram().iter().zip(g.gram()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_motion_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = random_motion(&mut rng, 2.0);
            let h = random_motion(&mut rng, 2.0);
            let p = random_motion(&mut rng, 2.0);
            let lhs = g.compose(&h).compose(&p);
            let rhs = g.compose(&h.compose(&p));
            assert!((lhs.translation - rhs.translation).norm() < 1e-12);
            assert!((lhs.rotation.matrix() - rhs.rotation.matrix()).abs().max() < 1e-12);

            let id = g.compose(&g.inverse());
            assert!(id.translation.norm() < 1e-12);
            assert!((id.rotation.matrix() - Matrix3::identity()).abs().max() < 1e-12);
            assert_eq!(g.compose(&RigidMotion::identity()), g);

            let x = Vec3::new(0.3, -1.0, 2.0);
            let seq = g.apply_point(&h.apply_point(&x));
            assert!((g.compose(&h).apply_point(&x) - seq).norm() < 1e-12);
        }
    }

    #[test]
    fn grid_csv_round_trip_is_exact() {
        let g = make_sphere_grid(8, GridMethod::Repulsion).unwrap();
        let back = SphereGrid::from_csv(&g.to_csv()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn quarter_turns_are_exact() {
        let r = Rotation3::quarter_turns_z(1);
        assert_eq!(r.apply(&Vec3::new(1.0, 2.0, 3.0)), Vec3::new(-2.0, 1.0, 3.0));
        assert_eq!(Rotation3::quarter_turns_z(4), Rotation3::identity());
    }
}
