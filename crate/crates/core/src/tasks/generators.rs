use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Sample, Target, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::geom3d::{random_motion, random_rotation, RigidMotion, Rotation3, Vec3};
use crate::pointcloud::{Labels, PointCloud};

pub const SEGMENTATION_PARTS: usize = 3;
const LEGS: usize = 4;
/// Time step and angular speed of the motion task.
const MOTION_DT: f64 = 1.0;
const MOTION_OMEGA: f64 = 0.3;

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

fn unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = gaussian(rng);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Independent streams for the train split, the test split and rotations.
fn streams(seed: u64) -> [ChaCha8Rng; 3] {
    [1, 2, 3].map(|s| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    })
}

fn split<F>(spec: &TaskSpec, outputs: usize, mut make: F) -> Result<Dataset>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<Sample>,
{
    let [mut train_rng, mut test_rng, mut rot_rng] = streams(spec.seed);
    let mut build = |n: usize, rng: &mut ChaCha8Rng, rotate: bool, rot: &mut ChaCha8Rng| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let s = make(rng)?;
                Ok(if rotate {
                    s.transformed(&RigidMotion::from_rotation(random_rotation(rot)))
                } else {
                    s
                })
            })
            .collect()
    };
    let train = build(spec.train_size, &mut train_rng, spec.rotate_train, &mut rot_rng)?;
    let test = build(spec.test_size, &mut test_rng, spec.rotate_test, &mut rot_rng)?;
    Ok(Dataset {
        kind: spec.kind,
        train,
        test,
        outputs,
    })
}

/// `Σ_{i≠j} exp(−‖xᵢ − xⱼ‖)` over ordered pairs.
pub fn pair_potential(points: &[Vec3]) -> f64 {
    let mut s = 0.0;
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i != j {
                s += (-(a - b).norm()).exp();
            }
        }
    }
    s
}

/// Checks that a target function commutes with a random rigid motion.
fn check_symmetry(sample: &Sample, rng: &mut ChaCha8Rng, recompute: impl Fn(&PointCloud) -> Target) -> Result<()> {
    let g = random_motion(rng, 1.0);
    let moved = sample.transformed(&g);
    let ok = match (&moved.target, recompute(&moved.cloud)) {
        (Target::Global(a), Target::Global(b)) => {
            a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()))
        }
        (Target::Vectors(a), Target::Vectors(b)) => {
            a.iter().zip(&b).all(|(x, y)| (x - y).norm() <= 1e-9 * (1.0 + x.norm()))
        }
        (Target::Classes(a), Target::Classes(b)) => a == &b,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition("generated target violates its symmetry".into()))
    }
}

/// Random clouds of 16 to 32 points with the invariant pair potential as
/// target.
pub fn gen_inv_regression(spec: &TaskSpec) -> Result<Dataset> {
    let mut check_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let recompute = |c: &PointCloud| Target::Global(vec![pair_potential(&c.positions)]);
    split(spec, 1, |rng| {
        let n = if spec.points > 0 { spec.points } else { rng.gen_range(16..=32) };
        let pos: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let target = Target::Global(vec![pair_potential(&pos)]);
        let s = Sample {
            cloud: PointCloud::from_positions(pos),
            target,
        };
        check_symmetry(&s, &mut check_rng, recompute)?;
        Ok(s)
    })
}

/// Index of the canonical quadrant of `p` in the `xy` plane, counting
/// counter-clockwise from `x > 0, y > 0`.
pub fn quadrant_label(p: &Vec3) -> usize {
    match (p.x > 0.0, p.y > 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    }
}

/// Four identical L-shaped legs related by exact quarter turns about `e₃`;
/// every point is labeled by its leg.
pub fn gen_symmetric_disambiguation(spec: &TaskSpec) -> Result<Dataset> {
    let per_leg = if spec.points > 0 { spec.points } else { 4 };
    if per_leg < 2 {
        return Err(Error::Precondition("legs need at least 2 points".into()));
    }
    split(spec, LEGS, |rng| {
        let phi = PI / 4.0 + rng.gen_range(-0.3..0.3);
        let reach = rng.gen_range(0.5..0.8);
        let drop = rng.gen_range(0.4..0.8);
        let dir = Vec3::new(phi.cos(), phi.sin(), 0.0);
        let leg: Vec<Vec3> = (0..per_leg)
            .map(|q| {
                let s = q as f64 / (per_leg - 1) as f64;
                if s <= 0.5 {
                    dir * (reach * (0.4 + 1.2 * s))
                } else {
                    dir * reach - Vec3::z() * (drop * 2.0 * (s - 0.5))
                }
            })
            .collect();
        let mut pos = Vec::with_capacity(LEGS * per_leg);
        let mut labels = Vec::with_capacity(LEGS * per_leg);
        for m in 0..LEGS {
            let r = Rotation3::quarter_turns_z(m as i32);
            for p in &leg {
                let q = r.apply(p);
                labels.push(quadrant_label(&q));
                pos.push(q);
            }
        }
        let cloud = PointCloud::from_positions(pos).with_labels(Labels::Classes(labels.clone()))?;
        Ok(Sample {
            cloud,
            target: Target::Classes(labels),
        })
    })
}

/// Displacement of each node: the mean velocity times the time step plus a
/// rotation `ω × (xᵢ − c)` about the centroid, with `ω` of magnitude 0.3
/// along the chain's angular momentum `Σ (xᵢ − c) × vᵢ`.
pub fn chain_displacements(positions: &[Vec3], velocities: &[Vec3]) -> Vec<Vec3> {
    let n = positions.len().max(1) as f64;
    let c = positions.iter().sum::<Vec3>() / n;
    let drift = velocities.iter().sum::<Vec3>() / n * MOTION_DT;
    let l: Vec3 = positions
        .iter()
        .zip(velocities)
        .map(|(x, v)| (x - c).cross(v))
        .sum();
    let omega = if l.norm() > 1e-12 {
        l * (MOTION_OMEGA / l.norm())
    } else {
        Vec3::zeros()
    };
    positions.iter().map(|x| drift + omega.cross(&(x - c))).collect()
}

/// An 8-node chain extending roughly along `+x`, moving roughly along
/// `+x`, with per-node velocities as auxiliary vectors.
pub fn gen_vector_motion(spec: &TaskSpec) -> Result<Dataset> {
    let nodes = if spec.points > 0 { spec.points } else { 8 };
    let mut check_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let recompute = |c: &PointCloud| {
        let v: Vec<Vec3> = (0..c.len()).map(|i| c.vector(i, 0)).collect();
        Target::Vectors(chain_displacements(&c.positions, &v))
    };
    split(spec, 3, |rng| {
        let mut pos = vec![Vec3::zeros()];
        for _ in 1..nodes {
            let step = (Vec3::x() + gaussian(rng) * 0.6).normalize() * 0.5;
            pos.push(pos.last().expect("nonempty") + step);
        }
        let c = pos.iter().sum::<Vec3>() / nodes as f64;
        for p in &mut pos {
            *p += gaussian(rng) * spec.noise_level - c;
        }
        let speed = rng.gen_range(0.5..1.5);
        let vel: Vec<Vec3> = (0..nodes).map(|_| Vec3::x() * (0.5 * speed) + gaussian(rng) * 0.3).collect();
        let target = chain_displacements(&pos, &vel);
        let cloud = PointCloud::from_positions(pos)
            .with_vectors(1, vel)?
            .with_labels(Labels::Vectors(target.clone()))?;
        let s = Sample {
            cloud,
            target: Target::Vectors(target),
        };
        check_symmetry(&s, &mut check_rng, recompute)?;
        Ok(s)
    })
}

/// Outward normal of box face `f`: `±x, ±y, ±z` for `f = 0..6`.
fn face_normal(f: usize) -> Vec3 {
    let mut n = Vec3::zeros();
    n[f / 2] = if f % 2 == 0 { 1.0 } else { -1.0 };
    n
}

/// An axis-aligned box with a sphere shell on one face and a rod sticking
/// out of another; labels 0 (sphere), 1 (box), 2 (rod).
pub fn gen_part_segmentation(spec: &TaskSpec) -> Result<Dataset> {
    let per_part = if spec.points > 0 { spec.points } else { 10 };
    split(spec, SEGMENTATION_PARTS, |rng| {
        let mut pos = Vec::with_capacity(3 * per_part);
        let mut labels = Vec::with_capacity(3 * per_part);
        let half = Vec3::new(
            rng.gen_range(0.35..0.55),
            rng.gen_range(0.35..0.55),
            rng.gen_range(0.3..0.45),
        );
        let radius = rng.gen_range(0.35..0.5);
        // The sphere sits on top of the box, the rod on a random side face.
        let sphere_face = 4;
        let rod_face = rng.gen_range(0..4);
        let sphere_dir = face_normal(sphere_face);
        let sphere_center = sphere_dir * (half.dot(&sphere_dir.abs()) + radius + 0.1);
        for _ in 0..per_part {
            pos.push(sphere_center + unit(rng) * radius);
            labels.push(0);
        }
        let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
        let total: f64 = areas.iter().sum();
        for _ in 0..per_part {
            let mut u = rng.gen_range(0.0..total);
            let mut axis = 0;
            while axis < 2 && u >= areas[axis] {
                u -= areas[axis];
                axis += 1;
            }
            let mut p = Vec3::new(
                rng.gen_range(-half.x..half.x),
                rng.gen_range(-half.y..half.y),
                rng.gen_range(-half.z..half.z),
            );
            p[axis] = if rng.gen_bool(0.5) { half[axis] } else { -half[axis] };
            pos.push(p);
            labels.push(1);
        }
        let length = rng.gen_range(0.8..1.2);
        let rod_dir = face_normal(rod_face);
        let start = half.dot(&rod_dir.abs()) + 0.15;
        for q in 0..per_part {
            let t = (q as f64 + 0.5) / per_part as f64;
            pos.push(rod_dir * (start + t * length));
            labels.push(2);
        }
        for p in &mut pos {
            *p += gaussian(rng) * spec.noise_level;
        }
        let cloud = PointCloud::from_positions(pos).with_labels(Labels::Classes(labels.clone()))?;
        Ok(Sample {
            cloud,
            target: Target::Classes(labels),
        })
    })
}

/// Dispatches on the task kind. The diffusion task has its own dataset
/// type; see [`super::shape_dataset`].
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    match spec.kind {
        TaskKind::InvRegression => gen_inv_regression(spec),
        TaskKind::PartSegmentation => gen_part_segmentation(spec),
        TaskKind::VectorMotion => gen_vector_motion(spec),
        TaskKind::SymmetricDisambiguation => gen_symmetric_disambiguation(spec),
        TaskKind::DiffusionGen => Err(Error::Precondition(
            "the diffusion task uses the shape dataset, not a supervised split".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::rotate_samples;

    #[test]
    fn pair_potential_examples() {
        assert_eq!(pair_potential(&[Vec3::new(1.0, 2.0, 3.0)]), 0.0);
        let d = 0.7;
        let v = pair_potential(&[Vec3::zeros(), Vec3::new(0.0, d, 0.0)]);
        assert!((v - 2.0 * (-d as f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn regression_targets_are_rotation_invariant() {
        let spec = TaskSpec {
            train_size: 5,
            test_size: 3,
            seed: 4,
            ..TaskSpec::default()
        };
        let data = gen_inv_regression(&spec).unwrap();
        assert_eq!(data.train.len(), 5);
        assert!(data.train.iter().all(|s| (16..=32).contains(&s.cloud.len())));
        for s in rotate_samples(&data.train, 1) {
            let Target::Global(t) = &s.target else { panic!() };
            assert!((t[0] - pair_potential(&s.cloud.positions)).abs() < 1e-9 * t[0]);
        }
        assert_eq!(gen_inv_regression(&spec).unwrap(), data);
        assert_ne!(data.train[0], data.test[0]);
    }

    #[test]
    fn legs_are_exact_quarter_turn_copies() {
        let spec = TaskSpec {
            kind: TaskKind::SymmetricDisambiguation,
            train_size: 3,
            test_size: 1,
            ..TaskSpec::default()
        };
        let data = gen_symmetric_disambiguation(&spec).unwrap();
        let turn = Rotation3::quarter_turns_z(1);
        for s in &data.train {
            let Target::Classes(labels) = &s.target else { panic!() };
            let per_leg = s.cloud.len() / 4;
            for i in 0..s.cloud.len() {
                let leg = labels[i];
                let j = ((leg + 1) % 4) * per_leg + i % per_leg;
                assert!((turn.apply(&s.cloud.positions[i]) - s.cloud.positions[j]).norm() < 1e-12);
                assert_eq!(labels[j], (leg + 1) % 4);
                // The quadrant oracle is exact on aligned data.
                assert_eq!(quadrant_label(&s.cloud.positions[i]), leg);
            }
            for c in 0..4 {
                assert_eq!(labels.iter().filter(|&&l| l == c).count(), per_leg);
            }
        }
    }

    #[test]
    fn motion_examples_and_equivariance() {
        let pos = vec![Vec3::zeros(), Vec3::x(), Vec3::new(2.0, 0.5, 0.0)];
        let zero = chain_displacements(&pos, &[Vec3::zeros(); 3]);
        assert!(zero.iter().all(|d| d.norm() == 0.0));
        let v = Vec3::new(0.3, -0.2, 0.1);
        // Equal velocities carry no angular momentum about the centroid
        // when the chain is straight along the velocity.
        let line = vec![Vec3::zeros(), v, v * 2.0];
        let d = chain_displacements(&line, &[v; 3]);
        assert!(d.iter().all(|x| (x - v).norm() < 1e-15));

        let spec = TaskSpec {
            kind: TaskKind::VectorMotion,
            train_size: 4,
            test_size: 2,
            seed: 2,
            ..TaskSpec::default()
        };
        let data = gen_vector_motion(&spec).unwrap();
        for s in &data.train {
            assert_eq!(s.cloud.len(), 8);
            let g = random_motion(&mut ChaCha8Rng::seed_from_u64(3), 1.0);
            let m = s.transformed(&g);
            let vel: Vec<Vec3> = (0..8).map(|i| m.cloud.vector(i, 0)).collect();
            let Target::Vectors(t) = &m.target else { panic!() };
            let fresh = chain_displacements(&m.cloud.positions, &vel);
            assert!(t.iter().zip(&fresh).all(|(a, b)| (a - b).norm() < 1e-12));
        }
    }

    #[test]
    fn segmentation_is_balanced_and_rotated_on_request() {
        let spec = TaskSpec {
            kind: TaskKind::PartSegmentation,
            train_size: 2,
            test_size: 2,
            rotate_test: true,
            seed: 7,
            ..TaskSpec::default()
        };
        let data = gen_part_segmentation(&spec).unwrap();
        let Target::Classes(l) = &data.train[0].target else { panic!() };
        assert_eq!(l.len(), 30);
        for c in 0..3 {
            assert_eq!(l.iter().filter(|&&x| x == c).count(), 10);
        }
        // Rod points of the aligned training data lie on a coordinate axis.
        let rod = &data.train[0].cloud.positions[20..];
        let axis = (0..3).find(|&a| rod[0][a] != 0.0).unwrap();
        assert!(rod.iter().all(|p| (0..3).all(|a| a == axis || p[a] == 0.0)));
        let rod = &data.test[0].cloud.positions[20..];
        assert!(rod.iter().any(|p| p.y.abs() > 1e-6));
    }
}
