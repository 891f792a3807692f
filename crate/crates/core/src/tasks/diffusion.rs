use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::train::TrainConfig;
use crate::autodiff::{adam_step, cosine_lr, AdamConfig, AdamState, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{SphereGrid, Vec3};
use crate::layers::Forward;
use crate::model::Model;
use crate::pointcloud::PointCloud;

/// Log-normal training noise distribution: `ln σ ~ N(P_MEAN, P_STD²)`.
pub const P_MEAN: f64 = -1.2;
pub const P_STD: f64 = 1.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub n_steps: usize,
    pub rho: f64,
    /// Total stochasticity; 0 gives the deterministic Heun sampler.
    pub churn: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            n_steps: 18,
            rho: 7.0,
            churn: 0.0,
        }
    }
}

impl DiffusionSchedule {
    /// The `n_steps` noise levels from `sigma_max` down to `sigma_min`,
    /// evenly spaced in `σ^{1/ρ}`.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.n_steps;
        if n == 1 {
            return vec![self.sigma_max];
        }
        let a = self.sigma_max.powf(1.0 / self.rho);
        let b = self.sigma_min.powf(1.0 / self.rho);
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    return self.sigma_min;
                }
                (a + i as f64 / (n - 1) as f64 * (b - a)).powf(self.rho)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_steps > 0
            && self.sigma_min > 0.0
            && self.sigma_max >= self.sigma_min
            && self.sigma_data > 0.0
            && self.rho > 0.0
            && self.churn >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid diffusion schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn edm_coefficients(sigma: f64, sigma_data: f64) -> EdmCoefficients {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    EdmCoefficients {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    }
}

/// Input cloud of the raw network: scaled positions with the noise level as
/// a single scalar channel.
fn network_input(x: &[Vec3], k: &EdmCoefficients) -> Result<PointCloud> {
    PointCloud::from_positions(x.iter().map(|p| p * k.c_in).collect()).with_scalars(1, vec![k.c_noise; x.len()])
}

fn check_denoiser(model: &Model) -> Result<()> {
    if model.config.input.scalar_channels != 1 {
        return Err(Error::Config("the denoiser takes exactly one scalar channel (the noise level)".into()));
    }
    if model.config.readout != crate::model::Readout::Vector {
        return Err(Error::Config("the denoiser needs readout = vector".into()));
    }
    Ok(())
}

/// `D(x, σ) = c_skip·x + c_out·F(c_in·x, c_noise)` with `F` the model.
pub fn edm_precondition(
    model: &Model,
    grid: &SphereGrid,
    x_noisy: &[Vec3],
    sigma: f64,
    sigma_data: f64,
) -> Result<Vec<Vec3>> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("sigma must be positive, got {sigma}")));
    }
    check_denoiser(model)?;
    let k = edm_coefficients(sigma, sigma_data);
    let f = model.forward(&network_input(x_noisy, &k)?, grid)?;
    Ok(x_noisy
        .iter()
        .zip(f.data().chunks(3))
        .map(|(x, f)| x * k.c_skip + Vec3::new(f[0], f[1], f[2]) * k.c_out)
        .collect())
}

fn centered_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, sigma: f64) -> Vec<Vec3> {
    let mut v: Vec<Vec3> = (0..n)
        .map(|_| {
            Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ) * sigma
        })
        .collect();
    let c = v.iter().sum::<Vec3>() / n.max(1) as f64;
    for x in &mut v {
        *x -= c;
    }
    v
}

/// Stochastic second-order sampler. `denoiser(x, σ)` returns the denoised
/// estimate. Noise is centered so samples stay at the origin.
pub fn karras_sample<F>(mut denoiser: F, schedule: &DiffusionSchedule, n_points: usize, seed: u64) -> Result<PointCloud>
where
    F: FnMut(&[Vec3], f64) -> Result<Vec<Vec3>>,
{
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sigmas = schedule.sigmas();
    sigmas.push(0.0);
    let n = schedule.n_steps;
    let gamma = (schedule.churn / n as f64).min(2f64.sqrt() - 1.0);
    let mut x = centered_noise(&mut rng, n_points, sigmas[0]);
    let slope = |x: &[Vec3], d: &[Vec3], s: f64| -> Vec<Vec3> { x.iter().zip(d).map(|(a, b)| (a - b) / s).collect() };
    for i in 0..n {
        let (cur, next) = (sigmas[i], sigmas[i + 1]);
        let hat = cur * (1.0 + gamma);
        if hat > cur {
            let extra = centered_noise(&mut rng, n_points, (hat * hat - cur * cur).sqrt());
            for (a, e) in x.iter_mut().zip(extra) {
                *a += e;
            }
        }
        let d = slope(&x, &denoiser(&x, hat)?, hat);
        let euler: Vec<Vec3> = x.iter().zip(&d).map(|(a, g)| a + g * (next - hat)).collect();
        x = if next > 0.0 {
            let d2 = slope(&euler, &denoiser(&euler, next)?, next);
            x.iter()
                .zip(d.iter().zip(&d2))
                .map(|(a, (g1, g2))| a + (g1 + g2) * (0.5 * (next - hat)))
                .collect()
        } else {
            euler
        };
        if x.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("sampler state at step {i}")));
        }
    }
    Ok(PointCloud::from_positions(x))
}

/// Canonically aligned shapes centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    pub shapes: Vec<Vec<Vec3>>,
    /// Empirical per-coordinate standard deviation.
    pub sigma_data: f64,
}

/// Alternating unit cube and unit sphere shells with points drawn
/// uniformly on the surface.
pub fn shape_dataset(n_shapes: usize, n_points: usize, seed: u64) -> Result<ShapeDataset> {
    if n_shapes == 0 || n_points == 0 {
        return Err(Error::Precondition("shape dataset needs shapes and points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::with_capacity(n_shapes);
    for s in 0..n_shapes {
        let size = 1.0;
        let mut pts: Vec<Vec3> = (0..n_points)
            .map(|_| {
                if s % 2 == 0 {
                    let mut p = Vec3::new(
                        rng.gen_range(-size..size),
                        rng.gen_range(-size..size),
                        rng.gen_range(-size..size),
                    );
                    let axis = rng.gen_range(0..3);
                    p[axis] = if rng.gen_bool(0.5) { size } else { -size };
                    p
                } else {
                    let v: Vec3 = Vec3::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    );
                    v.normalize() * size
                }
            })
            .collect();
        let c = pts.iter().sum::<Vec3>() / n_points as f64;
        for p in &mut pts {
            *p -= c;
        }
        shapes.push(pts);
    }
    let count = (3 * n_shapes * n_points) as f64;
    let sigma_data = (shapes.iter().flatten().map(|p| p.norm_squared()).sum::<f64>() / count).sqrt();
    Ok(ShapeDataset { shapes, sigma_data })
}

/// Pure-noise baseline: centered Gaussian clouds with standard deviation
/// `sigma` per coordinate.
pub fn noise_samples(n_samples: usize, n_points: usize, sigma: f64, seed: u64) -> Vec<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples).map(|_| centered_noise(&mut rng, n_points, sigma)).collect()
}

fn mean_nearest(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / a.len() as f64
}

/// Symmetric Chamfer distance: the average of the two mean squared
/// nearest-neighbor distances.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    0.5 * (mean_nearest(a, b) + mean_nearest(b, a))
}

/// Distance from `sample` to the closest member of `set`.
pub fn min_chamfer_to_set(sample: &[Vec3], set: &[Vec<Vec3>]) -> f64 {
    set.iter().map(|s| chamfer_distance(sample, s)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTraining {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Denoising score matching with log-normal noise levels. The loss
/// `‖F(c_in·x̃, c_noise) − (x − c_skip·x̃)/c_out‖²` already carries the
/// EDM weighting, whose product with `c_out²` is one.
pub fn train_denoiser(model: &mut Model, data: &ShapeDataset, cfg: &TrainConfig) -> Result<DenoiserTraining> {
    check_denoiser(model)?;
    let grid = model.default_grid()?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.shapes.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let lr = cfg.lr * cosine_lr(epoch + 1, cfg.epochs + 1, cfg.warmup);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut fw = Forward::new(&model.params, true);
            let mut total: Option<Var> = None;
            for &i in chunk {
                let x = &data.shapes[i];
                let z: f64 = StandardNormal.sample(&mut rng);
                let sigma = (P_MEAN + P_STD * z).exp();
                let k = edm_coefficients(sigma, data.sigma_data);
                let noisy: Vec<Vec3> = x
                    .iter()
                    .zip(centered_noise(&mut rng, x.len(), sigma))
                    .map(|(a, n)| a + n)
                    .collect();
                let prep = model.prepare(&network_input(&noisy, &k)?, &grid)?;
                let out = model.forward_prepared(&mut fw, &prep)?;
                let target: Vec<f64> = x
                    .iter()
                    .zip(&noisy)
                    .flat_map(|(a, b)| {
                        let t = (a - b * k.c_skip) / k.c_out;
                        [t.x, t.y, t.z]
                    })
                    .collect();
                let t = fw.constant(Tensor::new(vec![x.len(), 3], target)?);
                let d = fw.tape.sub(out, t)?;
                let sq = fw.tape.powi(d, 2)?;
                let l = fw.tape.mean_all(sq);
                total = Some(match total {
                    Some(t) => fw.tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("nonempty chunk");
            let loss = fw.tape.scale(total, 1.0 / chunk.len() as f64);
            let value = fw.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            epoch_loss += value * chunk.len() as f64;
            fw.tape.backward(loss)?;
            let grads = fw.tape.param_grads();
            drop(fw);
            adam_step(&mut model.params, &grads, &mut state, lr, &adam);
        }
        epoch_losses.push(epoch_loss / data.shapes.len() as f64);
    }
    Ok(DenoiserTraining { epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_identities() {
        let sd = 0.7;
        let k = edm_coefficients(sd, sd);
        assert!((k.c_skip - 0.5).abs() < 1e-15);
        let tiny = edm_coefficients(1e-9, sd);
        assert!((tiny.c_skip - 1.0).abs() < 1e-15 && tiny.c_out < 1e-8);
        for s in [1e-3, 0.1, 1.0, 7.0, 80.0] {
            let k = edm_coefficients(s, sd);
            assert!((k.c_in * k.c_in * (s * s + sd * sd) - 1.0).abs() < 1e-12);
            assert!((k.c_noise - s.ln() / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ladder_is_decreasing_with_exact_endpoints() {
        let s = DiffusionSchedule::default();
        let l = s.sigmas();
        assert_eq!(l.len(), 18);
        assert!((l[0] - 80.0).abs() < 1e-12 && (l[17] - 0.002).abs() < 1e-12);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        let one = DiffusionSchedule { n_steps: 1, ..s };
        assert_eq!(one.sigmas(), vec![80.0]);
    }

    #[test]
    fn oracle_denoiser_recovers_the_clean_shape() {
        let clean = shape_dataset(1, 20, 3).unwrap().shapes.remove(0);
        for (steps, churn) in [(1, 0.0), (5, 0.0), (18, 0.0), (18, 40.0)] {
            let s = DiffusionSchedule {
                n_steps: steps,
                churn,
                ..DiffusionSchedule::default()
            };
            let out = karras_sample(|_, _| Ok(clean.clone()), &s, 20, 11).unwrap();
            let err = out.positions.iter().zip(&clean).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-6, "steps {steps} churn {churn}: {err}");
        }
    }

    #[test]
    fn single_step_is_one_euler_step_from_noise() {
        let s = DiffusionSchedule {
            n_steps: 1,
            ..DiffusionSchedule::default()
        };
        let mut seen = Vec::new();
        let out = karras_sample(
            |x, sigma| {
                seen.push((x.to_vec(), sigma));
                Ok(x.iter().map(|p| p * 0.25).collect())
            },
            &s,
            6,
            2,
        )
        .unwrap();
        assert_eq!(seen.len(), 1);
        let (x0, sigma) = &seen[0];
        assert_eq!(*sigma, 80.0);
        // x1 = x0 + (0 − σ)·(x0 − D(x0))/σ = D(x0).
        for (a, b) in out.positions.iter().zip(x0) {
            assert!((a - b * 0.25).norm() < 1e-12);
        }
        let com = x0.iter().sum::<Vec3>() / 6.0;
        assert!(com.norm() < 1e-12);
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let s = DiffusionSchedule {
            n_steps: 4,
            churn: 2.0,
            ..DiffusionSchedule::default()
        };
        let d = |x: &[Vec3], _: f64| Ok(x.iter().map(|p| p * 0.5).collect());
        let a = karras_sample(d, &s, 5, 1).unwrap();
        assert_eq!(a, karras_sample(d, &s, 5, 1).unwrap());
        assert_ne!(a, karras_sample(d, &s, 5, 2).unwrap());
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Vec3::zeros(), Vec3::x()];
        assert_eq!(chamfer_distance(&a, &a), 0.0);
        let b: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.0, 0.3, 0.0)).collect();
        assert!((chamfer_distance(&a, &b) - 0.09).abs() < 1e-15);
        assert_eq!(min_chamfer_to_set(&a, &[b, a.clone()]), 0.0);
    }

    #[test]
    fn shapes_are_centered_and_scale_is_empirical() {
        let d = shape_dataset(4, 32, 0).unwrap();
        for s in &d.shapes {
            assert!((s.iter().sum::<Vec3>() / 32.0).norm() < 1e-12);
        }
        assert!(d.sigma_data > 0.3 && d.sigma_data < 1.0);
        let noise = noise_samples(2, 32, d.sigma_data, 1);
        assert_eq!(noise.len(), 2);
        assert!((noise[0].iter().sum::<Vec3>()).norm() < 1e-12);
    }
}
