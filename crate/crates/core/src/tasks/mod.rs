//! Synthetic tasks, metrics, the training loop and the diffusion toy.

mod diffusion;
mod generators;
mod metrics;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom3d::{random_rotation, RigidMotion, Vec3};
use crate::pointcloud::{transform_cloud, PointCloud};

pub use diffusion::{
    chamfer_distance, edm_coefficients, edm_precondition, karras_sample, min_chamfer_to_set,
    noise_samples, shape_dataset, train_denoiser, DenoiserTraining, DiffusionSchedule,
    EdmCoefficients, ShapeDataset, P_MEAN, P_STD,
};
pub use generators::{
    chain_displacements, gen_inv_regression, gen_part_segmentation, gen_symmetric_disambiguation,
    gen_vector_motion, generate, pair_potential, quadrant_label, SEGMENTATION_PARTS,
};
pub use metrics::{accuracy, confusion_matrix, instance_mean_iou, iou_per_class, mse};
pub use train::{
    evaluate, fit_length_scale, train, Evaluation, History, MetricRow, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    InvRegression,
    PartSegmentation,
    VectorMotion,
    SymmetricDisambiguation,
    DiffusionGen,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::InvRegression,
        TaskKind::PartSegmentation,
        TaskKind::VectorMotion,
        TaskKind::SymmetricDisambiguation,
        TaskKind::DiffusionGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::InvRegression => "inv_regression",
            TaskKind::PartSegmentation => "part_segmentation",
            TaskKind::VectorMotion => "vector_motion",
            TaskKind::SymmetricDisambiguation => "symmetric_disambiguation",
            TaskKind::DiffusionGen => "diffusion_gen",
        }
    }

    /// Name of the headline test metric.
    pub fn metric_name(self) -> &'static str {
        match self {
            TaskKind::InvRegression | TaskKind::VectorMotion => "mse",
            TaskKind::PartSegmentation => "iou",
            TaskKind::SymmetricDisambiguation => "accuracy",
            TaskKind::DiffusionGen => "chamfer",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown task kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_size: usize,
    pub test_size: usize,
    pub rotate_train: bool,
    pub rotate_test: bool,
    /// Standard deviation of positional jitter.
    pub noise_level: f64,
    /// Points per sample (per part or leg where the task is compositional);
    /// 0 selects the task default.
    pub points: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::InvRegression,
            train_size: 32,
            test_size: 16,
            rotate_train: false,
            rotate_test: false,
            noise_level: 0.0,
            points: 0,
            seed: 0,
        }
    }
}

/// Supervision of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// One value vector per sample.
    Global(Vec<f64>),
    /// A class per point.
    Classes(Vec<usize>),
    /// A vector per point.
    Vectors(Vec<Vec3>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub target: Target,
}

impl Sample {
    /// Applies `g` to the input and, for vector targets, to the target.
    pub fn transformed(&self, g: &RigidMotion) -> Sample {
        let target = match &self.target {
            Target::Vectors(v) => Target::Vectors(v.iter().map(|x| g.apply_vector(x)).collect()),
            other => other.clone(),
        };
        Sample {
            cloud: transform_cloud(&self.cloud, g),
            target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Class count for classification tasks, target width otherwise.
    pub outputs: usize,
}

impl Dataset {
    /// Keeps the first `fraction` of the training set (at least one sample).
    pub fn with_train_fraction(&self, fraction: f64) -> Dataset {
        let n = ((self.train.len() as f64 * fraction).round() as usize).clamp(1, self.train.len().max(1));
        Dataset {
            train: self.train[..n.min(self.train.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Each sample rotated by its own random rotation about the origin.
pub fn rotate_samples(samples: &[Sample], seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| s.transformed(&RigidMotion::from_rotation(random_rotation(&mut rng))))
        .collect()
}
