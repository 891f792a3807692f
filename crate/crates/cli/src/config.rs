//! Experiment configuration: a plain-text `key = value` file with
//! `[section]` headers.
//!
//! ```text
//! seed = 7
//!
//! [model]
//! regime = SE3_R3S2
//! fiber_size = 8
//!
//! [task]
//! kind = part_segmentation
//! ```
//!
//! Keys before the first header are global. Lines starting with `#` or `;`
//! are comments. Any key can be overridden from the environment with
//! `RAPIDASH_<SECTION>_<KEY>` (`RAPIDASH_<KEY>` for global keys).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rapidash::geom3d::GridMethod;
use rapidash::invariants::Regime;
use rapidash::model::{ModelConfig, Readout, Symmetry};
use rapidash::tasks::{DiffusionSchedule, TaskKind, TaskSpec, TrainConfig};

pub const ENV_PREFIX: &str = "RAPIDASH_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the config file, when the error comes from one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    pub fn plain(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessSettings {
    pub trials: usize,
    pub clouds: usize,
    pub points: usize,
    /// Symmetry the audit must confirm; the model's own claim when unset.
    pub claim: Option<Symmetry>,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        Self { trials: 20, clouds: 4, points: 12, claim: None }
    }
}

fn parse_symmetry(key: &str, value: &str) -> Result<Option<Symmetry>, String> {
    if value == "auto" {
        return Ok(None);
    }
    [Symmetry::Se3, Symmetry::So3, Symmetry::T3, Symmetry::None]
        .into_iter()
        .find(|s| s.name().eq_ignore_ascii_case(value))
        .map(Some)
        .ok_or_else(|| format!("`{key}` expects auto, SE3, SO3, T3 or none, got '{value}'"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub schedule: DiffusionSchedule,
    pub samples: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { schedule: DiffusionSchedule::default(), samples: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Row label in results tables.
    pub name: String,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), name: "run".into() }
    }
}

/// Everything one run needs. The seeds inside `model`, `task` and `train`
/// are derived from `seed` and never set directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Fit the length scale to the training data instead of using
    /// `model.length_scale`.
    pub auto_length_scale: bool,
    pub task: TaskSpec,
    pub harness: HarnessSettings,
    pub train: TrainConfig,
    pub sampler: SamplerSettings,
    pub output: OutputSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            model: ModelConfig {
                layers: 3,
                channels: 16,
                ..ModelConfig::default()
            },
            auto_length_scale: true,
            task: TaskSpec::default(),
            harness: HarnessSettings::default(),
            train: TrainConfig::default(),
            sampler: SamplerSettings::default(),
            output: OutputSettings::default(),
        };
        c.derive_seeds();
        c
    }
}

/// Fixed splitting of the master seed into independent streams.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const MODEL_STREAM: u64 = 1;
pub const TASK_STREAM: u64 = 2;
pub const TRAIN_STREAM: u64 = 3;
pub const HARNESS_STREAM: u64 = 4;
pub const SAMPLER_STREAM: u64 = 5;

const SECTIONS: [&str; 7] = ["", "model", "task", "harness", "train", "sampler", "output"];

fn parse_value<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("`{key}` expects {what}, got '{value}'"))
}

fn parse_float(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse_value(key, value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be finite, got '{value}'"))
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got '{value}'")),
    }
}

fn parse_with<T: FromStr<Err = rapidash::Error>>(value: &str) -> Result<T, String> {
    value.trim().parse().map_err(|e: rapidash::Error| e.to_string())
}

impl ExperimentConfig {
    pub fn derive_seeds(&mut self) {
        self.model.seed = sub_seed(self.seed, MODEL_STREAM);
        self.task.seed = sub_seed(self.seed, TASK_STREAM);
        self.train.seed = sub_seed(self.seed, TRAIN_STREAM);
    }

    pub fn harness_seed(&self) -> u64 {
        sub_seed(self.seed, HARNESS_STREAM)
    }

    pub fn sampler_seed(&self) -> u64 {
        sub_seed(self.seed, SAMPLER_STREAM)
    }

    /// Assigns one key. `section` is empty for global keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.task;
        let tr = &mut self.train;
        let s = &mut self.sampler;
        match (section, key) {
            ("", "seed") => self.seed = parse_value(key, v, "an unsigned integer")?,
            ("model", "regime") => m.regime = parse_with::<Regime>(v)?,
            ("model", "layers") => m.layers = parse_value(key, v, "an unsigned integer")?,
            ("model", "channels") => m.channels = parse_value(key, v, "an unsigned integer")?,
            ("model", "inflated_channels") => {
                m.inflated_channels = if v == "auto" {
                    None
                } else {
                    Some(parse_value(key, v, "an unsigned integer or auto")?)
                }
            }
            ("model", "fiber_size") => m.fiber_size = parse_value(key, v, "an unsigned integer")?,
            ("model", "grid_method") => m.grid_method = parse_with::<GridMethod>(v)?,
            ("model", "readout") => m.readout = parse_with::<Readout>(v)?,
            ("model", "outputs") => m.outputs = parse_value(key, v, "an unsigned integer")?,
            ("model", "scales") => {
                m.scales = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|x| parse_float(key, x)).collect::<Result<_, _>>()?
                }
            }
            ("model", "neighbors") => m.neighbors = parse_value(key, v, "an unsigned integer")?,
            ("model", "length_scale") => {
                if v == "auto" {
                    self.auto_length_scale = true;
                } else {
                    self.auto_length_scale = false;
                    m.length_scale = parse_float(key, v)?;
                }
            }
            ("model", "coords_as_scalars") => m.input.coords_as_scalars = parse_bool(key, v)?,
            ("model", "coords_as_vectors") => m.input.coords_as_vectors = parse_bool(key, v)?,
            ("model", "aux_as_scalars") => m.input.aux_as_scalars = parse_bool(key, v)?,
            ("model", "aux_as_vectors") => m.input.aux_as_vectors = parse_bool(key, v)?,
            ("model", "global_frame") => m.input.global_frame = parse_bool(key, v)?,
            ("model", "scalar_channels") => m.input.scalar_channels = parse_value(key, v, "an unsigned integer")?,
            ("model", "aux_vectors") => m.input.aux_vectors = parse_value(key, v, "an unsigned integer")?,
            ("task", "kind") => t.kind = parse_with::<TaskKind>(v)?,
            ("task", "train_size") => t.train_size = parse_value(key, v, "an unsigned integer")?,
            ("task", "test_size") => t.test_size = parse_value(key, v, "an unsigned integer")?,
            ("task", "rotate_train") => t.rotate_train = parse_bool(key, v)?,
            ("task", "rotate_test") => t.rotate_test = parse_bool(key, v)?,
            ("task", "noise_level") => t.noise_level = parse_float(key, v)?,
            ("task", "points") => t.points = parse_value(key, v, "an unsigned integer")?,
            ("harness", "trials") => self.harness.trials = parse_value(key, v, "an unsigned integer")?,
            ("harness", "clouds") => self.harness.clouds = parse_value(key, v, "an unsigned integer")?,
            ("harness", "points") => self.harness.points = parse_value(key, v, "an unsigned integer")?,
            ("harness", "claim") => self.harness.claim = parse_symmetry(key, v)?,
            ("train", "epochs") => tr.epochs = parse_value(key, v, "an unsigned integer")?,
            ("train", "lr") => tr.lr = parse_float(key, v)?,
            ("train", "batch_size") => tr.batch_size = parse_value(key, v, "an unsigned integer")?,
            ("train", "warmup") => tr.warmup = parse_value(key, v, "an unsigned integer")?,
            ("train", "weight_decay") => tr.weight_decay = parse_float(key, v)?,
            ("train", "eval_every") => tr.eval_every = parse_value(key, v, "an unsigned integer")?,
            ("sampler", "steps") => s.schedule.n_steps = parse_value(key, v, "an unsigned integer")?,
            ("sampler", "sigma_min") => s.schedule.sigma_min = parse_float(key, v)?,
            ("sampler", "sigma_max") => s.schedule.sigma_max = parse_float(key, v)?,
            ("sampler", "rho") => s.schedule.rho = parse_float(key, v)?,
            ("sampler", "churn") => s.schedule.churn = parse_float(key, v)?,
            ("sampler", "samples") => s.samples = parse_value(key, v, "an unsigned integer")?,
            ("output", "dir") => self.output.dir = PathBuf::from(v),
            ("output", "name") => {
                if v.is_empty() {
                    return Err("`name` must not be empty".into());
                }
                self.output.name = v.to_string();
            }
            _ => {
                let place = if section.is_empty() { "global".to_string() } else { format!("[{section}]") };
                return Err(format!("unknown key `{key}` in {place}"));
            }
        }
        self.derive_seeds();
        Ok(())
    }

    /// All keys in canonical order, grouped by section.
    pub fn entries(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        let m = &self.model;
        let i = &m.input;
        let t = &self.task;
        let tr = &self.train;
        let s = &self.sampler.schedule;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("", vec![("seed", self.seed.to_string())]),
            (
                "model",
                vec![
                    ("regime", m.regime.to_string()),
                    ("layers", m.layers.to_string()),
                    ("channels", m.channels.to_string()),
                    ("inflated_channels", m.inflated_channels.map_or("auto".into(), |c| c.to_string())),
                    ("fiber_size", m.fiber_size.to_string()),
                    ("grid_method", m.grid_method.to_string()),
                    ("readout", m.readout.to_string()),
                    ("outputs", m.outputs.to_string()),
                    ("scales", list(&m.scales)),
                    ("neighbors", m.neighbors.to_string()),
                    (
                        "length_scale",
                        if self.auto_length_scale { "auto".into() } else { m.length_scale.to_string() },
                    ),
                    ("coords_as_scalars", i.coords_as_scalars.to_string()),
                    ("coords_as_vectors", i.coords_as_vectors.to_string()),
                    ("aux_as_scalars", i.aux_as_scalars.to_string()),
                    ("aux_as_vectors", i.aux_as_vectors.to_string()),
                    ("global_frame", i.global_frame.to_string()),
                    ("scalar_channels", i.scalar_channels.to_string()),
                    ("aux_vectors", i.aux_vectors.to_string()),
                ],
            ),
            (
                "task",
                vec![
                    ("kind", t.kind.to_string()),
                    ("train_size", t.train_size.to_string()),
                    ("test_size", t.test_size.to_string()),
                    ("rotate_train", t.rotate_train.to_string()),
                    ("rotate_test", t.rotate_test.to_string()),
                    ("noise_level", t.noise_level.to_string()),
                    ("points", t.points.to_string()),
                ],
            ),
            (
                "harness",
                vec![
                    ("trials", self.harness.trials.to_string()),
                    ("clouds", self.harness.clouds.to_string()),
                    ("points", self.harness.points.to_string()),
                    ("claim", self.harness.claim.map_or("auto".into(), |s| s.to_string())),
                ],
            ),
            (
                "train",
                vec![
                    ("epochs", tr.epochs.to_string()),
                    ("lr", tr.lr.to_string()),
                    ("batch_size", tr.batch_size.to_string()),
                    ("warmup", tr.warmup.to_string()),
                    ("weight_decay", tr.weight_decay.to_string()),
                    ("eval_every", tr.eval_every.to_string()),
                ],
            ),
            (
                "sampler",
                vec![
                    ("steps", s.n_steps.to_string()),
                    ("sigma_min", s.sigma_min.to_string()),
                    ("sigma_max", s.sigma_max.to_string()),
                    ("rho", s.rho.to_string()),
                    ("churn", s.churn.to_string()),
                    ("samples", self.sampler.samples.to_string()),
                ],
            ),
            (
                "output",
                vec![
                    ("dir", self.output.dir.display().to_string()),
                    ("name", self.output.name.clone()),
                ],
            ),
        ]
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (section, keys) in self.entries() {
            if !section.is_empty() {
                out.push_str(&format!("\n[{section}]\n"));
            }
            for (k, v) in keys {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Parses a config file body. Omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line_no, format!("malformed section header '{line}'")))?
                    .trim();
                if name.is_empty() || !SECTIONS.contains(&name) {
                    return Err(ConfigError::at(line_no, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line_no, format!("expected `key = value`, got '{line}'")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::at(line_no, "missing key before '='"));
            }
            let id = (section.clone(), key.to_string());
            if seen.contains(&id) {
                return Err(ConfigError::at(line_no, format!("duplicate key `{key}`")));
            }
            seen.push(id);
            cfg.set(&section, key, value).map_err(|m| ConfigError::at(line_no, m))?;
        }
        Ok(cfg)
    }

    /// Applies `RAPIDASH_*` overrides from `vars`. Unknown names under the
    /// prefix are rejected.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut targets = Vec::new();
        for (section, keys) in self.entries() {
            for (key, _) in keys {
                targets.push((env_name(section, key), section, key));
            }
        }
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (name, value) in vars {
            let Some((_, section, key)) = targets.iter().find(|(n, _, _)| *n == name) else {
                return Err(ConfigError::plain(format!("unknown override variable {name}")));
            };
            self.set(section, key, &value)
                .map_err(|m| ConfigError::plain(format!("{name}: {m}")))?;
        }
        Ok(())
    }
}

/// Environment variable overriding `key` in `section`.
pub fn env_name(section: &str, key: &str) -> String {
    if section.is_empty() {
        format!("{ENV_PREFIX}{}", key.to_uppercase())
    } else {
        format!("{ENV_PREFIX}{}_{}", section.to_uppercase(), key.to_uppercase())
    }
}
