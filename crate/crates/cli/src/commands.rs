use std::fs;
use std::path::{Path, PathBuf};

use rapidash::autodiff::checkpoint;
use rapidash::geom3d::Vec3;
use rapidash::harness::{audit, random_clouds, reports_to_csv, Audit};
use rapidash::model::{build, Model, ModelConfig, Readout};
use rapidash::pointcloud::PointCloud;
use rapidash::tasks::{
    edm_precondition, evaluate, fit_length_scale, generate, karras_sample, min_chamfer_to_set, noise_samples,
    rotate_samples, shape_dataset, train, train_denoiser, Dataset, Sample, Target, TaskKind, TaskSpec,
};

use crate::config::{sub_seed, ConfigError, ExperimentConfig};

/// Rotation stream for the rotated copy of the test set.
const ROTATED_TEST_STREAM: u64 = 7;
pub const RESULTS_HEADER: &str = "variation,type,flags,effective_equivariance,metric_aligned,metric_rotated";
pub const GRID_HEADER: &str =
    "variation,type,flags,effective_equivariance,fraction,metric_aligned,metric_rotated";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("audit failed: {0}")]
    AuditFailed(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::AuditFailed(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<rapidash::Error> for CliError {
    fn from(e: rapidash::Error) -> Self {
        match e {
            rapidash::Error::Config(_) | rapidash::Error::Parse(_) => CliError::Config(e.to_string()),
            rapidash::Error::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Reads `path`, applies `RAPIDASH_*` environment overrides, then the
/// command-line seed and output directory.
pub fn load_config<I>(path: &Path, env: I, seed: Option<u64>, out: Option<&Path>) -> CliResult<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.apply_env(env)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.derive_seeds();
    }
    if let Some(o) = out {
        cfg.output.dir = o.to_path_buf();
    }
    Ok(cfg)
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variation: String,
    pub base: &'static str,
    pub flags: String,
    pub effective: String,
    pub fraction: f64,
    pub metric_aligned: f64,
    pub metric_rotated: f64,
}

impl SummaryRow {
    fn new(cfg: &ExperimentConfig, model: &ModelConfig, fraction: f64, aligned: f64, rotated: f64) -> Self {
        let flags = model.input.flag_names();
        Self {
            variation: cfg.output.name.clone(),
            base: if model.regime.has_fiber() { "R3xS2" } else { "R3" },
            flags: if flags.is_empty() { "-".into() } else { flags.join("+") },
            effective: model.effective_equivariance().to_string(),
            fraction,
            metric_aligned: aligned,
            metric_rotated: rotated,
        }
    }

    pub fn results_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variation, self.base, self.flags, self.effective, self.metric_aligned, self.metric_rotated
        )
    }

    pub fn grid_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variation,
            self.base,
            self.flags,
            self.effective,
            self.fraction,
            self.metric_aligned,
            self.metric_rotated
        )
    }
}

fn append_line(path: &Path, header: &str, line: &str) -> CliResult<()> {
    use std::io::Write;
    let new = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

fn wrap(clouds: &[PointCloud]) -> Vec<Sample> {
    clouds
        .iter()
        .map(|c| Sample { cloud: c.clone(), target: Target::Global(Vec::new()) })
        .collect()
}

/// Model config with a fitted length scale when the config asks for one.
fn resolve_model(cfg: &ExperimentConfig, fit_on: &[Sample]) -> CliResult<ModelConfig> {
    let mut m = cfg.model.clone();
    if cfg.auto_length_scale {
        m.length_scale = fit_length_scale(fit_on, m.neighbors.max(1))?;
    }
    m.validate()?;
    Ok(m)
}

/// Aligned test set, its rotated copy, and the training dataset as the
/// task spec describes it.
struct Split {
    data: Dataset,
    aligned: Vec<Sample>,
    rotated: Vec<Sample>,
}

fn make_split(task: &TaskSpec) -> CliResult<Split> {
    if task.kind == TaskKind::DiffusionGen {
        return Err(CliError::Config("task diffusion_gen is run with the `sample` command".into()));
    }
    let mut data = generate(&TaskSpec { rotate_test: false, ..task.clone() })?;
    let aligned = data.test.clone();
    let rotated = rotate_samples(&aligned, sub_seed(task.seed, ROTATED_TEST_STREAM));
    if task.rotate_test {
        data.test = rotated.clone();
    }
    Ok(Split { data, aligned, rotated })
}

fn check_outputs(model: &ModelConfig, data: &Dataset) -> CliResult<()> {
    if model.readout != Readout::Vector && model.outputs != data.outputs {
        return Err(CliError::Config(format!(
            "model.outputs = {} but task {} has {} outputs",
            model.outputs, data.kind, data.outputs
        )));
    }
    Ok(())
}

fn build_for(cfg: &ExperimentConfig, split: &Split) -> CliResult<Model> {
    let mc = resolve_model(cfg, &split.data.train)?;
    check_outputs(&mc, &split.data)?;
    Ok(build(&mc)?)
}

fn aligned_and_rotated(model: &Model, split: &Split) -> CliResult<(f64, f64)> {
    let kind = split.data.kind;
    let outputs = split.data.outputs;
    let a = evaluate(model, kind, outputs, &split.aligned)?;
    let r = evaluate(model, kind, outputs, &split.rotated)?;
    Ok((a.metric, r.metric))
}

pub struct AuditOutcome {
    pub audit: Audit,
    pub csv_path: PathBuf,
}

pub fn cmd_audit(cfg: &ExperimentConfig) -> CliResult<AuditOutcome> {
    let h = &cfg.harness;
    let input = &cfg.model.input;
    let seed = cfg.harness_seed();
    let clouds = random_clouds(h.clouds, h.points, input.scalar_channels, input.aux_vectors, seed);
    let model = build(&resolve_model(cfg, &wrap(&clouds))?)?;
    let mut result = audit(&model, &clouds, h.trials, seed)?;
    if let Some(claim) = h.claim {
        result.claimed = claim;
    }
    fs::create_dir_all(&cfg.output.dir)?;
    let csv_path = cfg.output.dir.join("audit.csv");
    fs::write(&csv_path, reports_to_csv(&result.reports))?;
    let verdict = if result.passed() { "PASS" } else { "FAIL" };
    println!(
        "{}: claimed {} measured {} {verdict}",
        cfg.output.name, result.claimed, result.measured
    );
    for r in &result.reports {
        println!("  {} ({}) max {:.3e} mean {:.3e}", r.group, r.mode, r.max, r.mean);
    }
    if !result.passed() {
        return Err(CliError::AuditFailed(format!(
            "claimed {} but measured {}{}",
            result.claimed,
            result.measured,
            if result.ambiguous.is_empty() {
                String::new()
            } else {
                format!(" (ambiguous: {:?})", result.ambiguous)
            }
        )));
    }
    Ok(AuditOutcome { audit: result, csv_path })
}

/// Trains on `fraction` of the training set and writes the checkpoint and
/// metrics into the configured output directory.
fn run_training(cfg: &ExperimentConfig, fraction: f64) -> CliResult<SummaryRow> {
    let mut split = make_split(&cfg.task)?;
    split.data = split.data.with_train_fraction(fraction);
    let mut model = build_for(cfg, &split)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let history = train(&mut model, &split.data, &cfg.train).map_err(|e| match e {
        rapidash::Error::Diverged { .. } => CliError::Diverged(format!("{}: {e}", cfg.output.name)),
        other => other.into(),
    })?;
    fs::write(cfg.output.dir.join("metrics.csv"), history.to_csv())?;
    checkpoint::save(&model.params, &cfg.output.dir.join(CHECKPOINT_FILE))?;
    let (a, r) = aligned_and_rotated(&model, &split)?;
    Ok(SummaryRow::new(cfg, &model.config, fraction, a, r))
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<SummaryRow> {
    let row = run_training(cfg, 1.0)?;
    append_line(&cfg.output.dir.join("results.csv"), RESULTS_HEADER, &row.results_line())?;
    println!("{RESULTS_HEADER}\n{}", row.results_line());
    Ok(row)
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: Option<&Path>) -> CliResult<SummaryRow> {
    let split = make_split(&cfg.task)?;
    let mut model = build_for(cfg, &split)?;
    let path = checkpoint_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(CHECKPOINT_FILE));
    checkpoint::load_into(&mut model.params, &path)?;
    let (a, r) = aligned_and_rotated(&model, &split)?;
    let row = SummaryRow::new(cfg, &model.config, 1.0, a, r);
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join("eval.csv"), format!("{RESULTS_HEADER}\n{}\n", row.results_line()))?;
    println!("{RESULTS_HEADER}\n{}", row.results_line());
    Ok(row)
}

/// Trains every config at every fraction as independent concurrent jobs,
/// each in its own subdirectory of `out`.
pub fn cmd_grid(configs: &[ExperimentConfig], fractions: &[f64], out: &Path) -> CliResult<Vec<SummaryRow>> {
    if configs.is_empty() {
        return Err(CliError::Usage("grid needs at least one --config".into()));
    }
    let fractions = if fractions.is_empty() { vec![1.0] } else { fractions.to_vec() };
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("fraction {f} is outside (0, 1]")));
    }
    let mut jobs = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        for &f in &fractions {
            let mut job = c.clone();
            job.output.dir = out.join(format!("{i:02}_{}_{:03}", sanitize(&c.output.name), (f * 100.0).round()));
            jobs.push((job, f));
        }
    }
    let results: Vec<CliResult<SummaryRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|(job, f)| s.spawn(move || run_training(job, *f))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("grid job panicked".into()))))
            .collect()
    });
    let rows: Vec<SummaryRow> = results.into_iter().collect::<CliResult<_>>()?;
    fs::create_dir_all(out)?;
    let mut csv = format!("{GRID_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.grid_line());
        csv.push('\n');
    }
    fs::write(out.join("grid.csv"), &csv)?;
    let ranking = ranking(&rows, configs[0].task.kind);
    fs::write(out.join("ranking.txt"), &ranking)?;
    print!("{csv}\n{ranking}");
    Ok(rows)
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Rows ordered by rotated metric, then aligned, best first.
pub fn ranking(rows: &[SummaryRow], kind: TaskKind) -> String {
    let higher_better = matches!(kind, TaskKind::PartSegmentation | TaskKind::SymmetricDisambiguation);
    let mut order: Vec<&SummaryRow> = rows.iter().collect();
    order.sort_by(|a, b| {
        let key = |r: &SummaryRow| (r.metric_rotated, r.metric_aligned);
        let (ka, kb) = (key(a), key(b));
        let c = ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal);
        if higher_better {
            c.reverse()
        } else {
            c
        }
    });
    let mut out = format!("ranking by {} (rotated, then aligned)\n", kind.metric_name());
    for (i, r) in order.iter().enumerate() {
        out.push_str(&format!(
            "{}. {} ({:.0}%) aligned {:.4} rotated {:.4}\n",
            i + 1,
            r.variation,
            r.fraction * 100.0,
            r.metric_aligned,
            r.metric_rotated
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub chamfer_generated: f64,
    pub chamfer_noise: f64,
}

/// Trains the denoiser on the toy shape set, then draws samples and
/// compares them with pure-noise clouds by Chamfer distance to the set.
pub fn cmd_sample(cfg: &ExperimentConfig) -> CliResult<SampleSummary> {
    if cfg.task.kind != TaskKind::DiffusionGen {
        return Err(CliError::Config(format!(
            "`sample` needs task.kind = diffusion_gen, got {}",
            cfg.task.kind
        )));
    }
    let points = if cfg.task.points == 0 { 64 } else { cfg.task.points };
    let data = shape_dataset(cfg.task.train_size, points, cfg.task.seed)?;
    let scaled: Vec<PointCloud> = data
        .shapes
        .iter()
        .map(|s| PointCloud::from_positions(s.iter().map(|p| p / data.sigma_data).collect()))
        .collect();
    let mut model = build(&resolve_model(cfg, &wrap(&scaled))?)?;
    fs::create_dir_all(&cfg.output.dir)?;
    let trained = train_denoiser(&mut model, &data, &cfg.train)?;
    let mut losses = String::from(rapidash::tasks::History::CSV_HEADER);
    losses.push('\n');
    for (e, l) in trained.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{e},train,loss,{l}\n"));
    }
    fs::write(cfg.output.dir.join("metrics.csv"), losses)?;
    checkpoint::save(&model.params, &cfg.output.dir.join(CHECKPOINT_FILE))?;

    let grid = model.default_grid()?;
    let schedule = rapidash::tasks::DiffusionSchedule { sigma_data: data.sigma_data, ..cfg.sampler.schedule.clone() };
    schedule.validate()?;
    let n = cfg.sampler.samples.max(1);
    let seed = cfg.sampler_seed();
    let mut csv = String::from("sample,x,y,z\n");
    let mut generated: Vec<Vec<Vec3>> = Vec::with_capacity(n);
    for i in 0..n {
        let cloud = karras_sample(
            |x: &[Vec3], s| edm_precondition(&model, &grid, x, s, data.sigma_data),
            &schedule,
            points,
            sub_seed(seed, i as u64),
        )?;
        for p in &cloud.positions {
            csv.push_str(&format!("{i},{},{},{}\n", p.x, p.y, p.z));
        }
        generated.push(cloud.positions);
    }
    fs::write(cfg.output.dir.join("samples.csv"), csv)?;
    let noise = noise_samples(n, points, data.sigma_data, sub_seed(seed, u64::MAX));
    let mean = |set: &[Vec<Vec3>]| set.iter().map(|g| min_chamfer_to_set(g, &data.shapes)).sum::<f64>() / n as f64;
    let summary = SampleSummary { chamfer_generated: mean(&generated), chamfer_noise: mean(&noise) };
    let text = format!(
        "chamfer_generated,chamfer_noise,ratio\n{},{},{}\n",
        summary.chamfer_generated,
        summary.chamfer_noise,
        summary.chamfer_generated / summary.chamfer_noise
    );
    fs::write(cfg.output.dir.join("sample_summary.csv"), &text)?;
    print!("{text}");
    Ok(summary)
}
