use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{accuracy, instance_mean_iou, mse};
use super::{Dataset, Sample, Target, TaskKind};
use crate::autodiff::{adam_step, cosine_lr, AdamConfig, AdamState, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{SphereGrid, Vec3};
use crate::layers::Forward;
use crate::model::{Model, Prepared};
use crate::pointcloud::{build_neighbors, mean_neighbor_distance, NeighborMode};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub weight_decay: f64,
    /// Test-set evaluation period in epochs; 0 evaluates after the last
    /// epoch only.
    pub eval_every: usize,
    /// Seeds the shuffling order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-4,
            batch_size: 8,
            warmup: 20,
            weight_decay: 1e-8,
            eval_every: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<MetricRow>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,split,metric,value";

    fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        });
    }

    /// The latest value recorded for `split` and `metric`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// All values of `split`/`metric` in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value).expect("write to string");
        }
        s
    }

    /// Appends the rows to `path`, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let body = self.to_csv();
        let body = if fresh { body.as_str() } else { body.split_once('\n').map_or("", |(_, b)| b) };
        f.write_all(body.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// The task's headline metric (see [`TaskKind::metric_name`]).
    pub metric: f64,
}

/// Mean k-nearest-neighbor distance over the samples; a natural length
/// unit for the kernel inputs.
pub fn fit_length_scale(samples: &[Sample], neighbors: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to fit a length scale".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let g = build_neighbors(&s.cloud, NeighborMode::Knn(neighbors))?;
        total += mean_neighbor_distance(&s.cloud, &g);
    }
    let scale = total / samples.len() as f64;
    if scale > 0.0 {
        Ok(scale)
    } else {
        Err(Error::Precondition("degenerate clouds: zero neighbor distance".into()))
    }
}

fn target_constant(target: &Target, classes: usize) -> Tensor {
    match target {
        Target::Global(v) => Tensor::new(vec![1, v.len()], v.clone()).expect("target shape"),
        Target::Vectors(v) => {
            Tensor::new(vec![v.len(), 3], v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()).expect("target shape")
        }
        Target::Classes(c) => {
            let mut t = Tensor::zeros(&[c.len(), classes]);
            for (i, &k) in c.iter().enumerate() {
                t.data_mut()[i * classes + k] = 1.0;
            }
            t
        }
    }
}

/// Loss of one prepared sample on the tape: MSE for regression and vector
/// targets, cross-entropy for classes.
fn sample_loss(fw: &mut Forward, out: Var, target: &Target, classes: usize) -> Result<Var> {
    let t = fw.constant(target_constant(target, classes));
    if fw.tape.shape(out) != fw.tape.shape(t) {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("model output {:?}, target {:?}", fw.tape.shape(out), fw.tape.shape(t)),
        });
    }
    match target {
        Target::Global(_) | Target::Vectors(_) => {
            let d = fw.tape.sub(out, t)?;
            let sq = fw.tape.powi(d, 2)?;
            Ok(fw.tape.mean_all(sq))
        }
        Target::Classes(c) => {
            let lp = fw.tape.log_softmax(out)?;
            let picked = fw.tape.mul(lp, t)?;
            let s = fw.tape.sum_all(picked);
            Ok(fw.tape.scale(s, -1.0 / c.len() as f64))
        }
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn to_vecs(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn evaluate_prepared(
    model: &Model,
    kind: TaskKind,
    classes: usize,
    preps: &[Prepared],
    samples: &[Sample],
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples to evaluate".into()));
    }
    let mut loss = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut instances = Vec::new();
    let (mut pred_all, mut truth_all) = (Vec::new(), Vec::new());
    for (prep, s) in preps.iter().zip(samples) {
        let mut fw = Forward::new(&model.params, false);
        let out = model.forward_prepared(&mut fw, prep)?;
        let l = sample_loss(&mut fw, out, &s.target, classes)?;
        loss += fw.tape.value(l).item();
        let value = fw.tape.value(out);
        match &s.target {
            Target::Global(t) => {
                sq += value.data().iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                count += t.len();
            }
            Target::Vectors(t) => {
                sq += mse(&to_vecs(value), t)? * (3 * t.len()) as f64;
                count += 3 * t.len();
            }
            Target::Classes(t) => {
                let p = argmax_rows(value);
                pred_all.extend_from_slice(&p);
                truth_all.extend_from_slice(t);
                instances.push((p, t.clone()));
            }
        }
    }
    let metric = match kind {
        TaskKind::PartSegmentation => instance_mean_iou(&instances, classes)?,
        TaskKind::SymmetricDisambiguation => accuracy(&pred_all, &truth_all)?,
        _ => sq / count.max(1) as f64,
    };
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        metric,
    })
}

fn prepare_all(model: &Model, samples: &[Sample], grid: &SphereGrid) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| model.prepare(&s.cloud, grid)).collect()
}

/// Mean loss and headline metric of `model` on `samples` with the model's
/// own grid. `classes` is the dataset's output count.
pub fn evaluate(model: &Model, kind: TaskKind, classes: usize, samples: &[Sample]) -> Result<Evaluation> {
    let grid = model.default_grid()?;
    let preps = prepare_all(model, samples, &grid)?;
    evaluate_prepared(model, kind, classes, &preps, samples)
}

/// Non-finite activations mid-training mean the parameters blew up.
fn as_divergence(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Adam with linear warmup and cosine decay. Records the mean training
/// loss every epoch and the test loss and metric every `eval_every`
/// epochs and after the last one.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<History> {
    if data.train.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let grid = model.default_grid()?;
    let train_preps = prepare_all(model, &data.train, &grid)?;
    let test_preps = prepare_all(model, &data.test, &grid)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let batch = cfg.batch_size.max(1);
    let mut history = History::default();
    let metric_name = data.kind.metric_name();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr * cosine_lr(epoch + 1, cfg.epochs + 1, cfg.warmup);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut fw = Forward::new(&model.params, true);
            let mut total: Option<Var> = None;
            for &i in chunk {
                let out = model.forward_prepared(&mut fw, &train_preps[i]).map_err(as_divergence(epoch))?;
                let l = sample_loss(&mut fw, out, &data.train[i].target, data.outputs)?;
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
        history.push(epoch, "train", "loss", epoch_loss / data.train.len() as f64);
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !data.test.is_empty() && (last || due) {
            let ev = evaluate_prepared(model, data.kind, data.outputs, &test_preps, &data.test)
                .map_err(as_divergence(epoch))?;
            history.push(epoch, "test", "loss", ev.loss);
            history.push(epoch, "test", metric_name, ev.metric);
        }
    }
    Ok(history)
}
