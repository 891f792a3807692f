use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
            v: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
        }
    }
}

/// One Adam update with decoupled weight decay (`p -= lr·wd·p` before the
/// moment step). `lr` overrides `config.lr` so schedules can scale it.
/// Parameters absent from `grads` get a zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) {
    if state.m.len() != store.len() {
        *state = AdamState::new(store);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let mut dense: Vec<Option<&[f64]>> = vec![None; store.len()];
    for (id, g) in grads {
        dense[id.0] = Some(g.data());
    }
    for id in store.ids().collect::<Vec<_>>() {
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            let g = dense[id.0].map_or(0.0, |g| g[i]);
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * config.weight_decay * p[i];
            p[i] -= lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
}

/// Learning-rate multiplier: linear warmup from 0 to 1 over `warmup`
/// epochs, then half-cosine decay reaching 0 at `total`.
pub fn cosine_lr(epoch: usize, total: usize, warmup: usize) -> f64 {
    if epoch < warmup {
        return epoch as f64 / warmup as f64;
    }
    if total <= warmup {
        return 1.0;
    }
    let progress = ((epoch - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(values));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = store_with(vec![1.0, -2.0, 3.5]);
        let before = s.get(id).clone();
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            adam_step(&mut s, &[(id, Tensor::zeros(&[3]))], &mut st, 1e-3, &cfg);
        }
        assert_eq!(s.get(id), &before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let (mut s, id) = store_with(vec![0.0]);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            eps: 0.0,
            ..AdamConfig::default()
        };
        let lr = 1e-3;
        let mut prev = 0.0;
        for step in 0..200 {
            adam_step(&mut s, &[(id, Tensor::from_vec(vec![0.7]))], &mut st, lr, &cfg);
            let now = s.get(id).data()[0];
            // Bias correction makes every step exactly lr for a constant gradient.
            assert!(((prev - now) - lr).abs() < 1e-12, "step {step}: {}", prev - now);
            prev = now;
        }
    }

    #[test]
    fn decoupled_decay_term() {
        let (mut s, id) = store_with(vec![2.0]);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        let lr = 1e-4;
        adam_step(&mut s, &[(id, Tensor::zeros(&[1]))], &mut st, lr, &cfg);
        let decay = 2.0 - s.get(id).data()[0];
        assert!((decay - lr * 1e-8 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 20), 0.0);
        assert_eq!(cosine_lr(10, 100, 20), 0.5);
        assert_eq!(cosine_lr(20, 100, 20), 1.0);
        assert!(cosine_lr(100, 100, 20).abs() < 1e-12);
        assert!((cosine_lr(60, 100, 20) - 0.5).abs() < 1e-12);
    }
}
