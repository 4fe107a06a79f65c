//! Adaptive-moment optimizer with per-group schedules, global-norm gradient
//! clipping, and NaN step skipping.

use super::params::{Group, ParamStore};
use super::tensor::{sc, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr0: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr0: f64, lr_end: f64, total_steps: usize) -> Self {
        AdamConfig {
            lr0,
            lr_end,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// lr(step) = lr0 * (lr_end/lr0)^(step/total); holds at lr_end afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr0;
        }
        let t = (step as f64 / self.total_steps as f64).min(1.0);
        self.lr0 * (self.lr_end / self.lr0).powf(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNaN,
}

pub struct Adam {
    groups: Vec<(Group, AdamConfig)>,
    pub step: usize,
    pub skipped: usize,
    pub clip_norm: f64,
}

impl Adam {
    pub fn new(groups: Vec<(Group, AdamConfig)>) -> Self {
        Adam {
            groups,
            step: 0,
            skipped: 0,
            clip_norm: 10.0,
        }
    }

    pub fn config_for(&self, group: Group) -> &AdamConfig {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, c)| c)
            .unwrap_or_else(|| panic!("no optimizer config for group {group:?}"))
    }

    /// Applies one update from the gradients in the store and clears them.
    /// Any non-finite gradient entry skips the whole step (moments and step
    /// count untouched) so a single bad batch cannot poison the moments.
    pub fn apply<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> StepOutcome {
        let mut sq_norm = 0.0f64;
        let mut bad = false;
        for p in &store.params {
            let n = p.grad.sq_norm();
            if !n.is_finite() {
                bad = true;
                break;
            }
            sq_norm += n;
        }
        if bad || !sq_norm.is_finite() {
            self.skipped += 1;
            store.zero_grads();
            return StepOutcome::SkippedNaN;
        }
        let norm = sq_norm.sqrt();
        let clip_scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };

        let t = self.step + 1;
        for p in &mut store.params {
            let cfg = self
                .groups
                .iter()
                .find(|(g, _)| *g == p.group)
                .map(|(_, c)| *c)
                .unwrap_or_else(|| panic!("no optimizer config for group {:?}", p.group));
            let lr = cfg.lr_at(self.step);
            let b1 = sc::<T>(cfg.beta1);
            let b2 = sc::<T>(cfg.beta2);
            let one = T::one();
            let corr1 = 1.0 - cfg.beta1.powi(t as i32);
            let corr2 = 1.0 - cfg.beta2.powi(t as i32);
            let denom_eps = sc::<T>(cfg.eps);
            let lr_t = sc::<T>(lr);
            let c1 = sc::<T>(1.0 / corr1);
            let c2 = sc::<T>(1.0 / corr2);
            let ks = sc::<T>(clip_scale);
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] * ks;
                p.m.data[i] = b1 * p.m.data[i] + (one - b1) * g;
                p.v.data[i] = b2 * p.v.data[i] + (one - b2) * g * g;
                let mhat = p.m.data[i] * c1;
                let vhat = p.v.data[i] * c2;
                p.value.data[i] -= lr_t * mhat / (vhat.sqrt() + denom_eps);
                if cfg.weight_decay > 0.0 {
                    let decay = lr_t * sc::<T>(cfg.weight_decay) * p.value.data[i];
                    p.value.data[i] -= decay;
                }
            }
        }
        self.step += 1;
        store.zero_grads();
        StepOutcome::Applied
    }
}
