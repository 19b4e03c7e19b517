//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers, one per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((_, name, t), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.len() != t.numel() || v.len() != t.numel() {
                return Err(Error::Config(format!(
                    "optimizer moment size mismatch for {name}: {} vs {}",
                    m.len(),
                    t.numel()
                )));
            }
        }
        Ok(())
    }
}

/// One update: `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. `grads` is indexed by
/// parameter; a missing entry counts as a zero gradient.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    state.check(store)?;
    if grads.len() != store.len() {
        return Err(Error::Config(format!(
            "got {} gradient slots for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for ((_, name, t), g) in store.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != t.numel() {
                return Err(Error::Config(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    t.numel()
                )));
            }
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let decay = 1.0 - lr * c.weight_decay;
    for ((t, g), (m, v)) in store
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = t.data_mut();
        let update = |x: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *x = *x * decay - lr * (mhat / (vhat.sqrt() + c.eps));
        };
        match g {
            Some(g) => {
                for (((x, m), v), &g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g)
                {
                    update(x, m, v, g);
                }
            }
            None => {
                for ((x, m), v) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    update(x, m, v, 0.0);
                }
            }
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero, in update
/// steps. Step `k` (1-based) is the `k`-th optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn new(
        base_lr: f64,
        warmup_epochs: usize,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if warmup_epochs > total_epochs {
            return Err(Error::Config(format!(
                "warmup epochs ({warmup_epochs}) exceed total epochs ({total_epochs})"
            )));
        }
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {base_lr}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// `base·k/W` for `k ≤ W`, then `base·½(1 + cos(π(k−W)/(S−W)))`,
    /// reaching exactly 0 at `k = S`. Steps past `S` stay at 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, s) = (self.warmup_steps(), self.total_steps());
        if step >= s {
            return if s == w && step == s {
                self.base_lr
            } else {
                0.0
            };
        }
        if step <= w {
            if w == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / w as f64;
        }
        let progress = (step - w) as f64 / (s - w) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn lr_at(step: usize, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}
