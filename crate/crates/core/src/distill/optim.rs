use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name,
/// so a parameter is only touched when a gradient for it is supplied.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name.as_str()) else {
                continue;
            };
            if g.numel() != p.numel() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    ReduceOnPlateau,
}

pub fn cosine_lr(lr0: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 || step >= max_steps {
        return 0.0;
    }
    let c = (std::f64::consts::PI * step as f64 / max_steps as f64).cos();
    (lr0 * 0.5 * (1.0 + c)).max(0.0)
}

/// Learning-rate state for either schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub kind: Schedule,
    pub lr0: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
    pub best: f64,
    pub bad_evals: usize,
}

impl ScheduleState {
    pub fn new(kind: Schedule, lr0: f64, max_steps: usize, patience: usize, factor: f64) -> Self {
        Self {
            kind,
            lr0,
            lr: lr0,
            max_steps,
            patience,
            factor,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_evals: 0,
        }
    }

    /// Learning rate to use at optimizer step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.kind {
            Schedule::Cosine => cosine_lr(self.lr0, step, self.max_steps),
            Schedule::ReduceOnPlateau => self.lr,
        }
    }
}

/// What the schedule sees after an evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub step: usize,
    pub val_loss: Option<f64>,
}

/// Advances the schedule and returns the learning rate now in force.
/// Plateau mode multiplies by `factor` once the validation loss has failed
/// to improve on `patience` consecutive evaluations and then one more.
pub fn schedule_lr(state: &mut ScheduleState, metrics: EpochMetrics) -> f64 {
    match state.kind {
        Schedule::Cosine => cosine_lr(state.lr0, metrics.step, state.max_steps),
        Schedule::ReduceOnPlateau => {
            if let Some(loss) = metrics.val_loss {
                if loss < state.best * (1.0 - state.threshold) {
                    state.best = loss;
                    state.bad_evals = 0;
                } else {
                    state.bad_evals += 1;
                    if state.bad_evals > state.patience {
                        state.lr *= state.factor;
                        state.bad_evals = 0;
                    }
                }
            }
            state.lr
        }
    }
}
