//! AdamW with decoupled weight decay.
//!
//! ```text
//! theta <- theta - lr * wd * theta
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
//! ```

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one update from the gradients held in `store`. All gradients are
/// checked before anything is modified; a non-finite entry aborts the step.
pub fn adamw_step(store: &mut ParamStore, cfg: &AdamWConfig) -> Result<(), NnError> {
    if let Some(p) = store.params().iter().find(|p| !p.grad.is_finite()) {
        return Err(NnError::NonFiniteGradient(p.name.clone()));
    }
    store.bump_step();
    let t = store.step() as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for p in store.params_mut() {
        let g = p.grad.data().to_vec();
        let w = p.value.data_mut();
        for k in 0..w.len() {
            p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * g[k];
            p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = p.m[k] / bc1;
            let v_hat = p.v[k] / bc2;
            w[k] = w[k] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Learning-rate multiplier over a run of `total` optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to `final_factor` of the base rate.
    Cosine {
        warmup_steps: u64,
        final_factor: f64,
    },
}

impl LrSchedule {
    pub fn factor(&self, step: u64, total: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine {
                warmup_steps,
                final_factor,
            } => {
                if step < warmup_steps {
                    return (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let x = ((step - warmup_steps) as f64 / span).min(1.0);
                final_factor + (1.0 - final_factor) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .params()
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for p in store.params_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
