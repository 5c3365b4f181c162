//! AdamW with decoupled weight decay, plus the stepped learning-rate decay.
//!
//! The weight decay multiplies every parameter by `1 - lr * wd` before the
//! Adam update (decay is decoupled from the moment estimates, not folded into
//! the gradient). Decay applies uniformly to all tensors — weights, biases,
//! and prototypes — which keeps the update rule free of special cases.

use crate::net::{Gradients, ModelParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHyper {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.01
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be finite and positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be finite and positive, got {}", self.epsilon)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// First/second moment estimates per tensor plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = (0..params.tensor_count()).map(|t| vec![0.0; params.tensor(t).len()]).collect();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One AdamW update over every tensor. `lr` is the already-scheduled rate for
/// this step. Non-finite gradients or parameters abort with an error naming
/// the offending tensor and element.
pub fn adamw_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    grads: &Gradients,
    hyper: &OptimizerHyper,
    lr: f64,
) -> Result<()> {
    hyper.validate()?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("scheduled learning rate must be finite and >= 0, got {lr}")));
    }
    if grads.tensor_count() != params.tensor_count() {
        return Err(Error::InvalidState(format!(
            "gradient has {} tensors, params have {}",
            grads.tensor_count(),
            params.tensor_count()
        )));
    }

    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    let decay = 1.0 - lr * hyper.weight_decay;

    for t in 0..params.tensor_count() {
        let name = params.tensor_name(t);
        let g = grads.tensor(t);
        let p = params.tensor_mut(t);
        if g.len() != p.len() {
            return Err(Error::InvalidState(format!(
                "gradient tensor {name} has {} elements, params have {}",
                g.len(),
                p.len()
            )));
        }
        let m = &mut state.m[t];
        let v = &mut state.v[t];
        for i in 0..p.len() {
            let gi = g[i];
            if !gi.is_finite() {
                return Err(Error::NonFinite(format!("{name} gradient at element {i}")));
            }
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
            if !p[i].is_finite() {
                return Err(Error::NonFinite(format!("{name} parameter at element {i} after update")));
            }
        }
    }
    Ok(())
}

/// Stepped decay: the rate halves once per `half_life` epochs.
pub fn lr_schedule(epoch: usize, initial: f64, half_life: usize) -> f64 {
    assert!(half_life >= 1, "lr half_life must be >= 1");
    initial * 0.5f64.powi((epoch / half_life) as i32)
}
