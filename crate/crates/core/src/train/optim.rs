//! AdamW with decoupled weight decay.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mixer::{model_layout, ModelWeights};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every parameter, in parameter-name order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Whether each parameter receives weight decay.
    pub decay: Vec<bool>,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let layout = model_layout(config)?;
        let mut m = Vec::new();
        let mut decay = Vec::new();
        layout.for_each(|_, spec| {
            m.push(Tensor::zeros(&spec.shape));
            decay.push(spec.decays());
        });
        Ok(AdamState {
            step: 0,
            v: m.clone(),
            m,
            decay,
        })
    }
}

/// One AdamW update of a flat parameter slice. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [Real],
    grad: &[Real],
    m: &mut [Real],
    v: &mut [Real],
    step: u64,
    lr: f64,
    weight_decay: f64,
    decay: bool,
) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        let mut t = theta[i] as f64;
        if decay {
            t -= lr * weight_decay * t;
        }
        let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * g * g;
        m[i] = mi as Real;
        v[i] = vi as Real;
        t -= lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
        theta[i] = t as Real;
    }
}

/// Apply one AdamW step to every parameter. Gradients are checked for
/// non-finite values before anything is modified.
pub fn adamw_step(
    weights: &mut ModelWeights<Tensor>,
    grads: &ModelWeights<Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let grads_flat = grads.leaves();
    if grads_flat.len() != state.m.len() {
        return Err(Error::shape("adamw_step", &[grads_flat.len()], &[state.m.len()]));
    }
    let mut bad = None;
    grads.for_each(|name, g| {
        if bad.is_none() && !g.is_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFiniteGradient(name));
    }
    let mut shape_err = None;
    let mut k = 0;
    weights.for_each_mut(|_, t| {
        if t.shape() != grads_flat[k].shape() && shape_err.is_none() {
            shape_err = Some(Error::shape("adamw_step", t.shape(), grads_flat[k].shape()));
        }
        k += 1;
    });
    if let Some(e) = shape_err {
        return Err(e);
    }

    state.step += 1;
    let step = state.step;
    let mut k = 0;
    weights.for_each_mut(|_, t| {
        adamw_update(
            t.data_mut(),
            grads_flat[k].data(),
            state.m[k].data_mut(),
            state.v[k].data_mut(),
            step,
            lr,
            weight_decay,
            state.decay[k],
        );
        k += 1;
    });
    Ok(())
}
