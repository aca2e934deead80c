//! RMSProp.
//!
//! v ← decay·v + (1−decay)·g²
//! p ← p − lr·g / (√v + ε)

use super::{Result, Tensor, TensorError};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub mean_square: Vec<Tensor>,
    pub decay: f64,
    pub epsilon: f64,
}

impl OptimState {
    /// Zeroed state mirroring `params`.
    pub fn for_params<'a, I>(params: I) -> Self
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        OptimState {
            mean_square: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: DEFAULT_DECAY,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Applies one RMSProp update. Every parameter must carry a gradient.
pub fn rmsprop_step(params: &mut [&mut Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Contract(format!("learning rate {lr} must be finite and non-negative")));
    }
    if !(state.decay > 0.0 && state.decay < 1.0) || state.epsilon <= 0.0 {
        return Err(TensorError::Contract(format!(
            "rmsprop decay {} / epsilon {} out of range",
            state.decay, state.epsilon
        )));
    }
    if params.len() != state.mean_square.len() {
        return Err(TensorError::Contract(format!(
            "{} parameters but optimizer state for {}",
            params.len(),
            state.mean_square.len()
        )));
    }
    for (i, (p, v)) in params.iter().zip(&state.mean_square).enumerate() {
        if p.shape() != v.shape() {
            return Err(TensorError::Contract(format!(
                "parameter {i} has shape {:?}, state has {:?}",
                p.shape(),
                v.shape()
            )));
        }
        if p.grad().is_none() {
            return Err(TensorError::Contract(format!("parameter {i} has no gradient")));
        }
    }
    let (decay, eps) = (state.decay, state.epsilon);
    for (p, v) in params.iter_mut().zip(state.mean_square.iter_mut()) {
        let grad = p.grad().expect("checked above").to_vec();
        for ((w, m), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(&grad) {
            *m = decay * *m + (1.0 - decay) * g * g;
            *w -= lr * g / (m.sqrt() + eps);
        }
    }
    Ok(())
}
