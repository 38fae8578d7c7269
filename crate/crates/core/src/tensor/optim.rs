//! AdamW with decoupled weight decay.

use super::DiffTensor;
use crate::error::{KbError, Result};

pub const ADAMW_BETA1: f64 = 0.9;
pub const ADAMW_BETA2: f64 = 0.999;
pub const ADAMW_EPS: f64 = 1e-8;

/// First/second-moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[DiffTensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over `params` from their populated gradient slots.
/// Gradients are zeroed afterwards.
pub fn adamw_step(params: &mut [DiffTensor], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(KbError::InvalidArgument(format!(
            "optimizer state covers {} tensors, got {} params",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(KbError::InvalidArgument(format!(
                "optimizer state {i} has {} elements, param has {}",
                state.m[i].len(),
                p.numel()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAMW_BETA1.powi(t);
    let bc2 = 1.0 - ADAMW_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let n = p.numel();
        for j in 0..n {
            let g = p.grad()[j];
            m[j] = ADAMW_BETA1 * m[j] + (1.0 - ADAMW_BETA1) * g;
            v[j] = ADAMW_BETA2 * v[j] + (1.0 - ADAMW_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let w = p.values()[j];
            p.values_mut()[j] = w - lr * (m_hat / (v_hat.sqrt() + ADAMW_EPS) + weight_decay * w);
        }
        p.zero_grad();
    }
    Ok(())
}
