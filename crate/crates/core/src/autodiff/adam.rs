use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::{AutodiffError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before anything is
/// modified, so a rejected step leaves `params` untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Matrix],
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if grads.len() != params.len() {
        return Err(AutodiffError::GradientCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (slot, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors[slot].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam",
                left: params.tensors[slot].shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFiniteGradient(params.names[slot].clone()));
        }
    }

    let state = &mut params.adam;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (slot, g) in grads.iter().enumerate() {
        let theta = &mut params.tensors[slot].data;
        let m = &mut state.first[slot].data;
        let v = &mut state.second[slot].data;
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
