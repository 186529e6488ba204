//! Classical power allocation baselines.
//!
//! [`wmmse`] is the scalar-channel weighted MMSE block-coordinate method.
//! Self-interference of FD receivers depends on the partner's power, so it is
//! treated as extra receiver noise that is refreshed from the current powers
//! at the start of every sweep and held fixed within it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgen::NetworkInstance;
use crate::phy::PowerAllocation;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("WMMSE produced a non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("L = {l} outside 1..={k}")]
    InvalidL { l: usize, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdSiMode {
    FixedPointOuter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub fd_si_mode: FdSiMode,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-5,
            fd_si_mode: FdSiMode::FixedPointOuter,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub power: PowerAllocation,
    /// Weighted sum rate before the first sweep and after every sweep.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn wmmse(inst: &NetworkInstance, cfg: &WmmseConfig) -> Result<PowerAllocation, BaselineError> {
    wmmse_traced(inst, cfg).map(|o| o.power)
}

pub fn wmmse_traced(
    inst: &NetworkInstance,
    cfg: &WmmseConfig,
) -> Result<WmmseOutcome, BaselineError> {
    let k = inst.num_links();
    let p_max = inst.config.p_max_w;
    let v_max = p_max.sqrt();
    let sigma2 = inst.config.noise_var_w;
    let si = inst.config.si_spec();
    let w = &inst.weights;
    let g = inst.gains();

    // gt[k][j] = |h_{j→k}|², row-contiguous per receiver.
    let mut gt = vec![0.0; k * k];
    for j in 0..k {
        for i in 0..k {
            gt[i * k + j] = g[j * k + i];
        }
    }
    let h_direct: Vec<f64> = (0..k).map(|i| g[i * k + i].sqrt()).collect();

    let mut v = vec![v_max; k];
    let mut noise = vec![0.0; k];
    let mut u = vec![0.0; k];
    let mut mse_w = vec![0.0; k];
    let mut coef = vec![0.0; k];
    let mut p = vec![0.0; k];

    let refresh_noise = |v: &[f64], noise: &mut [f64]| {
        for i in 0..k {
            noise[i] =
                sigma2 + inst.fd_partner[i].map_or(0.0, |q| si.eta * (v[q] * v[q]).powf(si.lambda));
        }
    };
    let objective = |v: &[f64], p: &mut [f64], noise: &mut [f64]| {
        for (pi, vi) in p.iter_mut().zip(v) {
            *pi = vi * vi;
        }
        refresh_noise(v, noise);
        let mut total = 0.0;
        for i in 0..k {
            let row = &gt[i * k..(i + 1) * k];
            let all: f64 = row.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            let signal = row[i] * p[i];
            let denom = all - signal + noise[i];
            total += w[i] * (signal / denom).ln_1p();
        }
        total / std::f64::consts::LN_2
    };

    let mut trace = vec![objective(&v, &mut p, &mut noise)];
    let mut iterations = 0;
    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        refresh_noise(&v, &mut noise);
        for (pi, vi) in p.iter_mut().zip(&v) {
            *pi = vi * vi;
        }
        for i in 0..k {
            let row = &gt[i * k..(i + 1) * k];
            let received: f64 = row.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + noise[i];
            u[i] = h_direct[i] * v[i] / received;
            mse_w[i] = 1.0 / (1.0 - u[i] * h_direct[i] * v[i]);
            coef[i] = w[i] * mse_w[i] * u[i] * u[i];
        }
        for i in 0..k {
            let row = &g[i * k..(i + 1) * k];
            let denom: f64 = row.iter().zip(&coef).map(|(a, b)| a * b).sum();
            let num = w[i] * mse_w[i] * u[i] * h_direct[i];
            v[i] = if denom > 0.0 {
                (num / denom).clamp(0.0, v_max)
            } else if num > 0.0 {
                v_max
            } else {
                0.0
            };
        }
        let obj = objective(&v, &mut p, &mut noise);
        if !obj.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(BaselineError::NonFinite {
                iteration: iterations,
            });
        }
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (obj - prev).abs() <= cfg.rel_tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let power = v.iter().map(|x| (x * x).min(p_max)).collect();
    Ok(WmmseOutcome {
        power: PowerAllocation::new(power, p_max).expect("clipped to the box"),
        objective_trace: trace,
        iterations,
    })
}

/// Full power on the `l` links with the largest direct gains, zero elsewhere.
pub fn greedy_top_l(inst: &NetworkInstance, l: usize) -> Result<PowerAllocation, BaselineError> {
    let k = inst.num_links();
    if l == 0 || l > k {
        return Err(BaselineError::InvalidL { l, k });
    }
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps lower indices first among equal gains.
    order.sort_by(|&a, &b| inst.gain(b, b).total_cmp(&inst.gain(a, a)));
    let mut p = vec![0.0; k];
    for &i in &order[..l] {
        p[i] = inst.config.p_max_w;
    }
    Ok(PowerAllocation::new(p, inst.config.p_max_w).expect("box"))
}

/// The comparison baseline's default `L = K/2` (at least one link).
pub fn default_greedy_l(k: usize) -> usize {
    (k / 2).max(1)
}
