//! Rate model: self-interference variance, SINR, per-link rates and the
//! weighted sum-rate objective.
//!
//! The receiver of an FD link `k` is the transmitter of its partner link, so
//! the residual self-interference it sees is driven by the partner's power:
//! `γ²_k = η · p_partner(k)^λ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgen::NetworkInstance;

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("power must be non-negative, got {0}")]
    NegativePower(f64),
    #[error("power vector has {got} entries, instance has {expected} links")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power {value} of link {index} outside [0, {p_max}]")]
    OutOfBox {
        index: usize,
        value: f64,
        p_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfInterferenceSpec {
    pub eta: f64,
    pub lambda: f64,
}

/// `γ² = η · p^λ`, with `0^0 = 1`.
pub fn si_variance(p: f64, spec: SelfInterferenceSpec) -> Result<f64, PhyError> {
    if p < 0.0 || p.is_nan() {
        return Err(PhyError::NegativePower(p));
    }
    Ok(spec.eta * p.powf(spec.lambda))
}

/// Transmit powers in watts, one per link.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation(Vec<f64>);

impl PowerAllocation {
    /// Checks the box constraint `0 ≤ p_k ≤ p_max`.
    pub fn new(p: Vec<f64>, p_max: f64) -> Result<Self, PhyError> {
        for (index, &value) in p.iter().enumerate() {
            if !(0.0..=p_max).contains(&value) {
                return Err(PhyError::OutOfBox {
                    index,
                    value,
                    p_max,
                });
            }
        }
        Ok(Self(p))
    }

    pub fn full(k: usize, p_max: f64) -> Self {
        Self(vec![p_max; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_dims(inst: &NetworkInstance, p: &[f64]) -> Result<(), PhyError> {
    if p.len() != inst.num_links() {
        return Err(PhyError::DimensionMismatch {
            expected: inst.num_links(),
            got: p.len(),
        });
    }
    Ok(())
}

/// Per-link SINR for an arbitrary non-negative power vector.
pub fn sinr_raw(inst: &NetworkInstance, p: &[f64]) -> Result<Vec<f64>, PhyError> {
    check_dims(inst, p)?;
    let k = inst.num_links();
    let spec = inst.config.si_spec();
    let noise = inst.config.noise_var_w;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut interference = 0.0;
        for j in 0..k {
            if j != i {
                interference += inst.gain(j, i) * p[j];
            }
        }
        let mut denom = interference + noise;
        if let Some(partner) = inst.fd_partner[i] {
            denom += si_variance(p[partner], spec)?;
        }
        out.push(inst.gain(i, i) * p[i] / denom);
    }
    Ok(out)
}

pub fn sinr(inst: &NetworkInstance, p: &PowerAllocation) -> Result<Vec<f64>, PhyError> {
    sinr_raw(inst, p.as_slice())
}

pub fn rates_raw(inst: &NetworkInstance, p: &[f64]) -> Result<Vec<f64>, PhyError> {
    Ok(sinr_raw(inst, p)?
        .into_iter()
        .map(|s| s.ln_1p() / std::f64::consts::LN_2)
        .collect())
}

/// `log₂(1 + SINR_k)` per link.
pub fn rates(inst: &NetworkInstance, p: &PowerAllocation) -> Result<Vec<f64>, PhyError> {
    rates_raw(inst, p.as_slice())
}

pub fn weighted_sum_rate_raw(inst: &NetworkInstance, p: &[f64]) -> Result<f64, PhyError> {
    Ok(rates_raw(inst, p)?
        .iter()
        .zip(&inst.weights)
        .map(|(r, w)| w * r)
        .sum())
}

/// `Σ_k w_k log₂(1 + SINR_k)`.
pub fn weighted_sum_rate(inst: &NetworkInstance, p: &PowerAllocation) -> Result<f64, PhyError> {
    weighted_sum_rate_raw(inst, p.as_slice())
}
