//! Minimal reverse-mode differentiation for small MLPs and message passing,
//! with an Adam optimizer and exact parameter checkpoints.

mod adam;
mod matrix;
mod mlp;
mod tape;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamConfig};
pub use matrix::Matrix;
pub use mlp::{mlp_apply, mlp_eval, Activation, MlpSpec};
pub use tape::{logistic, Gradients, Tape, Var};

use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward already ran on this trace")]
    TraceConsumed,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("gradient list has {got} entries, store has {expected}")]
    GradientCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

/// Every learnable tensor, addressed by slot index, plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
    pub adam: AdamState,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            adam: AdamState {
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        }
    }

    /// Appends a tensor and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let (r, c) = value.shape();
        self.names.push(name.into());
        self.tensors.push(value);
        self.adam.first.push(Matrix::zeros(r, c));
        self.adam.second.push(Matrix::zeros(r, c));
        self.tensors.len() - 1
    }

    /// Appends Glorot-uniform weights and zero biases for `spec`; returns
    /// the slots as `[w0, b0, w1, b1, ...]`.
    pub fn push_mlp(&mut self, prefix: &str, spec: &MlpSpec, rng: &mut Rng) -> Vec<usize> {
        use rand::Rng as _;
        let mut slots = Vec::new();
        for (layer, pair) in spec.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            slots.push(self.push(
                format!("{prefix}.w{layer}"),
                Matrix::from_vec(fan_in, fan_out, w),
            ));
            slots.push(self.push(format!("{prefix}.b{layer}"), Matrix::zeros(1, fan_out)));
        }
        slots
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows, t.cols))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text =
            serde_json::to_string(&ck).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AutodiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let p = ck.params;
        let consistent = p.names.len() == p.tensors.len()
            && p.adam.first.len() == p.tensors.len()
            && p.adam.second.len() == p.tensors.len()
            && p.tensors
                .iter()
                .zip(&p.adam.first)
                .zip(&p.adam.second)
                .all(|((t, m), v)| {
                    t.len() == t.rows * t.cols && m.shape() == t.shape() && v.shape() == t.shape()
                });
        if !consistent {
            return Err(AutodiffError::Checkpoint(
                "inconsistent tensor shapes".into(),
            ));
        }
        Ok(p)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

const CHECKPOINT_FORMAT: &str = "fdgnn-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ParamStore,
}

pub fn seeded_rng(seed: u64) -> Rng {
    rng_from_seed(seed)
}
