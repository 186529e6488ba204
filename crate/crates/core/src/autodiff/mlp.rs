use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{logistic, Tape, Var};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Logistic,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => tape.relu(v),
            Activation::Logistic => tape.sigmoid(v),
        }
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Logistic => logistic(x),
        }
    }
}

/// Fully connected network: rectifier between layers, `output` at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: Activation) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0));
        Self {
            widths,
            hidden: Activation::Relu,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Applies the network row-wise to `input` (`n × in`), recording on `tape`.
/// `params` holds `[w0, b0, w1, b1, ...]` already placed on the tape.
pub fn mlp_apply(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: &[Var],
    input: Var,
) -> Result<Var, AutodiffError> {
    if params.len() != 2 * spec.num_layers() {
        return Err(AutodiffError::ShapeMismatch {
            op: "mlp params",
            left: (2 * spec.num_layers(), 0),
            right: (params.len(), 0),
        });
    }
    let (_, cols) = tape.shape(input);
    if cols != spec.input_dim() {
        return Err(AutodiffError::ShapeMismatch {
            op: "mlp input",
            left: (0, spec.input_dim()),
            right: tape.shape(input),
        });
    }
    let mut x = input;
    for layer in 0..spec.num_layers() {
        let z = tape.matmul(x, params[2 * layer])?;
        let z = tape.add_row(z, params[2 * layer + 1])?;
        let act = if layer + 1 == spec.num_layers() {
            spec.output
        } else {
            spec.hidden
        };
        x = act.apply(tape, z);
    }
    Ok(x)
}

/// Plain evaluation of one input vector, no trace.
pub fn mlp_eval(spec: &MlpSpec, tensors: &[&Matrix], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for layer in 0..spec.num_layers() {
        let (w, b) = (tensors[2 * layer], tensors[2 * layer + 1]);
        let mut z = b.data.clone();
        for (k, &xk) in x.iter().enumerate() {
            for (zj, &wkj) in z.iter_mut().zip(w.row(k)) {
                *zj += xk * wkj;
            }
        }
        let act = if layer + 1 == spec.num_layers() {
            spec.output
        } else {
            spec.hidden
        };
        x = z.into_iter().map(|v| act.eval(v)).collect();
    }
    x
}
