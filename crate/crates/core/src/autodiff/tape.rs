//! Tape-based reverse mode over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`] and are tagged with their slot in the
//! [`ParamStore`](super::ParamStore); constants enter through
//! [`Tape::constant`] and never receive gradients. [`Tape::backward`] walks
//! the record once in reverse and may only be called once per tape.

use std::sync::Arc;

use super::matrix::Matrix;
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(usize),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + 1·bias` with `bias` a single row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    PowConst(Var, f64),
    Log1p(Var),
    Gather(Var, Arc<[usize]>),
    /// Output row `v` is the ordered sum of input rows `offsets[v]..offsets[v+1]`.
    SegmentSum(Var, Arc<[usize]>),
    ConcatCols(Var, Var),
    RowSlice(Var, usize),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to node `v` (zeros when no path leads to it).
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Sums gradients per parameter slot into `out`, which must already hold
    /// zero matrices shaped like the parameters.
    pub fn accumulate_params(&self, out: &mut [Matrix]) {
        for &(slot, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                out[slot].add_assign(g);
            }
        }
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left, right }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn param(&mut self, slot: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(slot), true)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param(usize::MAX), true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let v = self.value(a).matmul(self.value(b));
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).data.clone();
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let g = self.grad_of(&[a, bias]);
        Ok(self.push(v, Op::AddRow(a, bias), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("div", sa, sb));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.grad_of(&[a]);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_of(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(logistic);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sigmoid(a), g)
    }

    /// Elementwise `x^e` for non-negative inputs. Where `x = 0` the gradient
    /// is taken as zero.
    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(e));
        let g = self.grad_of(&[a]);
        self.push(v, Op::PowConst(a, e), g)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln_1p);
        let g = self.grad_of(&[a]);
        self.push(v, Op::Log1p(a), g)
    }

    pub fn gather(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let src = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= src.rows) {
            return Err(shape_err("gather", src.shape(), (bad, 0)));
        }
        let cols = src.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows.iter() {
            data.extend_from_slice(src.row(r));
        }
        let v = Matrix::from_vec(rows.len(), cols, data);
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::Gather(a, rows), g))
    }

    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var, AutodiffError> {
        let src = self.value(a);
        if offsets.first() != Some(&0) || offsets.last() != Some(&src.rows) {
            return Err(shape_err("segment_sum", src.shape(), (offsets.len(), 0)));
        }
        let segments = offsets.len() - 1;
        let mut v = Matrix::zeros(segments, src.cols);
        for s in 0..segments {
            let out = v.row_mut(s);
            for r in offsets[s]..offsets[s + 1] {
                for (o, x) in out.iter_mut().zip(src.row(r)) {
                    *o += x;
                }
            }
        }
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::SegmentSum(a, offsets), g))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let cols = sa.1 + sb.1;
        let mut data = Vec::with_capacity(sa.0 * cols);
        for r in 0..sa.0 {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let v = Matrix::from_vec(sa.0, cols, data);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(v, Op::ConcatCols(a, b), g))
    }

    /// Rows `start..end` of `a`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if start > end || end > s.0 {
            return Err(shape_err("row_slice", s, (start, end)));
        }
        let v = self.value(a).row_slice(start, end);
        let g = self.grad_of(&[a]);
        Ok(self.push(v, Op::RowSlice(a, start), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput(shape));
        }
        self.backward_with(output, Matrix::scalar(1.0))
    }

    /// Reverse pass seeded with `seed = ∂L/∂output`.
    pub fn backward_with(&mut self, output: Var, seed: Matrix) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TraceConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward seed", self.shape(output), seed.shape()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        let mut params = Vec::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(slot) = node.op {
                if slot != usize::MAX {
                    params.push((slot, Var(i)));
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let send = |grads: &mut Vec<Option<Matrix>>, to: Var, contrib: Matrix| {
                if !self.nodes[to.0].needs_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Param(_) | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.matmul_t(val(*b)));
                    }
                    if needs(*b) {
                        send(&mut grads, *b, val(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, bias) => {
                    if needs(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        send(&mut grads, *bias, gb);
                    }
                    send(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        send(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if needs(*a) {
                        send(&mut grads, *a, g.zip_map(bv, |x, y| x / y));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -(a/b)/b
                        let q = node.value.zip_map(bv, |q, y| -q / y);
                        send(&mut grads, *b, g.zip_map(&q, |x, y| x * y));
                    }
                }
                Op::Scale(a, c) => send(&mut grads, *a, g.map(|x| c * x)),
                Op::AddScalar(a) => send(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    send(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    send(&mut grads, *a, d);
                }
                Op::PowConst(a, e) => {
                    let e = *e;
                    let dx = val(*a).map(|x| if x == 0.0 { 0.0 } else { e * x.powf(e - 1.0) });
                    send(
                        &mut grads,
                        *a,
                        g.zip_map(&dx, |x, y| if y == 0.0 { 0.0 } else { x * y }),
                    );
                }
                Op::Log1p(a) => {
                    let d = g.zip_map(val(*a), |x, y| x / (1.0 + y));
                    send(&mut grads, *a, d);
                }
                Op::Gather(a, rows) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::SegmentSum(a, offsets) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    for s in 0..offsets.len() - 1 {
                        for r in offsets[s]..offsets[s + 1] {
                            d.row_mut(r).copy_from_slice(g.row(s));
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols;
                    let cb = val(*b).cols;
                    if needs(*a) {
                        let mut d = Matrix::zeros(g.rows, ca);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        }
                        send(&mut grads, *a, d);
                    }
                    if needs(*b) {
                        let mut d = Matrix::zeros(g.rows, cb);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                        }
                        send(&mut grads, *b, d);
                    }
                }
                Op::RowSlice(a, start) => {
                    let src = val(*a);
                    let mut d = Matrix::zeros(src.rows, src.cols);
                    let off = start * src.cols;
                    d.data[off..off + g.len()].copy_from_slice(&g.data);
                    send(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(&mut grads, *a, Matrix::filled(r, c, g.data[0]));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(0, Matrix::scalar(3.0));
        let c = t.constant(Matrix::scalar(5.0));
        let z = t.scale(w, 0.0);
        let out = t.add(z, c).unwrap();
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(w).unwrap().data, vec![0.0]);
    }

    #[test]
    fn linear_loss_gradient_is_coefficient() {
        let mut t = Tape::new();
        let w = t.param(0, Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let x = t.constant(Matrix::from_vec(3, 1, vec![4.0, 5.0, 6.0]));
        let y = t.matmul(w, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).unwrap().data, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let w = t.param(0, Matrix::scalar(1.0));
        let y = t.sum(w);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(AutodiffError::TraceConsumed)));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let w = t.param(0, Matrix::zeros(2, 1));
        assert!(matches!(
            t.backward(w),
            Err(AutodiffError::NonScalarOutput((2, 1)))
        ));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
        let c = t.constant(Matrix::zeros(3, 3));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn scalar_ops_match_finite_differences() {
        // f(x) = log1p( sigmoid(x) · relu(x)^0.5 / (x² + 1) ) · 3
        let f = |x: f64| (logistic(x) * x.max(0.0).powf(0.5) / (x * x + 1.0)).ln_1p() * 3.0;
        for &x0 in &[0.3, 1.7, 2.5] {
            let mut t = Tape::new();
            let x = t.input(Matrix::scalar(x0));
            let s = t.sigmoid(x);
            let r = t.relu(x);
            let p = t.pow_const(r, 0.5);
            let num = t.mul(s, p).unwrap();
            let sq = t.mul(x, x).unwrap();
            let den = t.add_scalar(sq, 1.0);
            let q = t.div(num, den).unwrap();
            let l = t.log1p(q);
            let out = t.scale(l, 3.0);
            assert!((t.value(out).data[0] - f(x0)).abs() < 1e-14);
            let g = t.backward(out).unwrap();
            let fd = central_diff(f, x0);
            assert!((g.wrt(x).unwrap().data[0] - fd).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn sum_aggregation_distributes_gradient_equally() {
        let mut t = Tape::new();
        let x = t.input(Matrix::from_vec(4, 2, (0..8).map(|i| i as f64).collect()));
        let s = t.segment_sum(x, Arc::from(vec![0, 3, 4])).unwrap();
        assert_eq!(t.value(s).data, vec![6.0, 9.0, 6.0, 7.0]);
        let w = t.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = t.mul(s, w).unwrap();
        let out = t.sum(y);
        let g = t.backward(out).unwrap();
        assert_eq!(
            g.wrt(x).unwrap().data,
            vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn gather_concat_slice_round_trip() {
        let mut t = Tape::new();
        let x = t.input(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let g1 = t.gather(x, Arc::from(vec![2, 0, 2])).unwrap();
        let c = t.concat_cols(g1, g1).unwrap();
        let s = t.row_slice(c, 1, 3).unwrap();
        assert_eq!(t.value(s).data, vec![1.0, 1.0, 3.0, 3.0]);
        let out = t.sum(s);
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(x).unwrap().data, vec![2.0, 0.0, 2.0]);
    }
}
