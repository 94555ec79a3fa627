//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! a topological order, and [`Tape::backward`] walks them in reverse. Only
//! first-order gradients are supported.
//!
//! A tape rejects a second `backward` call until [`Tape::zero_grad`] runs,
//! unless accumulation was switched on with [`Tape::set_accumulate`].

use crate::error::{AraError, Result};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    RmsNormRows {
        x: Var,
        inv_rms: Vec<f64>,
    },
    Gather {
        table: Var,
        indices: Vec<Option<usize>>,
    },
    /// `x * diag(v)` with `v` a 1 x cols row vector.
    MulCols(Var, Var),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    accumulate: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Returns the non-scalar shape when exactly one side is a 1x1 scalar.
fn broadcast_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<(usize, usize)> {
    if a.shape() == b.shape() {
        Ok(a.shape())
    } else if a.shape() == (1, 1) {
        Ok(b.shape())
    } else if b.shape() == (1, 1) {
        Ok(a.shape())
    } else {
        Err(AraError::dim(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn broadcast_zip(a: &Matrix, b: &Matrix, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    let (rows, cols) = broadcast_shape(a, b, what)?;
    let n = rows * cols;
    let av = a.as_slice();
    let bv = b.as_slice();
    let data = (0..n)
        .map(|i| {
            let x = if av.len() == 1 { av[0] } else { av[i] };
            let y = if bv.len() == 1 { bv[0] } else { bv[i] };
            f(x, y)
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Reduces a broadcast gradient back onto an operand of shape `target`.
fn unbroadcast(grad: Matrix, target: (usize, usize)) -> Matrix {
    if grad.shape() == target {
        grad
    } else {
        Matrix::scalar(grad.sum())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row_values(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
            accumulate: false,
        }
    }

    /// Allow repeated `backward` calls to sum into existing gradients.
    pub fn set_accumulate(&mut self, on: bool) {
        self.accumulate = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`; with `b` an out x in weight this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_zip(self.value(a), self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.needs(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.needs(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x <= 0.0) {
            return Err(AraError::Numerical("log of non-positive value".into()));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x < 0.0) {
            return Err(AraError::Numerical("sqrt of negative value".into()));
        }
        let value = self.value(a).map(f64::sqrt);
        let rg = self.needs(a);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.needs(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Matrix::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.needs(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_row_values(self.value(a));
        let rg = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() {
            return Err(AraError::dim(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(AraError::input(format!(
                "target index {t} out of range for vocabulary of {}",
                lv.cols()
            )));
        }
        if targets.is_empty() {
            return Err(AraError::input("cross_entropy over zero rows"));
        }
        let probs = softmax_row_values(lv);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Matrix::scalar(total / targets.len() as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols().max(1) as f64;
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let ms = xv.row(r).iter().map(|v| v * v).sum::<f64>() / n;
            let inv = 1.0 / (ms + eps).sqrt();
            for v in out.row_mut(r) {
                *v *= inv;
            }
            inv_rms.push(inv);
        }
        let rg = self.needs(x);
        self.push(out, Op::RmsNormRows { x, inv_rms }, rg)
    }

    /// Gathers table rows; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(indices.len(), tv.cols());
        for (r, idx) in indices.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= tv.rows() {
                    return Err(AraError::input(format!(
                        "gather index {i} out of range for {} rows",
                        tv.rows()
                    )));
                }
                out.row_mut(r).copy_from_slice(tv.row(i));
            }
        }
        let rg = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Scales each column of `x` by the matching entry of row vector `v`.
    pub fn mul_cols(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        if vv.rows() != 1 || vv.cols() != xv.cols() {
            return Err(AraError::dim(format!(
                "mul_cols: {:?} by {:?}",
                xv.shape(),
                vv.shape()
            )));
        }
        let value = xv.scale_cols(vv.as_slice());
        let rg = self.needs(x) || self.needs(v);
        Ok(self.push(value, Op::MulCols(x, v), rg))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AraError::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        if self.backward_done && !self.accumulate {
            return Err(AraError::Usage(
                "backward called twice without zero_grad".into(),
            ));
        }
        self.backward_done = true;
        if !self.needs(loss) {
            return Ok(());
        }
        // Seed into a scratch vector so accumulation mode adds on top of
        // existing gradients instead of replacing the seed.
        let mut pending: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, contrib) in self.local_grads(i, &g)? {
                match &mut pending[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.matmul_nt(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, val(*a).matmul_tn(g)?));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.matmul(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.matmul_tn(val(*a))?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, unbroadcast(g.clone(), val(*a).shape())));
                }
                if self.needs(*b) {
                    out.push((*b, unbroadcast(g.clone(), val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, unbroadcast(g.clone(), val(*a).shape())));
                }
                if self.needs(*b) {
                    out.push((*b, unbroadcast(g.scale(-1.0), val(*b).shape())));
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.needs(*a) {
                    let d = broadcast_zip(g, bv, "hadamard", |x, y| x * y)?;
                    out.push((*a, unbroadcast(d, av.shape())));
                }
                if self.needs(*b) {
                    let d = broadcast_zip(g, av, "hadamard", |x, y| x * y)?;
                    out.push((*b, unbroadcast(d, bv.shape())));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::AddConst(a) => out.push((*a, g.clone())),
            Op::Silu(a) => {
                let d = val(*a).zip_map(g, |x, gy| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                })?;
                out.push((*a, d));
            }
            Op::Sigmoid(a) => {
                out.push((*a, self.nodes[i].value.zip_map(g, |y, gy| gy * y * (1.0 - y))?))
            }
            Op::Tanh(a) => out.push((*a, self.nodes[i].value.zip_map(g, |y, gy| gy * (1.0 - y * y))?)),
            Op::Exp(a) => out.push((*a, self.nodes[i].value.zip_map(g, |y, gy| y * gy)?)),
            Op::Log(a) => out.push((*a, val(*a).zip_map(g, |x, gy| gy / x)?)),
            Op::Sqrt(a) => out.push((*a, self.nodes[i].value.zip_map(g, |y, gy| gy / (2.0 * y))?)),
            Op::Square(a) => out.push((*a, val(*a).zip_map(g, |x, gy| 2.0 * x * gy)?)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.item())));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = (r * c).max(1) as f64;
                out.push((*a, Matrix::filled(r, c, g.item() / n)));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut d = y.clone();
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                        *dv *= gv - dot;
                    }
                }
                out.push((*a, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.item() / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[(r, t)] -= 1.0;
                }
                out.push((*logits, d.scale(scale)));
            }
            Op::RmsNormRows { x, inv_rms } => {
                let y = &self.nodes[i].value;
                let n = y.cols().max(1) as f64;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *dv = inv * (gv - yv * dot / n);
                    }
                }
                out.push((*x, d));
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, idx) in indices.iter().enumerate() {
                    if let Some(t) = *idx {
                        for (dv, gv) in d.row_mut(t).iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                }
                out.push((*table, d));
            }
            Op::MulCols(x, v) => {
                let (xv, vv) = (val(*x), val(*v));
                if self.needs(*x) {
                    out.push((*x, g.scale_cols(vv.as_slice())));
                }
                if self.needs(*v) {
                    let mut d = vec![0.0; xv.cols()];
                    for r in 0..xv.rows() {
                        for ((dv, a), b) in d.iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *dv += a * b;
                        }
                    }
                    out.push((*v, Matrix::row_vector(&d)));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += H;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= H;
            g.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * H);
        }
        g
    }

    fn analytic_grad(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) -> Matrix {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let loss = build(&mut t, v);
        t.backward(loss).unwrap();
        t.grad(v).cloned().unwrap()
    }

    fn eval(x: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let loss = build(&mut t, v);
        t.scalar_value(loss)
    }

    fn max_rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
            .fold(0.0, f64::max)
    }

    fn check(build: &dyn Fn(&mut Tape, Var) -> Var, shapes: &[(usize, usize)], positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(r, c) in shapes {
            let mut x = Matrix::randn(r, c, 1.0, &mut rng);
            if positive {
                x = x.map(|v| v.abs() + 0.5);
            }
            let a = analytic_grad(&x, build);
            let n = numeric_grad(&x, &|m| eval(m, build));
            let err = max_rel_err(&a, &n);
            assert!(err < 1e-5, "shape {r}x{c}: rel err {err}");
        }
    }

    const SHAPES: [(usize, usize); 3] = [(1, 1), (3, 4), (5, 2)];

    #[test]
    fn matmul_values_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
        let b = t.constant(Matrix::from_rows(&[[3.0], [4.0]]));
        let y = t.matmul(a, b).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        // central differences on sum(a*b) give exactly [[3, 4]]
        let fd = numeric_grad(&Matrix::from_rows(&[[1.0, 2.0]]), &|m| {
            m.matmul(&Matrix::from_rows(&[[3.0], [4.0]])).unwrap().sum()
        });
        assert!(max_rel_err(t.grad(a).unwrap(), &fd) < 1e-9);
        assert!(max_rel_err(t.grad(a).unwrap(), &Matrix::from_rows(&[[3.0, 4.0]])) < 1e-9);
    }

    #[test]
    fn matmul_shape_error() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(AraError::Dimension(_))));
        assert!(t.add(a, b).is_ok());
        let c = t.leaf(Matrix::zeros(3, 2));
        assert!(matches!(t.hadamard(a, c), Err(AraError::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(1.0));
        let b = t.constant(Matrix::scalar(2.0));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.scalar_value(s), 3.0);
        let z = t.constant(Matrix::scalar(0.0));
        let y = t.silu(z);
        assert_eq!(t.scalar_value(y), 0.0);

        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        check(&|t, x| { let y = t.silu(x); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.exp(x); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.sigmoid(x); let y = t.square(y); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.tanh(x); let y = t.square(y); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.log(x).unwrap(); t.sum(y) }, &SHAPES, true);
        check(&|t, x| { let y = t.sqrt(x).unwrap(); t.sum(y) }, &SHAPES, true);
        check(&|t, x| { let y = t.square(x); t.mean(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.scale(x, -2.5); let y = t.add_const(y, 1.0); let y = t.square(y); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.hadamard(x, x).unwrap(); let z = t.sub(y, x).unwrap(); t.sum(z) }, &SHAPES, false);
        check(&|t, x| { let y = t.rms_norm_rows(x, 1e-6); let y = t.square(y); let w = t.constant(Matrix::scalar(0.3)); let y = t.hadamard(y, w).unwrap(); let y = t.exp(y); t.sum(y) }, &SHAPES, false);
        check(&|t, x| { let y = t.transpose(x); let y = t.square(y); t.sum(y) }, &SHAPES, false);
    }

    #[test]
    fn scalar_broadcast_gradient() {
        check(
            &|t, x| {
                let s = t.sum(x);
                let m = t.constant(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
                let y = t.hadamard(m, s).unwrap();
                let y = t.add(y, s).unwrap();
                let y = t.square(y);
                t.sum(y)
            },
            &SHAPES,
            false,
        );
    }

    #[test]
    fn mul_cols_and_gather_gradients() {
        check(
            &|t, v| {
                let cols = t.value(v).cols();
                let x = t.constant(Matrix::from_vec(2, cols, (0..2 * cols).map(|i| i as f64 - 1.5).collect()).unwrap());
                let y = t.mul_cols(x, v).unwrap();
                let y = t.square(y);
                t.sum(y)
            },
            &[(1, 1), (1, 4), (1, 7)],
            false,
        );
        check(
            &|t, table| {
                let rows = t.value(table).rows();
                let idx: Vec<Option<usize>> = vec![Some(0), None, Some(rows - 1), Some(0)];
                let y = t.gather_rows(table, &idx).unwrap();
                let y = t.square(y);
                t.sum(y)
            },
            &SHAPES,
            false,
        );
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[0.0, 0.0]]));
        let s = t.softmax_rows(a);
        assert_eq!(t.value(s).as_slice(), &[0.5, 0.5]);
        let a = t.constant(Matrix::from_rows(&[[1000.0, 1000.0]]));
        let s = t.softmax_rows(a);
        assert_eq!(t.value(s).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_gradient_on_random_3x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = Matrix::randn(3, 4, 1.0, &mut rng);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let build = |t: &mut Tape, v: Var| {
            let s = t.softmax_rows(v);
            let w = t.constant(weights.clone());
            let y = t.hadamard(s, w).unwrap();
            t.sum(y)
        };
        let a = analytic_grad(&x, &build);
        let n = numeric_grad(&x, &|m| eval(m, &build));
        let diff = a.sub(&n).unwrap().max_abs();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::from_rows(&[[0.0, 0.0]]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!((t.scalar_value(ce) - 2f64.ln()).abs() < 1e-12);
        let l = t.constant(Matrix::from_rows(&[[10.0, -10.0]]));
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.scalar_value(ce) < 1e-4);
        assert!(matches!(t.cross_entropy(l, &[2]), Err(AraError::Input(_))));
    }

    #[test]
    fn cross_entropy_gradient_on_random_4x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::randn(4, 8, 2.0, &mut rng);
        let targets = [1usize, 7, 0, 3];
        let build = |t: &mut Tape, v: Var| t.cross_entropy(v, &targets).unwrap();
        let a = analytic_grad(&x, &build);
        let n = numeric_grad(&x, &|m| eval(m, &build));
        assert!(a.sub(&n).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn backward_basics() {
        let x0 = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Matrix::filled(2, 3, 1.0));

        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let sq = t.square(x);
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        assert_eq!(t.grad(x).unwrap(), &x0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_calls() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(AraError::Usage(_))));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(AraError::Usage(_))));
        t.zero_grad();
        t.backward(s).unwrap();
        t.set_accumulate(true);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Matrix::filled(2, 2, 2.0));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(1.7));
        let y = t.hadamard(x, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(x).unwrap().item() - 3.4).abs() < 1e-15);
    }

    #[test]
    fn composite_matmul_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w1 = Matrix::randn(4, 6, 0.7, &mut rng);
        let w2 = Matrix::randn(5, 6, 0.7, &mut rng);
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let build = |t: &mut Tape, v: Var| {
            let a = t.constant(w1.clone());
            let b = t.constant(w2.clone());
            let h = t.matmul(v, a).unwrap();
            let h = t.silu(h);
            let o = t.matmul_nt(h, b).unwrap();
            let s = t.softmax_rows(o);
            let s = t.square(s);
            t.sum(s)
        };
        let a = analytic_grad(&x, &build);
        let n = numeric_grad(&x, &|m| eval(m, &build));
        assert!(max_rel_err(&a, &n) < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scale in [1.0, 10.0, 100.0, 1000.0] {
            let x = Matrix::randn(6, 9, scale, &mut rng).map(|v| v.clamp(-1e3, 1e3));
            let s = softmax_row_values(&x);
            for r in 0..s.rows() {
                assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
