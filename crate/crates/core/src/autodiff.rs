//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in evaluation order, so walking the arena backwards is
//! already a reverse topological order and each node is visited exactly once.
//! Nodes whose inputs carry no gradient are stored as constants and drop their
//! input references, which keeps frozen or inference-only passes off the tape.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, matmul_dims, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Graph::custom_unary`]: `(input, output_grad) -> input_grad`.
pub type CustomBackward<S> = fn(&[S], &[S]) -> Vec<S>;

enum Op<S: Real> {
    Const,
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    LayerNorm { x: Var, rstd: Vec<S> },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Custom { x: Var, backward: CustomBackward<S> },
    Gather { x: Var, index: Vec<usize> },
}

impl<S: Real> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Relu(a) => vec![*a],
            Op::LayerNorm { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Custom { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        }
    }
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of one forward pass.
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    inference: bool,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.044_715;
    let k = (2.0 / PI).sqrt();
    let u = k * (x + C * x * x * x);
    let th = u.tanh();
    let value = 0.5 * x * (1.0 + th);
    let deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * C * x * x);
    (value, deriv)
}

/// GELU, tanh approximation.
pub fn gelu_scalar<S: Real>(x: S) -> S {
    S::of(gelu_parts(x.as_f64()).0)
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            inference: false,
        }
    }

    /// A graph on which every leaf is a constant: nothing is taped.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::new()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that take part in backward.
    pub fn taped_len(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            ref op => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Const)
    }

    /// Inserts a leaf; it is differentiable iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: &Tensor<S>) -> Var {
        let mut v = Tensor::new(value.shape().to_vec(), value.data().to_vec())
            .expect("tensor invariants hold");
        if value.requires_grad() && !self.inference {
            v.set_requires_grad(true);
            self.push(v, Op::Leaf)
        } else {
            self.push(v, Op::Const)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul_nt")?;
        let (n, k2) = self.rank2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt of {:?} and {:?}ᵀ: inner dimensions must agree",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn row_op(&mut self, a: Var, row: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let d = self.value(a).last_dim();
        if self.value(row).len() != d {
            return Err(Error::Shape(format!(
                "{what}: row vector {:?} does not match last axis of {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let r = self.data(row);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % d]))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    /// Adds a vector to every row (last axis).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_op(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, row)))
    }

    /// Multiplies every row (last axis) elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_op(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::of(self.value(a).len() as f64);
        let s: S = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Column means of a matrix, as a `[1×cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2(a, "mean_rows")?;
        let x = self.data(a);
        let inv = S::one() / S::of(r as f64);
        let out = (0..c)
            .map(|j| (0..r).map(|i| x[i * c + j]).sum::<S>() * inv)
            .collect();
        Ok(self.push(Tensor::new([1, c], out)?, Op::MeanRows(a)))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// (population) variance. No affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Var {
        let d = self.value(x).last_dim();
        let inv_d = S::one() / S::of(d as f64);
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / d);
        for row in src.chunks(d) {
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let r = S::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mu) * r));
            rstd.push(r);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(t, Op::LayerNorm { x, rstd })
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut z = S::zero();
            for &v in row {
                let e = (v - m).exp();
                z = z + e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(S::zero()));
        self.push(t, Op::Relu(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.rank2(x, "slice_cols")?;
        if width == 0 || start + width > c {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} out of range for {:?}",
                start + width,
                self.shape(x)
            )));
        }
        let src = self.data(x);
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + width].iter().copied())
            .collect();
        Ok(self.push(Tensor::new([r, width], out)?, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (r, _) = self.rank2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.rank2(x, "concat_cols")?;
            if ri != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts {r} and {ri} differ"
                )));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new([r, total], out)?, Op::ConcatCols(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (r, c) = self.rank2(x, "slice_rows")?;
        if count == 0 || start + count > r {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of range for {:?}",
                start + count,
                self.shape(x)
            )));
        }
        let out = self.data(x)[start * c..(start + count) * c].to_vec();
        Ok(self.push(Tensor::new([count, c], out)?, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, c) = self.rank2(xs[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (ri, ci) = self.rank2(x, "concat_rows")?;
            if ci != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts {c} and {ci} differ"
                )));
            }
            rows += ri;
            out.extend_from_slice(self.data(x));
        }
        Ok(self.push(Tensor::new([rows, c], out)?, Op::ConcatRows(xs.to_vec())))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Used for layout permutations.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {n} elements")));
        }
        let src = self.data(x);
        let out = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Elementwise op with a caller-supplied backward rule.
    pub fn custom_unary(&mut self, x: Var, forward: impl Fn(S) -> S, backward: CustomBackward<S>) -> Var {
        let t = self.value(x).map(forward);
        self.push(t, Op::Custom { x, backward })
    }

    /// Populates gradients of the scalar `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Const | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| gemm_nt(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(self.data(*a), g, db, k, m, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, &mut |da| gemm(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(g, self.data(*a), db, n, m, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    let w = d.len();
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % w] = d[j % w] + gv;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.data(*a), self.data(*row));
                let w = rv.len();
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * rv[j % w];
                    }
                });
                acc(*row, &mut |d| {
                    for (j, &gv) in g.iter().enumerate() {
                        d[j % w] = d[j % w] + gv * av[j];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *s)
            }),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0])),
            Op::Mean(a) => {
                let n = S::of(self.value(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x = *x + g[0] / n))
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let inv = S::one() / S::of(r as f64);
                acc(*a, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x = *x + g[j % c] * inv;
                    }
                })
            }
            Op::LayerNorm { x, rstd } => {
                let dim = node.value.last_dim();
                let inv_d = S::one() / S::of(dim as f64);
                acc(*x, &mut |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let ys = &out[r * dim..(r + 1) * dim];
                        let gs = &g[r * dim..(r + 1) * dim];
                        let mean_g = gs.iter().copied().sum::<S>() * inv_d;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>() * inv_d;
                        for j in 0..dim {
                            let v = rs * (gs[j] - mean_g - ys[j] * mean_gy);
                            d[r * dim + j] = d[r * dim + j] + v;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let dim = node.value.last_dim();
                acc(*x, &mut |d| {
                    for r in 0..out.len() / dim {
                        let ys = &out[r * dim..(r + 1) * dim];
                        let gs = &g[r * dim..(r + 1) * dim];
                        let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<S>();
                        for j in 0..dim {
                            d[r * dim + j] = d[r * dim + j] + ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] = d[j] + g[j] * S::of(gelu_parts(xv[j].as_f64()).1);
                    }
                })
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] > S::zero() {
                            d[j] = d[j] + g[j];
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let w = node.value.last_dim();
                acc(*x, &mut |d| {
                    for (r, gs) in g.chunks(w).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + w], gs);
                    }
                })
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    acc(x, &mut |d| {
                        for (r, ds) in d.chunks_mut(w).enumerate() {
                            add_into(ds, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.last_dim();
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g))
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (&i, &gv) in index.iter().zip(g) {
                    d[i] = d[i] + gv;
                }
            }),
            Op::Custom { x, backward } => {
                let local = backward(self.data(*x), g);
                acc(*x, &mut |d| add_into(d, &local))
            }
        }
    }
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Analytic and central-difference gradients of a scalar function.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    /// `max_i |a_i − n_i| / max(1, |a_i|)`.
    pub fn max_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    /// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, zero when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let diff = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = inf(&self.analytic).max(inf(&self.numeric));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

pub fn grad_check_report<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    probe.set_requires_grad(true);
    let mut g = Graph::new();
    let leaf = g.leaf(&probe);
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut shifted = x.clone();
    shifted.set_requires_grad(false);
    for i in 0..x.len() {
        let orig = shifted.data()[i];
        shifted.data_mut()[i] = orig + h;
        let up = eval(&shifted)?;
        shifted.data_mut()[i] = orig - h;
        let down = eval(&shifted)?;
        shifted.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradCheckReport { analytic, numeric })
}

/// Compares the taped gradient of a scalar function against central
/// finite differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, h)?.max_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DiffusionRng;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = DiffusionRng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t64(&[3], &[5., 5., 5.]));
        let y = g.layer_norm(c, 1e-5);
        assert_eq!(g.value(y).data(), &[0., 0., 0.]);

        let x = g.constant(t64(&[3], &[1., 2., 3.]));
        let y = g.layer_norm(x, 0.0);
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut g = Graph::<f32>::new();
        let x = random(&[20, 8], 11).cast::<f32>().map(|v| v * 3.0 + 1.5);
        let x = g.constant(x);
        let y = g.layer_norm(x, 1e-5);
        for row in g.value(y).data().chunks(8) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[3, 2], &[0., 0., 1000., 1000., 0., 3f64.ln()]));
        let y = g.softmax(x);
        let out = g.value(y).data();
        for (a, b) in out.iter().zip([0.5, 0.5, 0.5, 0.5, 0.25, 0.75]) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn activations() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(3.0f64) - 2.9964).abs() < 1e-4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[3], &[-1., 0., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);
    }

    #[test]
    fn backward_simple_examples() {
        let mut g = Graph::<f64>::new();
        let mut x = t64(&[3], &[0.3, -1., 2.]);
        x.set_requires_grad(true);
        let xv = g.leaf(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let mut x = t64(&[2], &[1., 2.]);
        x.set_requires_grad(true);
        let xv = g.leaf(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let mut x = t64(&[2], &[1., 2.]);
        x.set_requires_grad(true);
        let xv = g.leaf(&x);
        assert!(matches!(g.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_value_accumulates_both_paths() {
        // f = sum(x * 3x + x) => df/dx = 6x + 1
        let mut g = Graph::<f64>::new();
        let mut x = t64(&[3], &[0.5, -2., 1.]);
        x.set_requires_grad(true);
        let xv = g.leaf(&x);
        let three = g.scale(xv, 3.0);
        let p = g.mul(xv, three).unwrap();
        let q = g.add(p, xv).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| 6.0 * v + 1.0).collect();
        assert_eq!(g.grad(xv).unwrap(), want.as_slice());
    }

    #[test]
    fn constants_are_not_taped() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::full([3, 3], 2.0));
        let c = g.matmul(a, b).unwrap();
        let _ = g.softmax(c);
        assert_eq!(g.taped_len(), 0);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let x = random(&[5], 3);
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_every_op() {
        let x = random(&[4, 6], 5);
        let w = random(&[6, 3], 6);
        let row = random(&[6], 7);
        let err = grad_check(
            |g, v| {
                let w = g.constant(w.clone());
                let row = g.constant(row.clone());
                let ln = g.layer_norm(v, 1e-5);
                let m = g.mul_row(ln, row)?;
                let m = g.add_row(m, row)?;
                let a = g.gelu(m);
                let left = g.slice_cols(a, 0, 3)?;
                let right = g.slice_cols(a, 3, 3)?;
                let cat = g.concat_cols(&[right, left])?;
                let sc = g.matmul_nt(cat, v)?; // 4x4
                let sm = g.softmax(sc);
                let ctx = g.matmul(sm, v)?; // 4x6
                let proj = g.matmul(ctx, w)?; // 4x3
                let top = g.slice_rows(proj, 0, 1)?;
                let rest = g.slice_rows(proj, 1, 3)?;
                let stacked = g.concat_rows(&[rest, top])?;
                let r = g.relu(stacked);
                let pooled = g.mean_rows(r)?;
                let e = g.sub(pooled, top)?;
                let sq = g.mul(e, e)?;
                let shifted = g.add_scalar(sq, 0.5);
                let scaled = g.scale(shifted, 1.7);
                let s = g.sum(scaled);
                let mm = g.mean(stacked);
                let mean_sq = g.mul(mm, mm)?;
                let rev = g.gather(v, (0..24).rev().collect(), &[24])?;
                let lin = g.slice_rows(v, 0, 1)?;
                let lin = g.gather(lin, vec![0, 0, 5], &[3])?;
                let rs = g.mul(rev, rev)?;
                let rs = g.sum(rs);
                let ls = g.sum(lin);
                let t = g.add(s, mean_sq)?;
                let t = g.add(t, rs)?;
                g.add(t, ls)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn grad_check_flags_wrong_backward() {
        // d/dx x^2 deliberately reported as x instead of 2x.
        fn wrong(x: &[f64], g: &[f64]) -> Vec<f64> {
            x.iter().zip(g).map(|(a, b)| a * b).collect()
        }
        let x = t64(&[3], &[1.5, -2.0, 3.0]);
        let err = grad_check(
            |g, v| {
                let sq = g.custom_unary(v, |a| a * a, wrong);
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        let r = g.constant(Tensor::zeros([2]));
        assert!(g.add_row(a, r).is_err());
    }
}
