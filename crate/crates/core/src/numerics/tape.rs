//! Reverse-mode differentiation by operation recording.
//!
//! Every operation appends a node holding its value. Nodes that depend on a
//! trainable leaf also keep the operation and whatever the backward rule
//! needs; everything else is stored as a constant. [`GradTape::backward`]
//! walks the nodes in reverse order exactly once.

use std::borrow::Cow;
use std::sync::Arc;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var, cols: usize },
    Scale { a: Var, c: T },
    Shift { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { a: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var>, rows: usize },
    SliceRows { a: Var, start: usize, cols: usize },
    SliceCols { a: Var, start: usize, rows: usize, cols: usize },
    Reshape { a: Var },
    MseLoss { a: Var, b: Var },
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Single-writer; one per forward pass.
pub struct GradTape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<'a, T: Real> Default for GradTape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> GradTape<'a, T> {
    pub fn new() -> Self {
        GradTape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrows a tensor onto the tape; it participates in gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Moves an owned tensor onto the tape as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// Owned trainable leaf; mostly useful in tests.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::gemm_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulNt { a, b, m, k, n }, rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.same_shape(a, b, op)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, b]));
        Ok(self.push(Cow::Owned(out), shape, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, b]));
        Ok(self.push(Cow::Owned(out), shape, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, b]));
        Ok(self.push(Cow::Owned(out), shape, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&1);
        if self.value(row).len() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a, row]));
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow { a, row, cols }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        Ok(self.push(Cow::Owned(out), shape, Op::Scale { a, c }, rg))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        Ok(self.push(Cow::Owned(out), shape, Op::Shift { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("tensor in mean"));
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::Mean { a }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let out = kernels::softmax(self.value(a), outer, len, inner);
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Row softmax of a rank-2 tensor where disallowed entries are exactly zero.
    /// Every row must allow at least one column.
    pub fn masked_softmax(&mut self, a: Var, allowed: &Arc<[bool]>) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "masked_softmax")?;
        if allowed.len() != rows * cols {
            return Err(Error::shape("masked_softmax", &[rows, cols], &[allowed.len()]));
        }
        let out = kernels::masked_softmax(self.value(a), cols, allowed);
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), vec![rows, cols], Op::MaskedSoftmax { a, cols }, rg))
    }

    /// Normalizes each last-axis row, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (y, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), cols, eps);
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            xhat,
            rstd,
        };
        Ok(self.push(Cow::Owned(y), shape, op, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        Ok(self.push(Cow::Owned(out), shape, Op::Gelu { a }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let v = self.value(a);
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), vec![cols, rows], Op::Transpose { a, rows, cols }, rg))
    }

    /// Stacks rank-2 blocks vertically. Zero-row blocks are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows input"));
        };
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.push(Cow::Owned(out), vec![rows, cols], op, rg))
    }

    /// Joins rank-2 blocks side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols input"));
        };
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        let op = Op::ConcatCols {
            parts: parts.to_vec(),
            rows,
        };
        Ok(self.push(Cow::Owned(out), vec![rows, total], op, rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_rows")?;
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", &[rows, cols], &[start, end]));
        }
        let out = self.value(a)[start * cols..end * cols].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), vec![end - start, cols], Op::SliceRows { a, start, cols }, rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", &[rows, cols], &[start, end]));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[a]);
        let op = Op::SliceCols {
            a,
            start,
            rows,
            cols,
        };
        Ok(self.push(Cow::Owned(out), vec![rows, end - start], op, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape { a }, rg))
    }

    /// Mean of squared differences; differentiable in both arguments.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::Empty("prediction in mse_loss"));
        }
        let s: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(&[pred, target]);
        let v = s / T::lit(n as f64);
        Ok(self.push(Cow::Owned(vec![v]), vec![1], Op::MseLoss { a: pred, b: target }, rg))
    }

    /// Propagates `∂loss/∂·` to every trainable node reachable from `loss`.
    ///
    /// Afterwards [`GradTape::grad`] answers for trainable leaves; frozen
    /// leaves never hold a gradient. A tape can be consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        // only leaves keep gradients; intermediates were taken above
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &[T] { &nodes[v.0].value };
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    acc(a, kernels::gemm_nt(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::gemm_tn(val(a), g, m, k, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if needs(a) {
                    acc(a, kernels::gemm(g, val(b), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::gemm_tn(g, val(a), m, n, k));
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(b) {
                    acc(b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddRow { a, row, cols } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
                if needs(row) {
                    let mut r = vec![T::zero(); cols];
                    for (i, &x) in g.iter().enumerate() {
                        r[i % cols] = r[i % cols] + x;
                    }
                    acc(row, r);
                }
            }
            &Op::Scale { a, c } => {
                if needs(a) {
                    acc(a, g.iter().map(|&x| x * c).collect());
                }
            }
            &Op::Shift { a } | &Op::Reshape { a } => {
                if needs(a) {
                    acc(a, g.to_vec());
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    acc(a, vec![g[0]; val(a).len()]);
                }
            }
            &Op::Mean { a } => {
                if needs(a) {
                    let n = val(a).len();
                    acc(a, vec![g[0] / T::lit(n as f64); n]);
                }
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if needs(a) {
                    let y = &nodes[idx].value;
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    acc(a, d);
                }
            }
            &Op::MaskedSoftmax { a, cols } => {
                if needs(a) {
                    // masked entries have y == 0, so they receive zero gradient
                    let y = &nodes[idx].value;
                    let mut d = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot = kernels::dot(gr, yr);
                        for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    acc(a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let gam = val(gamma);
                if needs(x) {
                    let n = T::lit(cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[c];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            dx[span.start + c] = rs * (dh - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(x, dx);
                }
                if needs(gamma) {
                    let mut dg = vec![T::zero(); cols];
                    for (i, (&gv, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                        dg[i % cols] = dg[i % cols] + gv * h;
                    }
                    acc(gamma, dg);
                }
                if needs(beta) {
                    let mut db = vec![T::zero(); cols];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % cols] = db[i % cols] + gv;
                    }
                    acc(beta, db);
                }
            }
            &Op::Gelu { a } => {
                if needs(a) {
                    acc(
                        a,
                        g.iter()
                            .zip(val(a))
                            .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                            .collect(),
                    );
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if needs(a) {
                    // g is [cols × rows]
                    let mut d = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] = g[c * rows + r];
                        }
                    }
                    acc(a, d);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        acc(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total = g.len() / (*rows).max(1);
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            d.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        acc(p, d);
                    }
                    start += w;
                }
            }
            &Op::SliceRows { a, start, cols } => {
                if needs(a) {
                    let mut d = vec![T::zero(); val(a).len()];
                    d[start * cols..start * cols + g.len()].copy_from_slice(g);
                    acc(a, d);
                }
            }
            &Op::SliceCols {
                a,
                start,
                rows,
                cols,
            } => {
                if needs(a) {
                    let w = if rows == 0 { 0 } else { g.len() / rows };
                    let mut d = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(a, d);
                }
            }
            &Op::MseLoss { a, b } => {
                let n = T::lit(val(a).len() as f64);
                let two = T::lit(2.0);
                let diff: Vec<T> = val(a)
                    .iter()
                    .zip(val(b))
                    .map(|(&p, &t)| two * (p - t) / n * g[0])
                    .collect();
                if needs(b) {
                    acc(b, diff.iter().map(|&x| -x).collect());
                }
                if needs(a) {
                    acc(a, diff);
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b = *b + c),
        slot @ None => *slot = Some(contrib),
    }
}
