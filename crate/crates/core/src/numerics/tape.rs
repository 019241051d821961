//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Node
//! indices are therefore already a topological order, and [`Tape::backward`]
//! walks them once from the loss down to the leaves. Nodes that cannot reach a
//! `requires_grad` leaf are skipped entirely.

use super::tensor::{
    gelu_scalar, layer_norm_rows, matmul_into, matmul_nt_into, matmul_tn_acc, softmax_row_into, Tensor, LAYER_NORM_EPS,
};
use super::Real;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SqDist(Var, Var),
    NormalizeRows(Var, Vec<T>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// Gradients of the loss with respect to `requires_grad` leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of materialized leaf gradients.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered record of operations for one forward pass. Single-threaded.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::InvalidShape {
            op,
            detail: format!("expected a matrix, got {:?}", self.shape(v)),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n))
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a [m×k]`, `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul_nt", a)?;
        let (n, k2) = self.mat("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMulNT(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of `a [m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat("add_bias", a)?;
        if self.value(bias).len() != n || self.value(bias).rank() != 1 {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(&b) {
                *o = *o + x;
            }
        }
        let v = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_scalar(x).0);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.mat("softmax_rows", a)?;
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input contains NaN".into()));
        }
        let mut out = vec![T::zero(); x.len()];
        for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row_into(src, dst);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Layer norm over the last axis (eps fixed at 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xhat, inv_std) = layer_norm_rows(self.value(x).data(), d, T::from_f64(LAYER_NORM_EPS));
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat("slice_rows", a)?;
        if start + len > m {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                detail: format!("rows {start}..{} of {m}", start + len),
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data)?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat("slice_cols", a)?;
        if start + len > n {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                detail: format!("cols {start}..{} of {n}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let v = Tensor::new(vec![m, len], data)?;
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.mat("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.mat("concat_rows", p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.mat("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat("concat_cols", p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of a table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.mat("gather_rows", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("gather index {bad} out of {m} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(vec![indices.len(), n], data)?;
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// Pairwise squared Euclidean distances between rows of `a [m×d]` and `b [n×d]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.mat("sq_dist", a)?;
        let (n, d2) = self.mat("sq_dist", b)?;
        if d != d2 {
            return Err(shape_err("sq_dist", self.shape(a), self.shape(b)));
        }
        let out = sq_dist_values(self.value(a).data(), self.value(b).data(), m, n, d);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::SqDist(a, b), &[a, b]))
    }

    /// Scales each row to unit L2 norm; zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.mat("normalize_rows", a)?;
        let x = self.value(a);
        let mut norms = Vec::new();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::InvalidArgument("zero-norm vector under cosine metric".into()));
            }
            for v in row.iter_mut() {
                *v = *v / norm;
            }
            norms.push(norm);
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::NormalizeRows(a, norms), &[a]))
    }

    /// Sum over rows of `-log softmax(logits)[label]`, computed in fused
    /// log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.mat("cross_entropy", logits)?;
        if labels.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {m} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * n..(r + 1) * n];
            let (lse, _) = log_sum_exp(row);
            total = total + (lse - row[label]);
            softmax_row_into(row, &mut probs[r * n..(r + 1) * n]);
        }
        let v = Tensor::scalar(total);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad = true` that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            acc[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc[idx].take() else { continue };
            self.backprop_node(node, &g, &mut acc);
            // keep intermediate storage bounded; leaves are collected below
        }
        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (node.requires_grad, g) {
                    (true, Some(g)) => Tensor::new(node.value.shape().to_vec(), g).ok(),
                    (true, None) => Some(Tensor::zeros(node.value.shape().to_vec())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], acc: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = acc[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |s| add_into(s, g));
                send(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| add_into(s, g));
                send(*b, &mut |s| {
                    for (o, &x) in s.iter_mut().zip(g) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                send(*a, &mut |s| {
                    for ((o, &x), &y) in s.iter_mut().zip(g).zip(bv) {
                        *o = *o + x * y;
                    }
                });
                send(*b, &mut |s| {
                    for ((o, &x), &y) in s.iter_mut().zip(g).zip(av) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |s| {
                for (o, &x) in s.iter_mut().zip(g) {
                    *o = *o + x * *c;
                }
            }),
            Op::Square(a) => {
                let av = self.value(*a).data();
                let two = T::from_f64(2.0);
                send(*a, &mut |s| {
                    for ((o, &x), &v) in s.iter_mut().zip(g).zip(av) {
                        *o = *o + two * v * x;
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |s| {
                for o in s.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).last_dim();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = G · Bᵀ, dB = Aᵀ · G
                send(*a, &mut |s| {
                    let mut tmp = vec![T::zero(); m * k];
                    matmul_nt_into(g, bv, &mut tmp, m, n, k);
                    add_into(s, &tmp);
                });
                send(*b, &mut |s| matmul_tn_acc(av, g, s, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // C = A Bᵀ: dA = G · B, dB = Gᵀ · A
                send(*a, &mut |s| matmul_into(g, bv, s, m, n, k));
                send(*b, &mut |s| matmul_tn_acc(g, av, s, m, n, k));
            }
            Op::AddBias(a, bias) => {
                let n = self.value(*a).last_dim();
                send(*a, &mut |s| add_into(s, g));
                send(*bias, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                send(*a, &mut |s| {
                    for ((o, &x), &v) in s.iter_mut().zip(g).zip(av) {
                        *o = *o + x * gelu_scalar(v).1;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                send(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                let dn = T::from_usize(d);
                send(*x, &mut |s| {
                    for (r, (srow, grow)) in s.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            srow[j] = srow[j] + scale * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                });
                send(*gain, &mut |s| {
                    for (grow, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &gv), &h) in s.iter_mut().zip(grow).zip(xh) {
                            *o = *o + gv * h;
                        }
                    }
                });
                send(*bias, &mut |s| {
                    for grow in g.chunks(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = node.value.last_dim();
                send(*a, &mut |s| add_into(&mut s[start * n..start * n + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let len = node.value.last_dim();
                let n = self.value(*a).last_dim();
                send(*a, &mut |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, &mut |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    send(p, &mut |s| {
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            add_into(srow, &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::GatherRows(table, indices) => {
                let n = node.value.last_dim();
                send(*table, &mut |s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (m, d) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = T::from_f64(2.0);
                send(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = two * g[i * n + j];
                            for k in 0..d {
                                s[i * d + k] = s[i * d + k] + w * (av[i * d + k] - bv[j * d + k]);
                            }
                        }
                    }
                });
                send(*b, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let w = two * g[i * n + j];
                            for k in 0..d {
                                s[j * d + k] = s[j * d + k] + w * (bv[j * d + k] - av[i * d + k]);
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                let n = node.value.last_dim();
                let y = node.value.data();
                send(*a, &mut |s| {
                    for (r, (srow, grow)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let yrow = &y[r * n..(r + 1) * n];
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + (gv - yv * dot) / norms[r];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.value(*logits).last_dim();
                send(*logits, &mut |s| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let mut d = probs[r * n + j];
                            if j == label {
                                d = d - T::one();
                            }
                            s[r * n + j] = s[r * n + j] + g[0] * d;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

/// `(log Σ exp(x), max)` with max subtraction.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> (T, T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    (max + s.ln(), max)
}

pub(crate) fn sq_dist_values<T: Real>(a: &[T], b: &[T], m: usize, n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let br = &b[j * d..(j + 1) * d];
            out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::numerics::RngStream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient_is_textbook() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn squared_distance_is_flat_at_minimum() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let d = tape.sub(x, y).unwrap();
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matmul_sum_gradient_matches_row_sums() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        // frozen from a central finite-difference run with h = 1e-6
        assert_eq!(grads.get(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
        assert!(grads.get(b).is_none(), "constant leaves never get gradients");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.square(a);
        assert!(matches!(tape.backward(b), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_is_loud() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        let bias = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.add_bias(a, bias).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(tape.cross_entropy(l, &[3]).is_err());
    }

    fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
        rng.gaussian(shape)
    }

    // Each case builds a scalar from random inputs through one primitive and
    // compares the tape gradient against central differences.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = RngStream::new(7);
        type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| {
                let y = t.mul(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("add_bias", vec![vec![3, 2], vec![2]], |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("gelu", vec![vec![2, 5]], |t, v| {
                let y = t.gelu(v[0]);
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("softmax", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let y = t.softmax_rows(v[0])?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
            ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                let y = t.mul(y, v[3])?;
                Ok(t.sum(y))
            }),
            ("slices", vec![vec![4, 6]], |t, v| {
                let a = t.slice_rows(v[0], 1, 2)?;
                let b = t.slice_cols(v[0], 2, 2)?;
                let c = t.matmul(b, a)?;
                let c = t.square(c);
                Ok(t.sum(c))
            }),
            ("concat", vec![vec![2, 3], vec![1, 3], vec![3, 2]], |t, v| {
                let r = t.concat_rows(&[v[0], v[1]])?;
                let c = t.concat_cols(&[r, v[2]])?;
                let c = t.square(c);
                let s = t.sum(c);
                let m = t.mean(r);
                let p = t.mul(s, m)?;
                Ok(p)
            }),
            ("gather", vec![vec![4, 3], vec![3, 3]], |t, v| {
                let g = t.gather_rows(v[0], &[2, 0, 2])?;
                let y = t.mul(g, v[1])?;
                let y = t.square(y);
                Ok(t.sum(y))
            }),
            ("sq_dist", vec![vec![4, 3], vec![2, 3]], |t, v| {
                let d = t.sq_dist(v[0], v[1])?;
                let d = t.neg(d);
                t.cross_entropy(d, &[0, 1, 1, 0])
            }),
            ("normalize", vec![vec![3, 4], vec![2, 4]], |t, v| {
                let a = t.normalize_rows(v[0])?;
                let b = t.normalize_rows(v[1])?;
                let c = t.matmul_nt(a, b)?;
                let c = t.scale(c, 3.0);
                t.cross_entropy(c, &[1, 0, 1])
            }),
            ("mse", vec![vec![3, 3], vec![3, 3]], |t, v| t.mse(v[0], v[1])),
        ];
        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = check_gradients(&inputs, |tape, vars| build(tape, vars)).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "{name}: max relative error {:e}",
                report.max_rel_error
            );
        }
    }
}
