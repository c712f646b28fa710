//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse order and accumulates vector-Jacobian products.
//! Nodes are only differentiated when some input requires a gradient, so
//! constants (images, positional tables) cost nothing in the backward pass.

use crate::error::{MugError, Result};
use crate::tensor::{kernels, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        allowed: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    MeanRows {
        x: Var,
        rows: Vec<bool>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<T>,
        rows: Vec<bool>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations and their values.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`], as produced by [`Tape::backward`].
#[derive(Clone, Debug)]
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

    /// Adds `other` into `self` entry by entry.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => {
                        for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}

fn dim_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> MugError {
    MugError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and intermediate value.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(dim_err("matmul_bt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (m, n) = xv.dims2();
        if bv.numel() != n {
            return Err(dim_err("add_row_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| kernels::gelu(xv.data()[i]));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row softmax. `allowed`, when given, is a row-major `[m,n]` flag matrix;
    /// disallowed entries receive probability zero and no gradient.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if let Some(a) = &allowed {
            if a.len() != m * n {
                return Err(MugError::Dimension {
                    op: "softmax_rows mask",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![a.len()],
                });
            }
            if (0..m).any(|i| !a[i * n..(i + 1) * n].iter().any(|&f| f)) {
                return Err(MugError::Invalid("attention mask has an all-false row".into()));
            }
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row_mask = allowed.as_ref().map(|a| &a[i * n..(i + 1) * n]);
            kernels::softmax_row(&xv.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n], row_mask);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, allowed }, rg))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = xv.dims2();
        if gv.numel() != n || bv.numel() != n {
            return Err(dim_err("layer_norm_rows", xv, gv));
        }
        let mut out = vec![T::zero(); m * n];
        let mut xhat = vec![T::zero(); m * n];
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let (mean, rstd) = kernels::row_mean_rstd(row, eps);
            for j in 0..n {
                let h = (row[j] - mean) * rstd;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// `out[r] = x[index[r]]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if index.is_empty() {
            return Err(MugError::Invalid("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &r in &index {
            if r >= m {
                return Err(MugError::Invalid(format!("gather index {r} out of range for {m} rows")));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![index.len(), n], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows { x, index }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(dim_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if len == 0 || start + len > n {
            return Err(MugError::Invalid(format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean over all elements of the selected rows.
    pub fn mean_rows(&mut self, x: Var, rows: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if rows.len() != m {
            return Err(MugError::Dimension {
                op: "mean_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let count = rows.iter().filter(|&&r| r).count() * n;
        if count == 0 {
            return Err(MugError::Invalid("mean over zero rows".into()));
        }
        let mut s = T::zero();
        for i in (0..m).filter(|&i| rows[i]) {
            for &v in xv.row(i) {
                s += v;
            }
        }
        let out = Tensor::scalar(s / T::from_usize(count).unwrap());
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows { x, rows, count }, rg))
    }

    /// Mean squared error over the elements of the selected rows only.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, rows: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(dim_err("masked_mse", pv, target));
        }
        let value = crate::objectives::masked_mse_value(pv, target, &rows)?;
        let count = rows.iter().filter(|&&r| r).count() * pv.cols();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                rows,
                count,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, v) = lv.dims2();
        if labels.len() != m || mask.len() != m {
            return Err(MugError::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(MugError::Invalid("cross entropy with zero supervised tokens".into()));
        }
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            if labels[i] >= v {
                return Err(MugError::Invalid(format!("label {} out of range for {v} classes", labels[i])));
            }
            let row = lv.row(i);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[labels[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / T::from_usize(count).unwrap());
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(MugError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2();
                let n = bv.cols();
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(g, bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(av.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2();
                let n = bv.rows();
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_acc(g, bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::matmul_at_acc(g, av.data(), &mut db, m, n, k);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv.data()).map(|(&d, &y)| d * y).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av.data()).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = nodes[x.0].value.data();
                    accumulate(
                        grads,
                        *x,
                        g.iter().zip(xv).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect(),
                    );
                }
            }
            Op::Softmax { x, allowed } => {
                if wants(*x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for (i, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mut dot = T::zero();
                        for (&a, &b) in yr.iter().zip(gr) {
                            dot += a * b;
                        }
                        for j in 0..n {
                            if allowed.as_ref().is_none_or(|a| a[i * n + j]) {
                                dx[i * n + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = nodes[gamma.0].value.data();
                let n = gv.len();
                if wants(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![T::zero(); n];
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *beta, db);
                }
                if wants(*x) {
                    let nf = T::from_usize(n).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    for (i, (hr, gr)) in xhat.chunks(n).zip(g.chunks(n)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            dx[i * n + j] = rstd[i] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GatherRows { x, index } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let n = xv.cols();
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..n {
                            dx[src * n + j] += g[r * n + j];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    let w = pv.cols();
                    if wants(p) {
                        let mut dp = Vec::with_capacity(pv.numel());
                        for row in g.chunks(total) {
                            dp.extend_from_slice(&row[start..start + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let n = xv.cols();
                    let w = node.value.cols();
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (i, row) in g.chunks(w).enumerate() {
                        dx[i * n + start..i * n + start + w].copy_from_slice(row);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; nodes[x.0].value.numel()]);
                }
            }
            Op::MeanRows { x, rows, count } => {
                if wants(*x) {
                    let xv = &nodes[x.0].value;
                    let n = xv.cols();
                    let share = g[0] / T::from_usize(*count).unwrap();
                    let mut dx = vec![T::zero(); xv.numel()];
                    for (i, &sel) in rows.iter().enumerate() {
                        if sel {
                            dx[i * n..(i + 1) * n].fill(share);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                rows,
                count,
            } => {
                if wants(*pred) {
                    let pv = &nodes[pred.0].value;
                    let n = pv.cols();
                    let scale = T::lit(2.0) * g[0] / T::from_usize(*count).unwrap();
                    let mut dp = vec![T::zero(); pv.numel()];
                    for (i, &sel) in rows.iter().enumerate() {
                        if sel {
                            for j in i * n..(i + 1) * n {
                                dp[j] = scale * (pv.data()[j] - target[j]);
                            }
                        }
                    }
                    accumulate(grads, *pred, dp);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let v = nodes[logits.0].value.cols();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let mut dl = vec![T::zero(); probs.len()];
                    for (i, &sel) in mask.iter().enumerate() {
                        if sel {
                            for j in 0..v {
                                dl[i * v + j] = probs[i * v + j] * scale;
                            }
                            dl[i * v + labels[i]] -= scale;
                        }
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.to_vec();
                    perturbed[k].data_mut()[e] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|p| t.param(p)).collect();
                    let l = build(&mut t, &vs);
                    t.scalar(l)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn sample(shape: &[usize], salt: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt * 7919);
            ((h >> 11) % 2000) as f64 / 1000.0 - 1.0
        })
    }

    /// Weighted sum keeps the objective scalar with non-uniform upstream grads.
    fn weighted(t: &mut Tape<f64>, x: Var) -> Var {
        let shape = t.value(x).shape().to_vec();
        let w = t.constant(sample(&shape, 99));
        let p = t.mul(x, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn primitive_backwards_match_finite_differences() {
        let a = sample(&[3, 4], 1);
        let b = sample(&[4, 2], 2);
        let c = sample(&[5, 4], 3);
        let bias = sample(&[4], 4);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>, Vec<Tensor<f64>>)> = vec![
            ("matmul", Box::new(|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); weighted(t, y) }), vec![a.clone(), b.clone()]),
            ("matmul_bt", Box::new(|t, v| { let y = t.matmul_bt(v[0], v[1]).unwrap(); weighted(t, y) }), vec![a.clone(), c.clone()]),
            ("add_sub_mul", Box::new(|t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[1]).unwrap();
                weighted(t, m)
            }), vec![a.clone(), sample(&[3, 4], 5)]),
            ("row_bias_scale_shift", Box::new(|t, v| {
                let y = t.add_row_bias(v[0], v[1]).unwrap();
                let y = t.scale(y, 0.7);
                let y = t.add_scalar(y, 0.3);
                weighted(t, y)
            }), vec![a.clone(), bias.clone()]),
            ("gelu", Box::new(|t, v| { let y = t.gelu(v[0]); weighted(t, y) }), vec![a.clone()]),
            ("softmax", Box::new(|t, v| { let y = t.softmax_rows(v[0], None).unwrap(); weighted(t, y) }), vec![a.clone()]),
            ("softmax_causal", Box::new(|t, v| {
                let mask = (0..16).map(|i| i % 4 <= i / 4).collect();
                let y = t.softmax_rows(v[0], Some(mask)).unwrap();
                weighted(t, y)
            }), vec![sample(&[4, 4], 6)]),
            ("layer_norm", Box::new(|t, v| { let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-6).unwrap(); weighted(t, y) }),
                vec![a.clone(), sample(&[4], 7), sample(&[4], 8)]),
            ("gather_concat_slice", Box::new(|t, v| {
                let g = t.gather_rows(v[0], vec![2, 0, 2, 1]).unwrap();
                let cat = t.concat_rows(&[g, v[0]]).unwrap();
                let left = t.slice_cols(cat, 0, 1).unwrap();
                let right = t.slice_cols(cat, 1, 3).unwrap();
                let y = t.concat_cols(&[right, left]).unwrap();
                weighted(t, y)
            }), vec![a.clone()]),
            ("mean_rows", Box::new(|t, v| {
                let sq = t.mul(v[0], v[0]).unwrap();
                t.mean_rows(sq, vec![true, false, true]).unwrap()
            }), vec![a.clone()]),
            ("masked_mse", Box::new(move |t, v| {
                let target = sample(&[3, 4], 10);
                t.masked_mse(v[0], &target, vec![false, true, true]).unwrap()
            }), vec![a.clone()]),
            ("cross_entropy", Box::new(|t, v| {
                t.cross_entropy(v[0], &[1, 3, 0], &[true, false, true]).unwrap()
            }), vec![a.clone()]),
        ];
        for (name, f, inputs) in cases {
            let err = fd_check(f, &inputs);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn accumulation_is_additive() {
        let w = sample(&[4, 3], 11);
        let x = sample(&[2, 4], 12);
        let y = sample(&[5, 4], 13);
        let build = |t: &mut Tape<f64>, which: u8| {
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let yv = t.constant(y.clone());
            let l1 = {
                let h = t.matmul(xv, wv).unwrap();
                let h = t.gelu(h);
                t.sum(h)
            };
            let l2 = {
                let h = t.matmul(yv, wv).unwrap();
                let h = t.mul(h, h).unwrap();
                t.sum(h)
            };
            let loss = match which {
                0 => t.add(l1, l2).unwrap(),
                1 => l1,
                _ => l2,
            };
            (wv, loss)
        };
        let mut t = Tape::new();
        let (wv, loss) = build(&mut t, 0);
        let joint = t.backward(loss).unwrap().get(wv).unwrap().clone();

        let mut t1 = Tape::new();
        let (w1, l1) = build(&mut t1, 1);
        let mut g = t1.backward(l1).unwrap();
        let mut t2 = Tape::new();
        let (w2, l2) = build(&mut t2, 2);
        assert_eq!(w1, w2);
        g.accumulate(&t2.backward(l2).unwrap());
        assert_eq!(g.get(w1).unwrap().data(), joint.data());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.param(sample(&[6, 5], 20));
            let b = t.param(sample(&[5, 6], 21));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(c, None).unwrap();
            t.value(s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(sample(&[2, 2], 1));
        let b = t.param(sample(&[2, 2], 2));
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c);
        let g = t.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn clear_releases_nodes() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::zeros(&[8, 8]));
        let _ = t.gelu(a);
        assert_eq!(t.len(), 2);
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn causal_softmax_rejects_empty_rows() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::zeros(&[2, 2]));
        assert!(t.softmax_rows(a, Some(vec![true, false, false, false])).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::zeros(&[2, 2]));
        assert!(t.backward(a).is_err());
    }
}
