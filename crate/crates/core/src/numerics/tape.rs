//! Per-call reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so walking the node list backwards
//! from the output is a valid reverse topological order and each node is
//! visited exactly once.

use rand::Rng;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Real, Tensor};
use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    CausalMask(Var),
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, norm: T },
    Mse { pred: Var, target: Vec<T>, weights: Vec<T>, norm: T },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Row { x: Var, r: usize },
    ConcatRows(Vec<Var>),
    Pick { x: Var, r: usize, c: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shapes<T: Real>(ts: &[&Tensor<T>]) -> String {
    ts.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(" vs ")
}

pub(crate) fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        if t.shape().len() != 2 {
            return Err(Error::Shape { op, shapes: format!("expected a matrix, got {:?}", t.shape()) });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", shapes: shapes(&[self.value(a), self.value(b)]) });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul_nt", shapes: shapes(&[self.value(a), self.value(b)]) });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op: "add", shapes: shapes(&[ta, tb]) });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `b[n]` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix("add_row", a)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.numel() != n {
            return Err(Error::Shape { op: "add_row", shapes: shapes(&[ta, tb]) });
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, &y) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape { op: "mul", shapes: shapes(&[ta, tb]) });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?;
        Ok(self.push(value, Op::Scale(a, s), &[a]))
    }

    /// Gathers rows of `table[V,d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding_lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "embedding_lookup",
                shapes: format!("id {bad} outside table {:?}", self.value(table).shape()),
            });
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix("layer_norm", x)?;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::Shape { op: "layer_norm", shapes: shapes(&[tx, tg, tb]) });
        }
        let eps = T::of(LN_EPS);
        let nn = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::of(gelu_parts(v.f64()).0)).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::Gelu(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape(), tx.data().iter().map(|v| v.tanh()).collect())?;
        Ok(self.push(value, Op::Tanh(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| T::of(sigmoid(v.f64()))).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::Sigmoid(x), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("softmax_rows", x)?;
        let tx = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            softmax_into(tx.row(r), &mut out[r * n..(r + 1) * n]);
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(x), &[x]))
    }

    /// Replaces entries above the diagonal of a square score matrix with a
    /// large negative constant.
    pub fn causal_masked_fill(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix("causal_masked_fill", x)?;
        if m != n {
            return Err(Error::Shape { op: "causal_masked_fill", shapes: format!("[{m}, {n}] not square") });
        }
        let mut data = self.value(x).data().to_vec();
        let fill = T::of(T::MASK_FILL);
        for r in 0..m {
            for v in &mut data[r * n + r + 1..(r + 1) * n] {
                *v = fill;
            }
        }
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::CausalMask(x), &[x]))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> =
            (0..tx.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Weighted mean over rows of `-log softmax(logits[t])[targets[t]]`.
    /// Rows with zero weight are ignored; an all-zero weight vector gives 0.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (m, n) = self.matrix("cross_entropy_rows", logits)?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy_rows",
                shapes: format!("logits [{m}, {n}] vs {} targets, {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().zip(weights).find(|(&t, &w)| w != T::zero() && t >= n).map(|(t, _)| t)
        {
            return Err(Error::Shape { op: "cross_entropy_rows", shapes: format!("target {bad} >= {n} classes") });
        }
        let tl = self.value(logits);
        let norm: T = weights.iter().copied().sum();
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for r in 0..m {
            if weights[r] == T::zero() {
                continue;
            }
            let p = &mut probs[r * n..(r + 1) * n];
            softmax_into(tl.row(r), p);
            let row = tl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += weights[r] * (lse - row[targets[r]]);
        }
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, norm };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Weighted mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let tp = self.value(pred);
        if target.len() != tp.numel() || weights.len() != tp.numel() {
            return Err(Error::Shape {
                op: "mse",
                shapes: format!("{:?} vs {} targets, {} weights", tp.shape(), target.len(), weights.len()),
            });
        }
        let norm: T = weights.iter().copied().sum();
        let total: T =
            tp.data().iter().zip(target).zip(weights).map(|((&p, &y), &w)| w * (p - y) * (p - y)).sum();
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let op = Op::Mse { pred, target: target.to_vec(), weights: weights.to_vec(), norm };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if start + len > n {
            return Err(Error::Shape { op: "slice_cols", shapes: format!("[{m}, {n}] cols {start}..{}", start + len) });
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape { op: "concat_cols", shapes: "no inputs".into() })?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::Shape { op: "concat_cols", shapes: format!("row counts {m} vs {pm}") });
            }
            n += pn;
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row `r` of `x` as a `[1, n]` matrix.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let (m, n) = self.matrix("row", x)?;
        if r >= m {
            return Err(Error::Shape { op: "row", shapes: format!("row {r} of [{m}, {n}]") });
        }
        let data = self.value(x).row(r).to_vec();
        Ok(self.push(Tensor::new(&[1, n], data)?, Op::Row { x, r }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape { op: "concat_rows", shapes: "no inputs".into() })?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::Shape { op: "concat_rows", shapes: format!("col counts {n} vs {pn}") });
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Scalar `x[r, c]`.
    pub fn pick(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let tx = self.value(x);
        if r >= tx.rows() || c >= tx.cols() {
            return Err(Error::Shape { op: "pick", shapes: format!("({r}, {c}) of {:?}", tx.shape()) });
        }
        let v = tx.at(r, c);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, r, c }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Populates gradients of every node reachable from the scalar `out`.
    /// Earlier gradients are cleared first.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if !self.nodes[out.0].value.is_scalar() {
            return Err(Error::NonScalar(self.nodes[out.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.nodes[out.0].value.set_grad(Some(vec![T::one()]));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad_mut().take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    fn with_grad(&mut self, v: Var, f: impl FnOnce(&Self, &mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut g = self.nodes[v.0].value.grad_mut().take().unwrap_or_else(|| vec![T::zero(); n]);
        f(self, &mut g);
        self.nodes[v.0].value.set_grad(Some(g));
    }

    fn propagate(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.with_grad(a, |t, ga| matmul_nt(g, t.value(b).data(), ga, m, n, k));
                self.with_grad(b, |t, gb| matmul_tn(t.value(a).data(), g, gb, k, m, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).rows();
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                self.with_grad(a, |t, ga| matmul_nn(g, t.value(b).data(), ga, m, n, k));
                self.with_grad(b, |t, gb| matmul_tn(g, t.value(a).data(), gb, n, m, k));
            }
            &Op::Add(a, b) => {
                self.with_grad(a, |_, ga| axpy(ga, g));
                self.with_grad(b, |_, gb| axpy(gb, g));
            }
            &Op::AddRow(a, b) => {
                let n = self.value(b).numel();
                self.with_grad(a, |_, ga| axpy(ga, g));
                self.with_grad(b, |_, gb| {
                    for row in g.chunks(n) {
                        axpy(gb, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                self.with_grad(a, |t, ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(t.value(b).data()) {
                        *o += gv * bv;
                    }
                });
                self.with_grad(b, |t, gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(t.value(a).data()) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.with_grad(a, |_, ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.with_grad(*table, |_, gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.value(*gamma).numel();
                let m = inv_std.len();
                self.with_grad(*gamma, |_, gg| {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                self.with_grad(*beta, |_, gb| {
                    for row in g.chunks(n) {
                        axpy(gb, row);
                    }
                });
                self.with_grad(*x, |t, gx| {
                    let gam = t.value(*gamma).data();
                    let nn = T::of(n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xhat[r * n + c];
                        }
                        for c in 0..n {
                            gx[r * n + c] +=
                                inv_std[r] / nn * (nn * dxhat[c] - s1 - xhat[r * n + c] * s2);
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                self.with_grad(x, |t, gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(t.value(x).data()) {
                        *o += gv * T::of(gelu_parts(xv.f64()).1);
                    }
                });
            }
            &Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.with_grad(x, |_, gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *o += gv * (T::one() - yv * yv);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.with_grad(x, |_, gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(&y) {
                        *o += gv * yv * (T::one() - yv);
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let n = self.nodes[i].value.cols();
                self.with_grad(x, |_, gx| {
                    for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::CausalMask(x) => {
                let n = self.value(x).cols();
                self.with_grad(x, |_, gx| {
                    for (r, (or, gr)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        axpy(&mut or[..=r], &gr[..=r]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.with_grad(*x, |_, gx| {
                    for ((o, &gv), &k) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * k;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs, norm } => {
                if *norm <= T::zero() {
                    return;
                }
                let n = self.value(*logits).cols();
                let up = g[0] / *norm;
                self.with_grad(*logits, |_, gl| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let c = up * w;
                        let row = &mut gl[r * n..(r + 1) * n];
                        for (o, &p) in row.iter_mut().zip(&probs[r * n..(r + 1) * n]) {
                            *o += c * p;
                        }
                        row[targets[r]] -= c;
                    }
                });
            }
            Op::Mse { pred, target, weights, norm } => {
                if *norm <= T::zero() {
                    return;
                }
                let c = T::of(2.0) * g[0] / *norm;
                self.with_grad(*pred, |t, gp| {
                    for (((o, &p), &y), &w) in gp.iter_mut().zip(t.value(*pred).data()).zip(target).zip(weights) {
                        *o += c * w * (p - y);
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).cols();
                let len = self.nodes[i].value.cols();
                self.with_grad(x, |_, gx| {
                    for (or, gr) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        axpy(&mut or[start..start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pn = self.value(p).cols();
                    self.with_grad(p, |_, gp| {
                        for (or, gr) in gp.chunks_mut(pn).zip(g.chunks(n)) {
                            axpy(or, &gr[offset..offset + pn]);
                        }
                    });
                    offset += pn;
                }
            }
            &Op::Row { x, r } => {
                let n = self.value(x).cols();
                self.with_grad(x, |_, gx| axpy(&mut gx[r * n..(r + 1) * n], g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.with_grad(p, |_, gp| axpy(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::Pick { x, r, c } => {
                let n = self.value(x).cols();
                self.with_grad(x, |_, gx| gx[r * n + c] += g[0]);
            }
            &Op::Sum(x) => {
                self.with_grad(x, |_, gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
        }
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn axpy<T: Real>(out: &mut [T], x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[1, 2], &[5.0, 7.0]));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn uniform_cross_entropy_is_log_v() {
        let v = 7;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, v]));
        let l = tape.cross_entropy_rows(x, &[3, 0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(l).data()[0] - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -0.2, 1.0, 2.0]));
        let l = tape.cross_entropy_rows(x, &[0, 1], &[1.0, 0.0]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn dropout_zero_is_identity_and_seeded_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 64], &[1.0; 64]));
        let mut r = rng::seeded(3);
        assert_eq!(tape.dropout(x, 0.0, &mut r).unwrap(), x);
        let a = tape.dropout(x, 0.5, &mut rng::seeded(9)).unwrap();
        let b = tape.dropout(x, 0.5, &mut rng::seeded(9)).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn causal_fill_masks_upper_triangle() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[3, 3]));
        let m = tape.causal_masked_fill(x).unwrap();
        let y = tape.softmax_rows(m).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(0, 0), 1.0);
        assert_eq!(v.at(0, 1), 0.0);
        assert!((v.at(1, 0) - 0.5).abs() < 1e-15);
        assert_eq!(v.at(1, 2), 0.0);
    }

    const OPS: usize = 21;

    /// Input shapes of primitive `op` for sizes `m`, `n`, `k`.
    fn shapes_for(op: usize, m: usize, n: usize, k: usize) -> Vec<[usize; 2]> {
        match op {
            0 => vec![[m, k], [k, n]],
            1 => vec![[m, k], [n, k]],
            2 | 4 | 16 | 18 => vec![[m, n], [m, n]],
            3 => vec![[m, n], [1, n]],
            7 => vec![[m, n], [1, n], [1, n]],
            12 => vec![[n, n]],
            _ => vec![[m, n]],
        }
    }

    /// `sum(w * op(inputs))` on a fresh tape, with the gradient of every input.
    fn probe(op: usize, inputs: &[Tensor<f64>], w: &[f64]) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let (m, n) = (inputs[0].rows(), inputs[0].cols());
        let weights: Vec<f64> = (0..m).map(|r| (r % 2) as f64 + 0.5).collect();
        let out = match op {
            0 => tape.matmul(v[0], v[1]),
            1 => tape.matmul_nt(v[0], v[1]),
            2 => tape.add(v[0], v[1]),
            3 => tape.add_row(v[0], v[1]),
            4 => tape.mul(v[0], v[1]),
            5 => tape.scale(v[0], 1.7),
            6 => tape.embedding(v[0], &[0, m - 1, 0]),
            7 => tape.layer_norm(v[0], v[1], v[2]),
            8 => tape.gelu(v[0]),
            9 => tape.tanh(v[0]),
            10 => tape.sigmoid(v[0]),
            11 => tape.softmax_rows(v[0]),
            12 => tape.causal_masked_fill(v[0]).and_then(|x| tape.softmax_rows(x)),
            13 => tape.cross_entropy_rows(v[0], &(0..m).map(|r| r % n).collect::<Vec<_>>(), &weights),
            14 => tape.mse(v[0], &vec![0.25; m * n], &vec![0.5; m * n]),
            15 => tape.slice_cols(v[0], 1, n - 1),
            16 => tape.concat_cols(&[v[0], v[1]]),
            17 => tape.row(v[0], m - 1),
            18 => tape.concat_rows(&[v[0], v[1]]),
            19 => tape.pick(v[0], m - 1, n - 1),
            _ => tape.sum(v[0]),
        }
        .unwrap();
        let numel = tape.value(out).numel();
        let wv = tape.constant(Tensor::new(tape.value(out).shape(), w[..numel].to_vec()).unwrap());
        let weighted = tape.mul(out, wv).unwrap();
        let total = tape.sum(weighted).unwrap();
        tape.backward(total).unwrap();
        let value = tape.value(total).data()[0];
        let grads = v.iter().zip(inputs).map(|(&x, t)| tape.grad(x).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();
        (value, grads)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_primitive_passes_gradcheck(op in 0..OPS, m in 1usize..4, n in 2usize..5, k in 1usize..4, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let mut inputs: Vec<Tensor<f64>> = shapes_for(op, m, n, k)
                .iter()
                .map(|s| Tensor::new(s, (0..s[0] * s[1]).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
                .collect();
            let w: Vec<f64> = (0..64).map(|_| r.random_range(-1.0..1.0)).collect();
            let (_, grads) = probe(op, &inputs, &w);
            let h = 1e-5;
            for i in 0..inputs.len() {
                for j in 0..inputs[i].numel() {
                    let x = inputs[i].data()[j];
                    inputs[i].data_mut()[j] = x + h;
                    let up = probe(op, &inputs, &w).0;
                    inputs[i].data_mut()[j] = x - h;
                    let down = probe(op, &inputs, &w).0;
                    inputs[i].data_mut()[j] = x;
                    let (a, fd) = (grads[i][j], (up - down) / (2.0 * h));
                    let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    prop_assert!(err < 1e-4, "op {} input {} entry {}: {} vs {}", op, i, j, a, fd);
                }
            }
        }

        #[test]
        fn softmax_rows_are_distributions(m in 1usize..5, n in 1usize..8, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[m, n], (0..m * n).map(|_| r.random_range(-30.0..30.0)).collect()).unwrap());
            let y = tape.softmax_rows(x).unwrap();
            for row in 0..m {
                let p = tape.value(y).row(row);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(p.iter().all(|&q| (0.0..=1.0).contains(&q)));
            }
        }
    }
}
