use std::sync::Arc;

use super::kernels::{gelu_derivative, gelu_scalar, layer_norm_row, rotary_row, softmax_in_place, RotaryTable};
use super::{matrix_dims, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::masks::MaskLayout;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct AttentionSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    layout: Arc<MaskLayout>,
    batch: usize,
    heads: usize,
    probs: Vec<F>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    MulConst(Var, Vec<F>),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<u32> },
    Rotary { x: Var, positions: Vec<usize>, table: Arc<RotaryTable<F>> },
    MaskedSoftmax { x: Var, layout: Arc<MaskLayout> },
    Attention(Box<AttentionSaved<F>>),
    CrossEntropy { logits: Var, targets: Vec<u32>, rows: Vec<usize>, probs: Vec<F> },
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Wengert list: values are recorded in execution order, which is a
/// topological order, and [`Tape::backward`] replays it in reverse.
///
/// A tape is confined to one thread; build one per forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf holding a copy of `value`.
    pub fn param(&mut self, value: &Tensor<F>) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{name} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m x k] x [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::Shape(format!("bias of {} for rows of {}", bv.numel(), xv.cols())));
        }
        let mut value = xv.clone();
        let n = bv.numel();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x w + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<F>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.numel() {
            return Err(Error::Shape(format!("{} factors for {} values", factors.len(), xv.numel())));
        }
        let data = xv.data().iter().zip(&factors).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_const", value, Op::MulConst(x, factors), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_scalar);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    /// Per-row layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::Shape(format!("layer norm params do not match width {d}")));
        }
        let mut value = Tensor::zeros(xv.shape());
        let mut mean = Vec::with_capacity(xv.rows());
        let mut rstd = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(d).zip(value.data_mut().chunks_exact_mut(d)) {
            let (m, r) = layer_norm_row(row, gv.data(), bv.data(), out);
            mean.push(m);
            rstd.push(r);
        }
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias])
    }

    /// Gathers rows `ids` of a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = matrix_dims(tv)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Rotary encoding of every head in `x` (`[N x heads*head_dim]`), row `i`
    /// at position `positions[i]`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], table: &Arc<RotaryTable<F>>) -> Result<Var> {
        let xv = self.value(x);
        if positions.len() != xv.rows() || !xv.cols().is_multiple_of(table.head_dim()) {
            return Err(Error::Shape("rotary positions or head width do not match input".into()));
        }
        if positions.iter().any(|&p| p > table.max_pos()) {
            return Err(Error::Domain("position beyond rotary table".into()));
        }
        let mut value = xv.clone();
        let d = xv.cols();
        for (row, &pos) in value.data_mut().chunks_exact_mut(d).zip(positions) {
            rotary_row(row, pos, table, false);
        }
        let op = Op::Rotary { x, positions: positions.to_vec(), table: Arc::clone(table) };
        self.push("rotary", value, op, &[x])
    }

    /// Softmax of each row of a `[T x T]` score matrix restricted to the
    /// layout's keys. Unlisted entries are exactly zero; an empty row is all zero.
    pub fn masked_softmax(&mut self, scores: Var, layout: &Arc<MaskLayout>) -> Result<Var> {
        let sv = self.value(scores);
        let (rows, cols) = matrix_dims(sv)?;
        let len = layout.len();
        if rows != len || cols != len {
            return Err(Error::Shape(format!("scores {rows}x{cols} for a layout of length {len}")));
        }
        let mut value = Tensor::zeros(sv.shape());
        let mut buf = Vec::new();
        for (t, keys) in layout.rows() {
            buf.clear();
            buf.extend(keys.iter().map(|&k| sv.data()[(t - 1) * len + k - 1]));
            softmax_in_place(&mut buf);
            for (&k, &p) in keys.iter().zip(&buf) {
                value.data_mut()[(t - 1) * len + k - 1] = p;
            }
        }
        let op = Op::MaskedSoftmax { x: scores, layout: Arc::clone(layout) };
        self.push("masked_softmax", value, op, &[scores])
    }

    /// Multi-head scaled dot-product attention restricted to `layout`.
    ///
    /// `q`, `k`, `v` are `[batch*T x d]` with sequences stacked along rows; the
    /// same layout applies to every sequence. Rows with no keys produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &Arc<MaskLayout>, batch: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let len = layout.len();
        let (nq, d) = matrix_dims(qv)?;
        let (nk, dk) = matrix_dims(kv)?;
        if nq != batch * len || nk != batch * len || vv.shape() != kv.shape() || dk != d {
            return Err(Error::Shape(format!(
                "attention over q {:?}, k {:?}, v {:?} with batch {batch} and length {len}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let nnz = layout.nnz();
        let mut probs = vec![F::zero(); batch * heads * nnz];
        let mut out = vec![F::zero(); nq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for (t, keys) in layout.rows() {
                if keys.is_empty() {
                    continue;
                }
                let qrow = (b * len + t - 1) * d;
                let off = layout.row_offset(t);
                for h in 0..heads {
                    let qh = &qd[qrow + h * dh..qrow + (h + 1) * dh];
                    let start = (b * heads + h) * nnz + off;
                    let p = &mut probs[start..start + keys.len()];
                    for (pe, &key) in p.iter_mut().zip(keys) {
                        let kr = (b * len + key - 1) * d + h * dh;
                        *pe = dot(qh, &kd[kr..kr + dh]) * scale;
                    }
                    softmax_in_place(p);
                    let oh = &mut out[qrow + h * dh..qrow + (h + 1) * dh];
                    for (&pe, &key) in p.iter().zip(keys) {
                        let vr = (b * len + key - 1) * d + h * dh;
                        for (o, &x) in oh.iter_mut().zip(&vd[vr..vr + dh]) {
                            *o += pe * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, d], out)?;
        let saved = AttentionSaved { q, k, v, layout: Arc::clone(layout), batch, heads, probs };
        self.push("attention", value, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Mean over `rows` of `-log softmax(logits[r])[targets[r]]`.
    ///
    /// `targets` has one entry per logits row; only the listed rows count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], rows: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = matrix_dims(lv)?;
        if rows.is_empty() {
            return Err(Error::Domain("cross entropy over an empty position set".into()));
        }
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = F::zero();
        for &r in rows {
            if r >= n {
                return Err(Error::Domain(format!("row {r} outside {n} logits rows")));
            }
            let target = targets[r] as usize;
            if target >= vocab {
                return Err(Error::Data(format!("target {target} outside vocabulary of {vocab}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum: F = row.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[target];
            probs.extend(row.iter().map(|&l| (l - lse).exp()));
        }
        let loss = total / F::from_usize(rows.len()).expect("count");
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), rows: rows.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Domain(format!("loss must be a scalar, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    F::gemm(m, n, k, g, false, bv.data(), true, F::one(), slot(grads, *a, m * k));
                }
                if self.wants(*b) {
                    F::gemm(k, m, n, av.data(), true, g, false, F::one(), slot(grads, *b, k * n));
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        add_into(slot(grads, *p, g.len()), g);
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    for (d, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += *f * gv;
                    }
                }
            }
            Op::MulConst(x, factors) => {
                if self.wants(*x) {
                    for ((d, &gv), &f) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(factors) {
                        *d += gv * f;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    for ((d, &gv), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_derivative(xi);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => self.layer_norm_backward(g, *x, *gain, *bias, mean, rstd, grads),
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let dt = slot(grads, *table, tv.numel());
                    for (&id, row) in ids.iter().zip(g.chunks_exact(d)) {
                        add_into(&mut dt[id as usize * d..(id as usize + 1) * d], row);
                    }
                }
            }
            Op::Rotary { x, positions, table } => {
                if self.wants(*x) {
                    let d = self.value(*x).cols();
                    let dx = slot(grads, *x, g.len());
                    let mut buf = vec![F::zero(); d];
                    for ((row, &pos), grow) in dx.chunks_exact_mut(d).zip(positions).zip(g.chunks_exact(d)) {
                        buf.copy_from_slice(grow);
                        rotary_row(&mut buf, pos, table, true);
                        add_into(row, &buf);
                    }
                }
            }
            Op::MaskedSoftmax { x, layout } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let len = layout.len();
                    let dx = slot(grads, *x, g.len());
                    for (t, keys) in layout.rows() {
                        let base = (t - 1) * len;
                        let dotp: F = keys.iter().map(|&k| y[base + k - 1] * g[base + k - 1]).sum();
                        for &k in keys {
                            let idx = base + k - 1;
                            dx[idx] += y[idx] * (g[idx] - dotp);
                        }
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(g, saved, grads),
            Op::CrossEntropy { logits, targets, rows, probs } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let vocab = lv.cols();
                    let scale = g[0] / F::from_usize(rows.len()).expect("count");
                    let dl = slot(grads, *logits, lv.numel());
                    for (&r, p) in rows.iter().zip(probs.chunks_exact(vocab)) {
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        for (d, &pv) in drow.iter_mut().zip(p) {
                            *d += scale * pv;
                        }
                        drow[targets[r] as usize] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for d in slot(grads, *x, self.value(*x).numel()).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        g: &[F],
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[F],
        rstd: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let d = xv.cols();
        let inv_d = F::one() / F::from_usize(d).expect("width");
        let mut xhat = vec![F::zero(); d];
        let mut dxhat = vec![F::zero(); d];
        for (r, (row, grow)) in xv.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
            for (xh, &v) in xhat.iter_mut().zip(row) {
                *xh = (v - mean[r]) * rstd[r];
            }
            if self.wants(gain) {
                let dg = slot(grads, gain, d);
                for ((o, &gy), &xh) in dg.iter_mut().zip(grow).zip(&xhat) {
                    *o += gy * xh;
                }
            }
            if self.wants(bias) {
                add_into(slot(grads, bias, d), grow);
            }
            if self.wants(x) {
                let mut mean_dxhat = F::zero();
                let mut mean_dxhat_xhat = F::zero();
                for i in 0..d {
                    dxhat[i] = grow[i] * gv[i];
                    mean_dxhat += dxhat[i];
                    mean_dxhat_xhat += dxhat[i] * xhat[i];
                }
                mean_dxhat *= inv_d;
                mean_dxhat_xhat *= inv_d;
                let dx = &mut slot(grads, x, xv.numel())[r * d..(r + 1) * d];
                for i in 0..d {
                    dx[i] += rstd[r] * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
        }
    }

    fn attention_backward(&self, g: &[F], s: &AttentionSaved<F>, grads: &mut [Option<Vec<F>>]) {
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let d = self.value(s.q).cols();
        let (heads, batch, layout) = (s.heads, s.batch, &s.layout);
        let len = layout.len();
        let dh = d / heads;
        let nnz = layout.nnz();
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut dp = Vec::new();
        for b in 0..batch {
            for (t, keys) in layout.rows() {
                if keys.is_empty() {
                    continue;
                }
                let qrow = (b * len + t - 1) * d;
                let off = layout.row_offset(t);
                for h in 0..heads {
                    let start = (b * heads + h) * nnz + off;
                    let p = &s.probs[start..start + keys.len()];
                    let gh = &g[qrow + h * dh..qrow + (h + 1) * dh];
                    dp.clear();
                    let mut weighted = F::zero();
                    for (&pe, &key) in p.iter().zip(keys) {
                        let kr = (b * len + key - 1) * d + h * dh;
                        let dpe = dot(gh, &vd[kr..kr + dh]);
                        weighted += pe * dpe;
                        dp.push(dpe);
                        for (o, &gv) in dv[kr..kr + dh].iter_mut().zip(gh) {
                            *o += pe * gv;
                        }
                    }
                    let qh = &qd[qrow + h * dh..qrow + (h + 1) * dh];
                    for ((&pe, &dpe), &key) in p.iter().zip(&dp).zip(keys) {
                        let ds = pe * (dpe - weighted) * scale;
                        let kr = (b * len + key - 1) * d + h * dh;
                        for i in 0..dh {
                            dq[qrow + h * dh + i] += ds * kd[kr + i];
                            dk[kr + i] += ds * qh[i];
                        }
                    }
                }
            }
        }
        for (var, delta) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.wants(var) {
                add_into(slot(grads, var, delta.len()), &delta);
            }
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn slot<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), data.clone()).ok()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient buffer of `v` out.
    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0)?.take()
    }
}
