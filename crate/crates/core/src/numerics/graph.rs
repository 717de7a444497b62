//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and whatever it needs for the backward rule. Nodes only reference earlier
//! nodes, so the tape is always in topological order and [`Graph::backward`]
//! walks it once in reverse.

use crate::error::{MatError, Result};
use crate::numerics::tensor::{
    self, gemm_nn, gemm_nt, gemm_tn, interp_plan, layer_norm_stats, softmax_row, Tensor,
};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` = the query row may attend the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(MatError::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(AttnMask {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: position `i` sees `j` iff `j <= i`.
    pub fn causal(t: usize) -> Self {
        let allowed = (0..t * t).map(|ij| ij % t <= ij / t).collect();
        AttnMask {
            rows: t,
            cols: t,
            allowed,
        }
    }

    /// Every row sees exactly the valid keys.
    pub fn keys(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let allowed = (0..rows).flat_map(|_| key_valid.iter().copied()).collect();
        AttnMask {
            rows,
            cols,
            allowed,
        }
    }

    /// Self-attention over a padded sequence: valid keys only, except that a
    /// row may always see itself so padded rows stay well defined.
    pub fn self_padded(valid: &[bool], causal: bool) -> Self {
        let t = valid.len();
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                let in_range = !causal || j <= i;
                allowed[i * t + j] = in_range && (valid[j] || i == j);
            }
        }
        AttnMask {
            rows: t,
            cols: t,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Operation kinds, used to select a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    AddBias,
    Sub,
    Mul,
    Scale,
    Sum,
    Softmax,
    LayerNorm,
    Gelu,
    Attention,
    ConcatRows,
    SliceRows,
    MeanRows,
    Interpolate,
    CrossEntropy,
}

/// Per-row soft target: `(class, weight)` pairs.
pub type SoftTarget<T> = Vec<(usize, T)>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Attention weights, `heads × tq × tk`.
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    Interpolate(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<SoftTarget<T>>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(..) => OpKind::Sum,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Attention { .. } => OpKind::Attention,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Interpolate(..) => OpKind::Interpolate,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Attention weights captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub layer: String,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    /// `heads × queries × keys`, row-major.
    pub weights: Vec<T>,
}

/// Operation tape. Confined to one thread for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<(OpKind, T)>,
    attention_log: Option<Vec<AttentionRecord<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Log-probability floor used by the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-9;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
            attention_log: None,
        }
    }

    /// Multiplies the input gradients produced by every `kind` backward rule
    /// by `factor`. Only meant for gradient-check negative controls.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, T::lit(factor)));
    }

    /// Starts recording attention weights of every labelled attention call.
    pub fn record_attention(&mut self) {
        self.attention_log = Some(Vec::new());
    }

    pub fn take_attention_log(&mut self) -> Vec<AttentionRecord<T>> {
        self.attention_log.take().unwrap_or_default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MatError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`N` vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(MatError::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(x), mask)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(MatError::shape(
                "layer_norm",
                self.shape(x),
                self.shape(gamma),
            ));
        }
        let stats = layer_norm_stats(self.value(x).data(), d, eps);
        let mut out = stats.normed.clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed: stats.normed,
                rstd: stats.rstd,
            },
            rg,
        ))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_value);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention on already projected inputs.
    ///
    /// `q: Tq×D`, `k, v: Tk×D`. Heads split the channel axis into `heads`
    /// contiguous groups. With `top_k`, each row keeps only its `top_k`
    /// largest allowed logits (ties resolved towards the lower key index);
    /// rows with at most `top_k` allowed keys are left unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
        top_k: Option<usize>,
        label: &str,
    ) -> Result<Var> {
        let (tq, d) = self.value(q).matrix_dims("attention")?;
        let (tk, dk) = self.value(k).matrix_dims("attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(MatError::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(MatError::Argument(format!(
                "{d} channels cannot be split into {heads} heads"
            )));
        }
        if top_k == Some(0) {
            return Err(MatError::Argument("top_k must be positive".into()));
        }
        if let Some(m) = mask {
            if m.rows() != tq || m.cols() != tk {
                return Err(MatError::shape(
                    "attention mask",
                    &[tq, tk],
                    &[m.rows(), m.cols()],
                ));
            }
        }
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); tq * d];
        let mut probs = vec![T::zero(); heads * tq * tk];
        for h in 0..heads {
            let qh = head_slice(qv.data(), tq, d, h, hd);
            let kh = head_slice(kv.data(), tk, d, h, hd);
            let vh = head_slice(vv.data(), tk, d, h, hd);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm_nt(&qh, &kh, p, tq, hd, tk);
            for (i, row) in p.chunks_mut(tk).enumerate() {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                let mut allowed: Vec<bool> = match mask {
                    Some(m) => m.row(i).to_vec(),
                    None => vec![true; tk],
                };
                if let Some(kk) = top_k {
                    keep_top_k(row, &mut allowed, kk);
                }
                if !softmax_row(row, Some(&allowed)) {
                    return Err(MatError::Masking { row: i });
                }
            }
            let mut oh = vec![T::zero(); tq * hd];
            gemm_nn(p, &vh, &mut oh, tq, tk, hd);
            scatter_head(&oh, &mut out, tq, d, h, hd);
        }
        if let Some(log) = self.attention_log.as_mut() {
            if !label.is_empty() {
                log.push(AttentionRecord {
                    layer: label.to_string(),
                    heads,
                    queries: tq,
                    keys: tk,
                    weights: probs.clone(),
                });
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        let out = Tensor::new(vec![tq, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Mean over rows, `T×D → 1×D`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).matrix_dims("mean_rows")?;
        let inv = T::one() / T::lit(r as f64);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(a), rg))
    }

    pub fn interpolate(&mut self, a: Var, target_len: usize) -> Result<Var> {
        let out = tensor::interpolate_linear_1d(self.value(a), target_len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Interpolate(a), rg))
    }

    /// `−Σᵢ wᵢ · log(probs[i][labelᵢ])` with optional per-row weights.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        labels: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var> {
        if let Some(w) = weights {
            if w.len() != labels.len() {
                return Err(MatError::shape(
                    "cross_entropy",
                    &[labels.len()],
                    &[w.len()],
                ));
            }
        }
        let targets = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| vec![(c, weights.map_or(T::one(), |w| w[i]))])
            .collect();
        self.soft_cross_entropy(probs, targets)
    }

    /// Cross-entropy against per-row weighted label sets:
    /// `−Σᵢ Σ_(c,w) w · log(probs[i][c])`.
    pub fn soft_cross_entropy(&mut self, probs: Var, targets: Vec<SoftTarget<T>>) -> Result<Var> {
        let (rows, classes) = self.value(probs).matrix_dims("cross_entropy")?;
        if targets.len() != rows {
            return Err(MatError::shape(
                "cross_entropy",
                &[rows, classes],
                &[targets.len()],
            ));
        }
        let floor = T::lit(PROB_FLOOR);
        let p = self.value(probs);
        let mut loss = T::zero();
        for (i, row) in targets.iter().enumerate() {
            for &(c, w) in row {
                if c >= classes {
                    return Err(MatError::Label {
                        index: i,
                        label: c,
                        max: classes - 1,
                    });
                }
                if w != T::zero() {
                    loss -= w * p.data()[i * classes + c].max(floor).ln();
                }
            }
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { probs, targets },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(MatError::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(dout);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let factor = match (self.fault, node.op.kind()) {
                (Some((k, f)), Some(kind)) if k == kind => Some(f),
                _ => None,
            };
            let mut acc = |v: Var, g: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                let g = match factor {
                    Some(f) => g.into_iter().map(|x| x * f).collect(),
                    None => g,
                };
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.iter_mut().zip(g) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            self.backward_node(node, &dout, &mut grads, &mut acc);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dout: &[T],
        grads: &mut Vec<Option<Vec<T>>>,
        acc: &mut impl FnMut(Var, Vec<T>, &mut Vec<Option<Vec<T>>>),
    ) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(dout, self.value(*b).data(), &mut da, m, n, k);
                    acc(*a, da, grads);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a).data(), dout, &mut db, m, k, n);
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dout.to_vec(), grads);
                acc(*b, dout.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dout.to_vec(), grads);
                acc(*b, dout.iter().map(|&x| -x).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(
                    *a,
                    dout.iter().zip(vb).map(|(&g, &y)| g * y).collect(),
                    grads,
                );
                acc(
                    *b,
                    dout.iter().zip(va).map(|(&g, &x)| g * x).collect(),
                    grads,
                );
            }
            Op::AddBias(a, bias) => {
                acc(*a, dout.to_vec(), grads);
                let n = self.value(*bias).numel();
                let mut db = vec![T::zero(); n];
                for row in dout.chunks(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                acc(*bias, db, grads);
            }
            Op::Scale(a, s) => acc(*a, dout.iter().map(|&g| g * *s).collect(), grads),
            Op::Sum(a) => acc(*a, vec![dout[0]; self.value(*a).numel()], grads),
            Op::Softmax(x) => {
                let p = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![T::zero(); p.len()];
                for ((dxr, pr), gr) in dx.chunks_mut(n).zip(p.chunks(n)).zip(dout.chunks(n)) {
                    softmax_backward_row(pr, gr, dxr);
                }
                acc(*x, dx, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = node.value.cols();
                let g = self.value(*gamma).data();
                if rg(*gamma) || rg(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, nr) in dout.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * nr[j];
                            db[j] += gr[j];
                        }
                    }
                    acc(*gamma, dg, grads);
                    acc(*beta, db, grads);
                }
                if rg(*x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dx = vec![T::zero(); dout.len()];
                    for (r, ((dxr, gr), nr)) in dx
                        .chunks_mut(d)
                        .zip(dout.chunks(d))
                        .zip(normed.chunks(d))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gy = gr[j] * g[j];
                            s1 += gy;
                            s2 += gy * nr[j];
                        }
                        for j in 0..d {
                            let gy = gr[j] * g[j];
                            dxr[j] = rstd[r] * (gy - inv_d * s1 - nr[j] * inv_d * s2);
                        }
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    dout.iter()
                        .zip(xv)
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect(),
                    grads,
                );
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, dout, grads, acc),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, dout[off..off + n].to_vec(), grads);
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let c = src.cols();
                let mut da = vec![T::zero(); src.numel()];
                da[start * c..start * c + dout.len()].copy_from_slice(dout);
                acc(*a, da, grads);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let (r, c) = (src.rows(), src.cols());
                let inv = T::one() / T::lit(r as f64);
                let row: Vec<T> = dout.iter().map(|&g| g * inv).collect();
                let da = (0..r).flat_map(|_| row.iter().copied()).collect();
                debug_assert_eq!(row.len(), c);
                acc(*a, da, grads);
            }
            Op::Interpolate(a) => {
                let src = self.value(*a);
                let (n, c) = (src.rows(), src.cols());
                let target = node.value.rows();
                let mut da = vec![T::zero(); n * c];
                for (i, (j, w)) in interp_plan(n, target).into_iter().enumerate() {
                    let g = &dout[i * c..(i + 1) * c];
                    if w == 0.0 {
                        for (d, &x) in da[j * c..(j + 1) * c].iter_mut().zip(g) {
                            *d += x;
                        }
                    } else {
                        let (wl, wh) = (T::lit(1.0 - w), T::lit(w));
                        for ch in 0..c {
                            da[j * c + ch] += wl * g[ch];
                            da[(j + 1) * c + ch] += wh * g[ch];
                        }
                    }
                }
                acc(*a, da, grads);
            }
            Op::CrossEntropy { probs, targets } => {
                let p = self.value(*probs);
                let classes = p.cols();
                let floor = T::lit(PROB_FLOOR);
                let mut dp = vec![T::zero(); p.numel()];
                for (i, row) in targets.iter().enumerate() {
                    for &(c, w) in row {
                        let pv = p.data()[i * classes + c];
                        if pv > floor {
                            dp[i * classes + c] -= dout[0] * w / pv;
                        }
                    }
                }
                acc(*probs, dp, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        dout: &[T],
        grads: &mut Vec<Option<Vec<T>>>,
        acc: &mut impl FnMut(Var, Vec<T>, &mut Vec<Option<Vec<T>>>),
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut dq = vec![T::zero(); tq * d];
        let mut dk = vec![T::zero(); tk * d];
        let mut dv = vec![T::zero(); tk * d];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            let qh = head_slice(qv.data(), tq, d, h, hd);
            let kh = head_slice(kv.data(), tk, d, h, hd);
            let vh = head_slice(vv.data(), tk, d, h, hd);
            let doh = head_slice(dout, tq, d, h, hd);

            let mut dvh = vec![T::zero(); tk * hd];
            gemm_tn(p, &doh, &mut dvh, tq, tk, hd);
            let mut dp = vec![T::zero(); tq * tk];
            gemm_nt(&doh, &vh, &mut dp, tq, hd, tk);
            let mut ds = vec![T::zero(); tq * tk];
            for ((dsr, pr), gr) in ds.chunks_mut(tk).zip(p.chunks(tk)).zip(dp.chunks(tk)) {
                softmax_backward_row(pr, gr, dsr);
                for x in dsr.iter_mut() {
                    *x *= scale;
                }
            }
            let mut dqh = vec![T::zero(); tq * hd];
            gemm_nn(&ds, &kh, &mut dqh, tq, tk, hd);
            let mut dkh = vec![T::zero(); tk * hd];
            gemm_tn(&ds, &qh, &mut dkh, tq, tk, hd);

            scatter_head(&dqh, &mut dq, tq, d, h, hd);
            scatter_head(&dkh, &mut dk, tk, d, h, hd);
            scatter_head(&dvh, &mut dv, tk, d, h, hd);
        }
        acc(q, dq, grads);
        acc(k, dk, grads);
        acc(v, dv, grads);
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; zeros when the leaf did not influence the loss.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v).to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(Option::as_deref)
    }
}

fn softmax_backward_row<T: Scalar>(p: &[T], g: &[T], dx: &mut [T]) {
    let s: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &pv), &gv) in dx.iter_mut().zip(p).zip(g) {
        *d = pv * (gv - s);
    }
}

/// Masks all but the `k` largest allowed logits of a row. Equal logits keep
/// the lower index first.
fn keep_top_k<T: Scalar>(row: &[T], allowed: &mut [bool], k: usize) {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| allowed[j]).collect();
    if idx.len() <= k {
        return;
    }
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &j in &idx[k..] {
        allowed[j] = false;
    }
}

fn head_slice<T: Scalar>(x: &[T], rows: usize, d: usize, h: usize, hd: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * hd);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * hd..r * d + (h + 1) * hd]);
    }
    out
}

fn scatter_head<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, d: usize, h: usize, hd: usize) {
    for r in 0..rows {
        for (o, &s) in dst[r * d + h * hd..r * d + (h + 1) * hd]
            .iter_mut()
            .zip(&src[r * hd..(r + 1) * hd])
        {
            *o += s;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
