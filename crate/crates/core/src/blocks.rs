//! Pre-norm transformer building blocks.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{AttnMask, Graph, Tensor, Var};
use crate::params::{normal, xavier, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    name: String,
}

impl AttentionParams {
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        d: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && d.is_multiple_of(heads),
            "{d} channels, {heads} heads"
        );
        let mut proj = |p: &str| store.add(format!("{name}.{p}"), xavier(d, d, rng));
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            heads,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn head_dim<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.wq).shape()[0] / self.heads
    }
}

/// Scaled dot-product attention of `query` over `key_value`, split into
/// heads, concatenated and output-projected.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &AttentionParams,
    query: Var,
    key_value: Var,
    mask: Option<&AttnMask>,
    top_k: Option<usize>,
) -> Result<Var> {
    let q = g.matmul(query, p.var(params.wq))?;
    let k = g.matmul(key_value, p.var(params.wk))?;
    let v = g.matmul(key_value, p.var(params.wv))?;
    let heads = g.attention(q, k, v, params.heads, mask, top_k, &params.name)?;
    g.matmul(heads, p.var(params.wo))
}

/// `T×T` causal mask: position `i` attends `j` iff `j <= i`.
pub fn causal_mask(t: usize) -> AttnMask {
    AttnMask::causal(t)
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(name: &str, d: usize, store: &mut ParamStore<T>) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, eps: T) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), eps)
    }
}

/// `D → 4D → D` with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const FFN_EXPANSION: usize = 4;

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let hidden = d * FFN_EXPANSION;
        FeedForward {
            w1: store.add(format!("{name}.w1"), xavier(d, hidden, rng)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{name}.w2"), xavier(hidden, d, rng)),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.w1))?;
        let h = g.add_bias(h, p.var(self.b1))?;
        let h = g.gelu(h);
        let out = g.matmul(h, p.var(self.w2))?;
        g.add_bias(out, p.var(self.b2))
    }
}

/// Self-attention + feed-forward, pre-norm residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub ffn: FeedForward,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        d: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            attn: AttentionParams::new(&format!("{name}.attn"), d, heads, store, rng),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, store, rng),
            ln1: LayerNormParams::new(&format!("{name}.ln1"), d, store),
            ln2: LayerNormParams::new(&format!("{name}.ln2"), d, store),
        }
    }

    /// `x + SelfAttn(LN(x))`, then `+ FFN(LN(·))`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mask: Option<&AttnMask>,
        eps: T,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, p, x, eps)?;
        let a = multi_head_attention(g, p, &self.attn, n, n, mask, None)?;
        let h = g.add(x, a)?;
        let n = self.ln2.forward(g, p, h, eps)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(h, f)
    }
}

/// Self-attention over the queries, cross-attention to a memory sequence,
/// then feed-forward; pre-norm residual throughout.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForward,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ln3: LayerNormParams,
}

/// Mask and sparsity options for one decoder call.
#[derive(Clone, Copy, Debug, Default)]
pub struct DecoderMasks<'a> {
    pub query_self: Option<&'a AttnMask>,
    /// Valid memory positions; `None` means all valid. When no position is
    /// valid the cross-attention sublayer is skipped.
    pub memory_valid: Option<&'a [bool]>,
    pub top_k: Option<usize>,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        d: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        DecoderBlock {
            self_attn: AttentionParams::new(&format!("{name}.self"), d, heads, store, rng),
            cross_attn: AttentionParams::new(&format!("{name}.cross"), d, heads, store, rng),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, store, rng),
            ln1: LayerNormParams::new(&format!("{name}.ln1"), d, store),
            ln2: LayerNormParams::new(&format!("{name}.ln2"), d, store),
            ln3: LayerNormParams::new(&format!("{name}.ln3"), d, store),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        memory: Var,
        masks: DecoderMasks<'_>,
        eps: T,
    ) -> Result<Var> {
        let h = self.self_stage(g, p, query, masks.query_self, eps)?;
        self.memory_stage(g, p, h, memory, masks.memory_valid, masks.top_k, eps)
    }

    /// `query + SelfAttn(LN(query))`. Depends only on the queries, so callers
    /// that query several memories with the same tokens can share it.
    pub fn self_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        query: Var,
        mask: Option<&AttnMask>,
        eps: T,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, p, query, eps)?;
        let a = multi_head_attention(g, p, &self.self_attn, n, n, mask, None)?;
        g.add(query, a)
    }

    /// Cross-attention and feed-forward sublayers on the output of
    /// [`DecoderBlock::self_stage`].
    #[allow(clippy::too_many_arguments)]
    pub fn memory_stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        h: Var,
        memory: Var,
        memory_valid: Option<&[bool]>,
        top_k: Option<usize>,
        eps: T,
    ) -> Result<Var> {
        let rows = g.shape(h)[0];
        let mask = memory_valid.map(|v| AttnMask::keys(rows, v));
        let skip = memory_valid.is_some_and(|v| !v.iter().any(|&b| b));
        let h = if skip {
            h
        } else {
            let n = self.ln2.forward(g, p, h, eps)?;
            let a = multi_head_attention(g, p, &self.cross_attn, n, memory, mask.as_ref(), top_k)?;
            g.add(h, a)?
        };
        let n = self.ln3.forward(g, p, h, eps)?;
        let f = self.ffn.forward(g, p, n)?;
        g.add(h, f)
    }
}

/// Learned absolute positional table, one row per memory slot.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub table: ParamId,
    pub max_len: usize,
}

impl PositionalEmbedding {
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        max_len: usize,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        PositionalEmbedding {
            table: store.add(name, normal(&[max_len, d], 0.1, rng)),
            max_len,
        }
    }

    /// Adds rows `0..len` of the table to `x`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let pos = g.slice_rows(p.var(self.table), 0, len)?;
        g.add(x, pos)
    }
}
