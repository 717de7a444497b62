//! Progressive memory encoder: splits the cached features into long- and
//! short-term memory, compresses the long-term part segment by segment and
//! injects the compressed summary into the short-term tokens.

use rand::Rng;

use crate::blocks::{DecoderBlock, DecoderMasks, EncoderBlock};
use crate::config::ModelConfig;
use crate::error::{MatError, Result};
use crate::numerics::{AttnMask, Graph, Tensor, Var};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Long-term (`m_L × D`) and short-term (`m_S × D`) memory with validity
/// masks; `false` marks warm-up padding.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    pub long: Tensor<T>,
    pub short: Tensor<T>,
    pub valid_long: Vec<bool>,
    pub valid_short: Vec<bool>,
}

/// Splits a `(m_L + m_S) × D` window into consecutive long and short parts.
pub fn partition_memory<T: Scalar>(
    features: &Tensor<T>,
    valid: &[bool],
    long_len: usize,
    short_len: usize,
) -> Result<MemoryBank<T>> {
    let (t, _) = features.matrix_dims("partition_memory")?;
    if t != long_len + short_len || valid.len() != t {
        return Err(MatError::shape(
            "partition_memory",
            features.shape(),
            &[long_len + short_len, valid.len()],
        ));
    }
    if long_len == 0 || short_len == 0 {
        return Err(MatError::Config("memory lengths must be positive".into()));
    }
    Ok(MemoryBank {
        long: features.slice_rows(0, long_len)?,
        short: features.slice_rows(long_len, short_len)?,
        valid_long: valid[..long_len].to_vec(),
        valid_short: valid[long_len..].to_vec(),
    })
}

/// Output of segment-based compression.
#[derive(Clone, Debug)]
pub struct CompressedLongMemory {
    /// `M̂_L`, `N_s × D`, after the two encoder blocks.
    pub tokens: Var,
    /// `M_L^s`, `N_s × D`, the pooled per-segment summaries.
    pub segment_summaries: Var,
    /// `false` for segments made only of padding.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct ProgressiveMemoryEncoder {
    /// `Q_L`, `N_L × D`.
    pub long_queries: ParamId,
    /// Weight-shared decoder applied to every segment.
    pub compress: DecoderBlock,
    pub post: [EncoderBlock; 2],
    /// Causal decoder over the short-term tokens.
    pub enhance: DecoderBlock,
    num_segments: usize,
}

impl ProgressiveMemoryEncoder {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.num_segments == 0 || !cfg.long_len.is_multiple_of(cfg.num_segments) {
            return Err(MatError::Config(format!(
                "long_len {} is not divisible by num_segments {}",
                cfg.long_len, cfg.num_segments
            )));
        }
        let (d, h) = (cfg.d_model, cfg.heads);
        Ok(ProgressiveMemoryEncoder {
            long_queries: store.add("q_long", normal(&[cfg.long_queries, d], 1.0, rng)),
            compress: DecoderBlock::new("compress", d, h, store, rng),
            post: [
                EncoderBlock::new("post.0", d, h, store, rng),
                EncoderBlock::new("post.1", d, h, store, rng),
            ],
            enhance: DecoderBlock::new("enhance", d, h, store, rng),
            num_segments: cfg.num_segments,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    /// Queries each of the `N_s` segments with the shared decoder and `Q_L`,
    /// mean-pools every result over the query axis, then runs the two
    /// encoder blocks over the pooled sequence. Segments without a valid
    /// frame are summarised by a zero vector and marked invalid.
    pub fn compress_long_memory<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        long: Var,
        valid_long: &[bool],
        eps: T,
    ) -> Result<CompressedLongMemory> {
        let (m_l, d) = (g.shape(long)[0], g.shape(long)[1]);
        if m_l % self.num_segments != 0 || valid_long.len() != m_l {
            return Err(MatError::Config(format!(
                "long memory of {m_l} frames cannot form {} segments",
                self.num_segments
            )));
        }
        let seg = m_l / self.num_segments;
        // The query self-attention stage is identical for every segment.
        let queries = self
            .compress
            .self_stage(g, p, p.var(self.long_queries), None, eps)?;
        let mut pooled = Vec::with_capacity(self.num_segments);
        let mut valid = Vec::with_capacity(self.num_segments);
        for s in 0..self.num_segments {
            let seg_valid = &valid_long[s * seg..(s + 1) * seg];
            if !seg_valid.iter().any(|&v| v) {
                pooled.push(g.constant(Tensor::zeros(&[1, d])));
                valid.push(false);
                continue;
            }
            let memory = g.slice_rows(long, s * seg, seg)?;
            let mask = (!seg_valid.iter().all(|&v| v)).then_some(seg_valid);
            let f = self
                .compress
                .memory_stage(g, p, queries, memory, mask, None, eps)?;
            pooled.push(g.mean_rows(f)?);
            valid.push(true);
        }
        let summaries = g.concat_rows(&pooled)?;
        let mask = valid
            .iter()
            .any(|&v| !v)
            .then(|| AttnMask::self_padded(&valid, false));
        let mut x = summaries;
        for block in &self.post {
            x = block.forward(g, p, x, mask.as_ref(), eps)?;
        }
        Ok(CompressedLongMemory {
            tokens: x,
            segment_summaries: summaries,
            valid,
        })
    }

    /// Causal decoder over `short` with dense cross-attention to the
    /// compressed long-term tokens. Returns `M̂_S`, same length as `short`.
    #[allow(clippy::too_many_arguments)]
    pub fn enhance_short_memory<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        short: Var,
        valid_short: &[bool],
        compressed: &CompressedLongMemory,
        top_k: Option<usize>,
        eps: T,
    ) -> Result<Var> {
        let self_mask = AttnMask::self_padded(valid_short, true);
        let masks = DecoderMasks {
            query_self: Some(&self_mask),
            memory_valid: Some(&compressed.valid),
            top_k,
        };
        self.enhance
            .forward(g, p, short, compressed.tokens, masks, eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_is_an_exact_split() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = Tensor::new(vec![12, 2], data).unwrap();
        let valid = vec![true; 12];
        let bank = partition_memory(&x, &valid, 8, 4).unwrap();
        assert_eq!(bank.long, x.slice_rows(0, 8).unwrap());
        assert_eq!(bank.short, x.slice_rows(8, 4).unwrap());
        let joined = Tensor::concat_rows(&[&bank.long, &bank.short]).unwrap();
        assert_eq!(joined, x);
    }

    #[test]
    fn partition_rejects_wrong_length() {
        let x = Tensor::<f32>::zeros(&[11, 2]);
        let err = partition_memory(&x, &[true; 11], 8, 4).unwrap_err();
        assert!(matches!(err, MatError::Shape { .. }));
    }

    #[test]
    fn partition_requires_long_memory() {
        let x = Tensor::<f32>::zeros(&[4, 2]);
        assert!(partition_memory(&x, &[true; 4], 0, 4).is_err());
    }
}
