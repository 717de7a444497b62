//! Memory-anticipation circular decoder.
//!
//! Latent anticipation tokens are generated from the whole memory, then the
//! short-term memory and the anticipation stream update each other for a
//! fixed number of rounds. Every intermediate is kept for deep supervision.

use rand::Rng;

use crate::blocks::{DecoderBlock, DecoderMasks};
use crate::config::ModelConfig;
use crate::error::{MatError, Result};
use crate::memory_encoder::CompressedLongMemory;
use crate::numerics::{AttnMask, Graph, Var};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Learnable future queries: `Q_F` (`N_F × D`) and, with renewal, `Q_F′`
/// (`N_F′ × D`).
#[derive(Clone, Debug)]
pub struct FutureQueryBank {
    pub latent: ParamId,
    pub renewed: Option<ParamId>,
}

/// The pair of decoder blocks of one interaction round.
#[derive(Clone, Debug)]
pub struct InteractionBlocks {
    pub short: DecoderBlock,
    pub future: DecoderBlock,
}

/// Every supervised decoder intermediate.
#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    /// `M̂_S′` after each round.
    pub short_per_round: Vec<Var>,
    /// Latent anticipation `F_A`, `N_F × D`.
    pub future_initial: Var,
    /// `F_A′` after each round.
    pub future_per_round: Vec<Var>,
}

/// Tensors of one interaction round, including both concatenations.
#[derive(Clone, Debug)]
pub struct RoundOutputs {
    pub short: Var,
    pub future: Var,
    /// `[M̂_L, M̂_S, F_A]`.
    pub full: Var,
    /// `[M̂_L, M̂_S′, F_A]`.
    pub full_updated: Var,
}

/// Memory state shared by every decoder stage of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MemoryContext<'a> {
    pub compressed: &'a CompressedLongMemory,
    pub short_valid: &'a [bool],
    /// Applied to cross-attention from the short-term stream.
    pub top_k: Option<usize>,
}

impl MemoryContext<'_> {
    fn memory_valid(&self) -> Vec<bool> {
        let mut v = self.compressed.valid.clone();
        v.extend_from_slice(self.short_valid);
        v
    }

    fn full_valid(&self, future_len: usize) -> Vec<bool> {
        let mut v = self.memory_valid();
        v.extend(std::iter::repeat_n(true, future_len));
        v
    }
}

#[derive(Clone, Debug)]
pub struct CircularDecoder {
    pub queries: FutureQueryBank,
    pub latent: DecoderBlock,
    pub rounds: Vec<InteractionBlocks>,
    renewal: bool,
    future_steps: usize,
}

impl CircularDecoder {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.renewal > 1 {
            return Err(MatError::Config(format!(
                "renewal must be 0 or 1, got {}",
                cfg.renewal
            )));
        }
        let (d, h) = (cfg.d_model, cfg.heads);
        let renewal = cfg.renewal == 1 && cfg.rounds > 0;
        let latent = store.add("q_future", normal(&[cfg.future_queries, d], 1.0, rng));
        let renewed = renewal.then(|| {
            store.add(
                "q_future_renewed",
                normal(&[cfg.future_steps(), d], 1.0, rng),
            )
        });
        let latent_block = DecoderBlock::new("latent", d, h, store, rng);
        let rounds = (0..cfg.rounds)
            .map(|r| InteractionBlocks {
                short: DecoderBlock::new(&format!("round.{r}.short"), d, h, store, rng),
                future: DecoderBlock::new(&format!("round.{r}.future"), d, h, store, rng),
            })
            .collect();
        Ok(CircularDecoder {
            queries: FutureQueryBank { latent, renewed },
            latent: latent_block,
            rounds,
            renewal,
            future_steps: cfg.future_steps(),
        })
    }

    pub fn future_steps(&self) -> usize {
        self.future_steps
    }

    /// `F_A`: the latent queries read `M_E = [M̂_L, M̂_S]`.
    pub fn generate_latent_anticipation<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: MemoryContext<'_>,
        enhanced: Var,
        eps: T,
    ) -> Result<Var> {
        let memory = g.concat_rows(&[ctx.compressed.tokens, enhanced])?;
        let valid = ctx.memory_valid();
        let masks = DecoderMasks {
            query_self: None,
            memory_valid: Some(&valid),
            top_k: None,
        };
        self.latent
            .forward(g, p, p.var(self.queries.latent), memory, masks, eps)
    }

    /// One conditional interaction: the short-term stream reads
    /// `[M̂_L, M̂_S, F_A]`, then the anticipation stream reads
    /// `[M̂_L, M̂_S′, F_A]`.
    #[allow(clippy::too_many_arguments)]
    pub fn interaction_round<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        round: usize,
        ctx: MemoryContext<'_>,
        short: Var,
        future: Var,
        eps: T,
    ) -> Result<RoundOutputs> {
        let blocks = self
            .rounds
            .get(round)
            .ok_or_else(|| MatError::Argument(format!("round {round} does not exist")))?;
        let future_len = g.shape(future)[0];
        let valid = ctx.full_valid(future_len);
        let short_self = AttnMask::self_padded(ctx.short_valid, true);

        let full = g.concat_rows(&[ctx.compressed.tokens, short, future])?;
        let short_masks = DecoderMasks {
            query_self: Some(&short_self),
            memory_valid: Some(&valid),
            top_k: ctx.top_k,
        };
        let new_short = blocks.short.forward(g, p, short, full, short_masks, eps)?;

        let full_updated = g.concat_rows(&[ctx.compressed.tokens, new_short, future])?;
        let future_masks = DecoderMasks {
            query_self: None,
            memory_valid: Some(&valid),
            top_k: None,
        };
        let new_future = blocks
            .future
            .forward(g, p, future, full_updated, future_masks, eps)?;
        Ok(RoundOutputs {
            short: new_short,
            future: new_future,
            full,
            full_updated,
        })
    }

    /// Latent generation followed by every interaction round.
    pub fn run_decoder<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ctx: MemoryContext<'_>,
        enhanced: Var,
        eps: T,
    ) -> Result<DecoderOutputs> {
        let latent = self.generate_latent_anticipation(g, p, ctx, enhanced, eps)?;
        let mut future = match self.queries.renewed {
            Some(id) if self.renewal => p.var(id),
            _ => latent,
        };
        let mut short = enhanced;
        let mut short_per_round = Vec::with_capacity(self.rounds.len());
        let mut future_per_round = Vec::with_capacity(self.rounds.len());
        for r in 0..self.rounds.len() {
            let out = self.interaction_round(g, p, r, ctx, short, future, eps)?;
            short = out.short;
            future = out.future;
            short_per_round.push(short);
            future_per_round.push(future);
        }
        Ok(DecoderOutputs {
            short_per_round,
            future_initial: latent,
            future_per_round,
        })
    }
}

/// Stretches `N` anticipation tokens to `steps` aligned future steps.
pub fn upsample_for_supervision<T: Scalar>(
    g: &mut Graph<T>,
    anticipation: Var,
    steps: usize,
) -> Result<Var> {
    let n = g.shape(anticipation)[0];
    if n > steps {
        return Err(MatError::Argument(format!(
            "cannot upsample {n} tokens to {steps} steps"
        )));
    }
    if n == steps {
        return Ok(anticipation);
    }
    g.interpolate(anticipation, steps)
}
