//! Full model: positional embedding, progressive memory encoder, circular
//! decoder and the shared classifier.

use rand::Rng;

use crate::blocks::PositionalEmbedding;
use crate::circular_decoder::{
    upsample_for_supervision, CircularDecoder, DecoderOutputs, MemoryContext,
};
use crate::config::ModelConfig;
use crate::error::{MatError, Result};
use crate::memory_encoder::{CompressedLongMemory, ProgressiveMemoryEncoder};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{xavier, Bound, ParamId, ParamStore};
use crate::rng::substream;
use crate::scalar::Scalar;

/// One linear head shared by every supervised output.
#[derive(Clone, Debug)]
pub struct SharedClassifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SharedClassifier {
    pub fn new<T: Scalar, R: Rng>(
        d: usize,
        outputs: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        SharedClassifier {
            weight: store.add("classifier.weight", xavier(d, outputs, rng)),
            bias: store.add("classifier.bias", Tensor::zeros(&[outputs])),
        }
    }

    /// Row-wise affine map followed by softmax.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let logits = g.matmul(features, p.var(self.weight))?;
        let logits = g.add_bias(logits, p.var(self.bias))?;
        g.softmax(logits, None)
    }
}

/// A memory window ending at the anchor frame: `(m_L + m_S) × D` features
/// and a validity flag per row (`false` = warm-up padding).
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub features: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> Window<T> {
    pub fn new(features: Tensor<T>, valid: Vec<bool>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != valid.len() {
            return Err(MatError::shape("window", features.shape(), &[valid.len()]));
        }
        Ok(Window { features, valid })
    }

    /// Copy with padded rows zeroed.
    fn cleaned(&self) -> Tensor<T> {
        let mut f = self.features.clone();
        let d = f.cols();
        for (row, &ok) in f.data_mut().chunks_mut(d).zip(&self.valid) {
            if !ok {
                row.fill(T::zero());
            }
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Applies the configured top-k sparsification.
    Train,
    /// Dense attention everywhere.
    Infer,
}

/// Graph handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub compressed: CompressedLongMemory,
    /// `M̂_S` from the encoder.
    pub enhanced: Var,
    pub decoder: DecoderOutputs,
    pub valid_short: Vec<bool>,
}

impl ForwardOutputs {
    /// Short-term tokens of the last round (encoder output when there are no
    /// rounds).
    pub fn final_short(&self) -> Var {
        *self
            .decoder
            .short_per_round
            .last()
            .unwrap_or(&self.enhanced)
    }

    pub fn final_future(&self) -> Var {
        *self
            .decoder
            .future_per_round
            .last()
            .unwrap_or(&self.decoder.future_initial)
    }
}

/// Per-window answers of the detection and anticipation heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `C + 1` probabilities for the anchor frame.
    pub detection: Vec<T>,
    /// `N_F′ × (C + 1)`; row `k` is `(k + 1) / fps` seconds ahead.
    pub anticipation: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MatModel {
    config: ModelConfig,
    pub positional: PositionalEmbedding,
    pub encoder: ProgressiveMemoryEncoder,
    pub decoder: CircularDecoder,
    pub classifier: SharedClassifier,
}

impl MatModel {
    /// Builds the parameter layout and initializes values from the `"init"`
    /// sub-stream of `config.seed`.
    pub fn new<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = substream(config.seed, "init");
        let mut store = ParamStore::new();
        let d = config.d_model;
        let positional =
            PositionalEmbedding::new("pos", config.window_len(), d, &mut store, &mut rng);
        let encoder = ProgressiveMemoryEncoder::new(config, &mut store, &mut rng)?;
        let decoder = CircularDecoder::new(config, &mut store, &mut rng)?;
        let classifier = SharedClassifier::new(d, config.num_outputs(), &mut store, &mut rng);
        Ok((
            MatModel {
                config: config.clone(),
                positional,
                encoder,
                decoder,
                classifier,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        window: &Window<T>,
        mode: ForwardMode,
    ) -> Result<ForwardOutputs> {
        let cfg = &self.config;
        let (m_l, m_s) = (cfg.long_len, cfg.short_len);
        if window.features.shape() != [m_l + m_s, cfg.d_model] {
            return Err(MatError::shape(
                "model input",
                window.features.shape(),
                &[m_l + m_s, cfg.d_model],
            ));
        }
        if !window.valid[m_l + m_s - 1] {
            return Err(MatError::Argument("the anchor frame must be valid".into()));
        }
        let eps = T::lit(cfg.layer_norm_eps);
        let top_k = match mode {
            ForwardMode::Train => cfg.top_k,
            ForwardMode::Infer => None,
        };
        let x = g.constant(window.cleaned());
        let x = self.positional.apply(g, p, x)?;
        let long = g.slice_rows(x, 0, m_l)?;
        let short = g.slice_rows(x, m_l, m_s)?;
        let (valid_long, valid_short) = window.valid.split_at(m_l);

        let compressed = self
            .encoder
            .compress_long_memory(g, p, long, valid_long, eps)?;
        let enhanced =
            self.encoder
                .enhance_short_memory(g, p, short, valid_short, &compressed, top_k, eps)?;
        let ctx = MemoryContext {
            compressed: &compressed,
            short_valid: valid_short,
            top_k,
        };
        let decoder = self.decoder.run_decoder(g, p, ctx, enhanced, eps)?;
        Ok(ForwardOutputs {
            compressed,
            enhanced,
            decoder,
            valid_short: valid_short.to_vec(),
        })
    }

    /// Detection and anticipation probabilities from one inference pass.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        window: &Window<T>,
    ) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        self.predict_on(&mut g, &p, window)
    }

    pub fn predict_on<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        window: &Window<T>,
    ) -> Result<Prediction<T>> {
        let out = self.forward(g, p, window, ForwardMode::Infer)?;
        let last = self.config.short_len - 1;
        let short = g.slice_rows(out.final_short(), last, 1)?;
        let det = self.classifier.classify(g, p, short)?;
        let future = upsample_for_supervision(g, out.final_future(), self.config.future_steps())?;
        let ant = self.classifier.classify(g, p, future)?;
        Ok(Prediction {
            detection: g.value(det).data().to_vec(),
            anticipation: g.value(ant).clone(),
        })
    }
}
