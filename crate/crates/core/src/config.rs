use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MatError, Result};

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `D`.
    pub d_model: usize,
    pub heads: usize,
    /// Long-term memory length `m_L`.
    pub long_len: usize,
    /// Short-term memory length `m_S`.
    pub short_len: usize,
    /// Number of long-term segments `N_s`.
    pub num_segments: usize,
    /// Long-term memory queries `N_L`.
    pub long_queries: usize,
    /// Latent future queries `N_F`.
    pub future_queries: usize,
    /// Anticipation horizon `T_F` in seconds.
    pub future_seconds: f64,
    pub fps: u32,
    /// Interaction rounds `N_t`. Zero runs the encoder + latent anticipation
    /// ablation.
    pub rounds: usize,
    /// 1: the first round runs on the renewed query bank; 0: on `F_A`.
    pub renewal: u8,
    /// Action classes `C`, excluding background.
    pub num_classes: usize,
    pub top_k: Option<usize>,
    /// One short-term weight per term, `rounds + 1` entries.
    pub lambda_s: Vec<f64>,
    pub lambda_f: f64,
    /// Beta(α, α) concentration for short-term soft mixing.
    pub alpha: f64,
    pub p_mixclip_long: f64,
    pub p_mixclip_plus_short: f64,
    /// Draw a separate mixing coefficient for every short-term token.
    pub per_token_mix: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Window anchor stride used when building training samples.
    pub stride: usize,
    pub seed: u64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            long_len: 64,
            short_len: 8,
            num_segments: 8,
            long_queries: 16,
            future_queries: 16,
            future_seconds: 4.0,
            fps: 4,
            rounds: 2,
            renewal: 1,
            num_classes: 6,
            top_k: None,
            lambda_s: vec![1.0; 3],
            lambda_f: 1.0,
            alpha: 0.25,
            p_mixclip_long: 0.5,
            p_mixclip_plus_short: 0.5,
            per_token_mix: false,
            lr: 1e-3,
            steps: 2000,
            batch_size: 8,
            stride: 1,
            seed: 0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            long_len: 8,
            short_len: 2,
            num_segments: 2,
            long_queries: 3,
            future_queries: 2,
            future_seconds: 2.0,
            fps: 2,
            rounds: 1,
            num_classes: 2,
            lambda_s: vec![1.0; 2],
            ..ModelConfig::default()
        }
    }

    /// Future step count `N_F′ = T_F · fps`.
    pub fn future_steps(&self) -> usize {
        (self.future_seconds * self.fps as f64).round() as usize
    }

    pub fn window_len(&self) -> usize {
        self.long_len + self.short_len
    }

    pub fn segment_len(&self) -> usize {
        self.long_len / self.num_segments
    }

    /// Output width `C + 1`.
    pub fn num_outputs(&self) -> usize {
        self.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MatError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return err(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.num_segments == 0 || self.long_len == 0 {
            return err("long memory needs at least one segment".into());
        }
        if !self.long_len.is_multiple_of(self.num_segments) {
            return err(format!(
                "long_len {} is not divisible by num_segments {}",
                self.long_len, self.num_segments
            ));
        }
        if self.short_len == 0 || self.long_queries == 0 || self.future_queries == 0 {
            return err("short_len, long_queries and future_queries must be positive".into());
        }
        if self.fps == 0 {
            return err("fps must be positive".into());
        }
        let steps = self.future_seconds * self.fps as f64;
        if steps < 1.0 || (steps - steps.round()).abs() > 1e-9 {
            return err(format!(
                "future_seconds * fps = {steps} must be a positive integer"
            ));
        }
        if self.future_queries > self.future_steps() {
            return err(format!(
                "future_queries {} exceeds future steps {}",
                self.future_queries,
                self.future_steps()
            ));
        }
        if self.renewal > 1 {
            return err(format!("renewal must be 0 or 1, got {}", self.renewal));
        }
        if self.num_classes == 0 || self.num_classes >= u16::MAX as usize {
            return err("num_classes out of range".into());
        }
        if self.top_k == Some(0) {
            return err("top_k must be positive".into());
        }
        if self.lambda_s.len() != self.rounds + 1 {
            return err(format!(
                "lambda_s has {} entries, expected rounds + 1 = {}",
                self.lambda_s.len(),
                self.rounds + 1
            ));
        }
        if self
            .lambda_s
            .iter()
            .chain([&self.lambda_f])
            .any(|&w| !(w >= 0.0))
        {
            return err("loss weights must be nonnegative".into());
        }
        if !(self.alpha > 0.0) {
            return err("alpha must be positive".into());
        }
        for p in [self.p_mixclip_long, self.p_mixclip_plus_short] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.batch_size == 0 || self.stride == 0 {
            return err("batch_size and stride must be positive".into());
        }
        Ok(())
    }
}

/// Synthetic action grammar parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub num_classes: usize,
    pub segment_len_min: usize,
    pub segment_len_max: usize,
    /// Segment `k` has class `g(class(k − lag))`.
    pub lag: usize,
    pub noise_std: f64,
    pub fps: u32,
    pub dim: usize,
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// Fraction of videos assigned to the test split.
    pub test_fraction: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            num_classes: 6,
            segment_len_min: 8,
            segment_len_max: 16,
            lag: 3,
            noise_std: 0.5,
            fps: 4,
            dim: 64,
            num_videos: 40,
            frames_per_video: 400,
            test_fraction: 0.25,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(MatError::Config(m.into()));
        if self.num_classes < 2 {
            return err("grammar needs at least two classes");
        }
        if self.segment_len_min == 0 || self.segment_len_min > self.segment_len_max {
            return err("invalid segment length range");
        }
        if self.lag == 0 {
            return err("dependency lag must be at least one segment");
        }
        if !(self.noise_std >= 0.0) {
            return err("noise_std must be nonnegative");
        }
        if self.dim == 0 || self.fps == 0 {
            return err("dim and fps must be positive");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return err("test_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Everything a command needs: model, data and grammar settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grammar: GrammarConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| MatError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `model.lr=0.0005`. Values parse as JSON, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| MatError::Config(format!("override {item:?} is not key=value")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| MatError::Config(format!("unknown config key {key}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(tree).map_err(|e| MatError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grammar.validate()?;
        if self.grammar.num_classes != self.model.num_classes
            || self.grammar.dim != self.model.d_model
            || self.grammar.fps != self.model.fps
        {
            return Err(MatError::Config(
                "grammar num_classes/dim/fps must match the model".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().future_steps(), 16);
    }

    #[test]
    fn indivisible_long_memory_is_rejected() {
        let cfg = ModelConfig {
            long_len: 10,
            num_segments: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(MatError::Config(_))));
        let cfg = ModelConfig {
            long_len: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn renewal_and_lambda_checks() {
        let cfg = ModelConfig {
            renewal: 2,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            rounds: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply_dotted_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["model.lr=0.01".into(), "grammar.lag=2".into()])
            .unwrap();
        assert_eq!(cfg.model.lr, 0.01);
        assert_eq!(cfg.grammar.lag, 2);
        assert!(RunConfig::default()
            .with_overrides(&["model.nope=1".into()])
            .is_err());
    }
}
