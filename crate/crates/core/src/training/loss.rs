use crate::circular_decoder::upsample_for_supervision;
use crate::config::ModelConfig;
use crate::error::{MatError, Result};
use crate::model::{ForwardOutputs, SharedClassifier};
use crate::numerics::{Graph, SoftTarget, Var};
use crate::params::Bound;
use crate::scalar::Scalar;

/// Balance coefficients: one `λ_s` per short-term term, one shared `λ_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: Vec<f64>,
    pub lambda_f: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        LossWeights {
            lambda_s: cfg.lambda_s.clone(),
            lambda_f: cfg.lambda_f,
        }
    }
}

/// Short-term labels blended with a donor clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedShortLabels {
    pub donor_labels: Vec<usize>,
    /// Donor weight per short-term row; the original label gets `1 − λ`.
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub short_labels: Vec<usize>,
    /// `false` rows are padding and carry zero weight.
    pub short_valid: Vec<bool>,
    pub future_labels: Vec<usize>,
    pub short_mix: Option<MixedShortLabels>,
}

impl SupervisionTargets {
    pub fn short_targets<T: Scalar>(&self) -> Vec<SoftTarget<T>> {
        self.short_labels
            .iter()
            .zip(&self.short_valid)
            .enumerate()
            .map(|(i, (&label, &ok))| {
                if !ok {
                    return Vec::new();
                }
                match &self.short_mix {
                    Some(mix) if mix.lambda[i] > 0.0 => vec![
                        (label, T::lit(1.0 - mix.lambda[i])),
                        (mix.donor_labels[i], T::lit(mix.lambda[i])),
                    ],
                    _ => vec![(label, T::one())],
                }
            })
            .collect()
    }

    fn future_targets<T: Scalar>(&self) -> Vec<SoftTarget<T>> {
        self.future_labels
            .iter()
            .map(|&l| vec![(l, T::one())])
            .collect()
    }
}

/// The total loss and each of its terms, in order
/// `L_S^0..L_S^{N_t}` and `L_F^0..L_F^{N_t}`.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub short: Vec<Var>,
    pub future: Vec<Var>,
}

/// Applies the shared classifier; rows of the result sum to one.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    clf: &SharedClassifier,
    features: Var,
) -> Result<Var> {
    clf.classify(g, p, features)
}

/// `Σᵢ λ_s^i · L_S^i + λ_f · Σᵢ L_F^i`, every term a cross-entropy summed
/// over rows. `L_S^0` supervises the encoder's short-term tokens and
/// `L_F^0` the upsampled latent anticipation; the remaining terms supervise
/// the per-round outputs.
pub fn compute_total_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    clf: &SharedClassifier,
    outputs: &ForwardOutputs,
    targets: &SupervisionTargets,
    weights: &LossWeights,
    future_steps: usize,
) -> Result<LossTerms> {
    let rounds = outputs.decoder.short_per_round.len();
    if weights.lambda_s.len() != rounds + 1 {
        return Err(MatError::shape(
            "loss weights",
            &[weights.lambda_s.len()],
            &[rounds + 1],
        ));
    }
    let m_s = g.shape(outputs.enhanced)[0];
    if targets.short_labels.len() != m_s || targets.short_valid.len() != m_s {
        return Err(MatError::shape(
            "short labels",
            &[targets.short_labels.len()],
            &[m_s],
        ));
    }
    if targets.future_labels.len() != future_steps {
        return Err(MatError::shape(
            "future labels",
            &[targets.future_labels.len()],
            &[future_steps],
        ));
    }
    if let Some(mix) = &targets.short_mix {
        if mix.lambda.len() != m_s || mix.donor_labels.len() != m_s {
            return Err(MatError::shape("mixed labels", &[mix.lambda.len()], &[m_s]));
        }
    }

    let short_inputs: Vec<Var> = std::iter::once(outputs.enhanced)
        .chain(outputs.decoder.short_per_round.iter().copied())
        .collect();
    let future_inputs: Vec<Var> = std::iter::once(outputs.decoder.future_initial)
        .chain(outputs.decoder.future_per_round.iter().copied())
        .collect();

    let mut short = Vec::with_capacity(rounds + 1);
    for &x in &short_inputs {
        let probs = clf.classify(g, p, x)?;
        short.push(g.soft_cross_entropy(probs, targets.short_targets())?);
    }
    let mut future = Vec::with_capacity(rounds + 1);
    for &x in &future_inputs {
        let up = upsample_for_supervision(g, x, future_steps)?;
        let probs = clf.classify(g, p, up)?;
        future.push(g.soft_cross_entropy(probs, targets.future_targets())?);
    }

    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph<T>, term: Var, w: f64| -> Result<()> {
        let scaled = g.scale(term, T::lit(w));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    for (&term, &w) in short.iter().zip(&weights.lambda_s) {
        push(g, term, w)?;
    }
    for &term in &future {
        push(g, term, weights.lambda_f)?;
    }
    Ok(LossTerms {
        total: total.expect("at least one term"),
        short,
        future,
    })
}
