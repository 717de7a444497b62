//! Clip-mixing augmentations: hard span replacement on long-term memory and
//! soft, label-aware blending on short-term memory.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{MatError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::training::loss::MixedShortLabels;

/// Span replaced by [`mixclip_long`], if any.
pub type Span = Option<Range<usize>>;

/// With probability `p`, replaces a random contiguous span of `long` by the
/// aligned span of `donor`. Span length is uniform in
/// `[1, 2 · segment_len]` (capped at the memory length). Validity flags are
/// carried along with the copied rows.
pub fn mixclip_long<T: Scalar, R: Rng>(
    long: &Tensor<T>,
    valid: &[bool],
    donor: &Tensor<T>,
    donor_valid: &[bool],
    segment_len: usize,
    p: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<bool>, Span)> {
    if long.shape() != donor.shape()
        || valid.len() != donor_valid.len()
        || valid.len() != long.rows()
    {
        return Err(MatError::shape("mixclip", long.shape(), donor.shape()));
    }
    if !rng.random_bool(p) {
        return Ok((long.clone(), valid.to_vec(), None));
    }
    let m_l = long.rows();
    let max_len = (2 * segment_len).clamp(1, m_l);
    let len = rng.random_range(1..=max_len);
    let start = rng.random_range(0..=m_l - len);
    let d = long.cols();
    let mut out = long.clone();
    out.data_mut()[start * d..(start + len) * d]
        .copy_from_slice(&donor.data()[start * d..(start + len) * d]);
    let mut v = valid.to_vec();
    v[start..start + len].copy_from_slice(&donor_valid[start..start + len]);
    Ok((out, v, Some(start..start + len)))
}

/// Draws `λ ~ Beta(α, α)` folded to `min(λ, 1 − λ)`.
pub fn folded_beta<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta =
        Beta::new(alpha, alpha).map_err(|e| MatError::Config(format!("alpha {alpha}: {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.min(1.0 - l))
}

/// Result of [`mixclip_plus_short`].
#[derive(Clone, Debug, PartialEq)]
pub struct ShortMix<T> {
    pub features: Tensor<T>,
    /// `None` when the sample was left untouched.
    pub labels: Option<MixedShortLabels>,
}

/// With probability `p`, blends every short-term token with the aligned
/// token of a donor clip: `(1 − λ)·short + λ·donor`, and the targets become
/// `(original, 1 − λ)` + `(donor, λ)`. One λ per window unless `per_token`.
/// Rows where either clip is padding stay unmixed.
#[allow(clippy::too_many_arguments)]
pub fn mixclip_plus_short<T: Scalar, R: Rng>(
    short: &Tensor<T>,
    valid: &[bool],
    donor_short: &Tensor<T>,
    donor_labels: &[usize],
    donor_valid: &[bool],
    alpha: f64,
    p: f64,
    per_token: bool,
    rng: &mut R,
) -> Result<ShortMix<T>> {
    let m_s = short.rows();
    if short.shape() != donor_short.shape() || donor_labels.len() != m_s || valid.len() != m_s {
        return Err(MatError::shape(
            "mixclip+",
            short.shape(),
            donor_short.shape(),
        ));
    }
    if !rng.random_bool(p) {
        return Ok(ShortMix {
            features: short.clone(),
            labels: None,
        });
    }
    let shared = folded_beta(alpha, rng)?;
    let mut lambda = Vec::with_capacity(m_s);
    for i in 0..m_s {
        let l = if per_token {
            folded_beta(alpha, rng)?
        } else {
            shared
        };
        lambda.push(if valid[i] && donor_valid[i] { l } else { 0.0 });
    }
    Ok(ShortMix {
        features: blend_rows(short, donor_short, &lambda),
        labels: Some(MixedShortLabels {
            donor_labels: donor_labels.to_vec(),
            lambda,
        }),
    })
}

/// Row-wise `(1 − λᵢ)·a + λᵢ·b`; rows with `λᵢ = 0` are copied from `a`.
pub fn blend_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, lambda: &[f64]) -> Tensor<T> {
    let d = a.cols();
    let mut out = a.clone();
    for (i, &l) in lambda.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let (wa, wb) = (T::lit(1.0 - l), T::lit(l));
        for (o, &y) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(b.row(i)) {
            *o = wa * *o + wb * y;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(rows: usize, d: usize, offset: f32) -> Tensor<f32> {
        Tensor::new(
            vec![rows, d],
            (0..rows * d).map(|i| i as f32 + offset).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (ramp(16, 3, 0.0), ramp(16, 3, 100.0));
        let (out, v, span) =
            mixclip_long(&a, &[true; 16], &b, &[true; 16], 2, 0.0, &mut rng).unwrap();
        assert_eq!(out, a);
        assert_eq!(v, vec![true; 16]);
        assert!(span.is_none());

        let mix = mixclip_plus_short(
            &a,
            &[true; 16],
            &b,
            &[1; 16],
            &[true; 16],
            0.25,
            0.0,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(mix.features, a);
        assert!(mix.labels.is_none());
    }

    #[test]
    fn replaced_span_comes_from_donor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (ramp(32, 4, 0.0), ramp(32, 4, 1000.0));
        for _ in 0..50 {
            let (out, _, span) =
                mixclip_long(&a, &[true; 32], &b, &[true; 32], 4, 1.0, &mut rng).unwrap();
            let span = span.unwrap();
            assert!((1..=8).contains(&span.len()));
            for r in 0..32 {
                let src = if span.contains(&r) { &b } else { &a };
                assert_eq!(out.row(r), src.row(r));
            }
        }
    }

    #[test]
    fn zero_lambda_keeps_features() {
        let (a, b) = (ramp(4, 2, 0.0), ramp(4, 2, 9.0));
        assert_eq!(blend_rows(&a, &b, &[0.0; 4]), a);
    }

    #[test]
    fn folded_lambda_stays_below_half_and_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (ramp(8, 2, 0.0), ramp(8, 2, 5.0));
        for _ in 0..100 {
            let mix = mixclip_plus_short(
                &a, &[true; 8], &b, &[2; 8], &[true; 8], 0.25, 1.0, true, &mut rng,
            )
            .unwrap();
            let labels = mix.labels.unwrap();
            for &l in &labels.lambda {
                assert!((0.0..=0.5).contains(&l));
                assert!(((1.0 - l) + l - 1.0f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn padded_rows_are_not_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (ramp(4, 2, 0.0), ramp(4, 2, 5.0));
        let valid = [false, true, true, true];
        let mix = mixclip_plus_short(
            &a, &valid, &b, &[1; 4], &[true; 4], 0.25, 1.0, false, &mut rng,
        )
        .unwrap();
        assert_eq!(mix.labels.unwrap().lambda[0], 0.0);
        assert_eq!(mix.features.row(0), a.row(0));
    }
}
