//! Sliding-window samples over a video.

use crate::config::ModelConfig;
use crate::data::files::{FeatureFile, LabelTrack};
use crate::error::{MatError, Result};
use crate::model::Window;
use crate::numerics::Tensor;

/// A loaded video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: usize,
    pub features: FeatureFile,
    pub labels: LabelTrack,
}

impl Video {
    pub fn new(id: usize, features: FeatureFile, labels: LabelTrack) -> Result<Self> {
        if features.frames() != labels.labels.len() {
            return Err(MatError::Format(format!(
                "video {id}: {} frames but {} labels",
                features.frames(),
                labels.labels.len()
            )));
        }
        Ok(Video {
            id,
            features,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }
}

/// Training example anchored at frame `anchor` of video `video`. The
/// memory window itself is materialised on demand with [`window_at`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub video: usize,
    pub anchor: usize,
    /// Labels of the last `m_S` frames up to and including the anchor;
    /// padded positions hold 0 and are flagged in `short_valid`.
    pub short_labels: Vec<usize>,
    pub short_valid: Vec<bool>,
    /// `future_labels[k]` is the label at `anchor + k + 1`.
    pub future_labels: Vec<usize>,
}

/// The `(m_L + m_S) × D` window ending at `anchor`, left-padded with zeros
/// (and `valid = false`) before the first frame. Only frames `<= anchor`
/// are read.
pub fn window_at(
    features: &Tensor<f32>,
    anchor: usize,
    long_len: usize,
    short_len: usize,
) -> Window<f32> {
    let len = long_len + short_len;
    let d = features.cols();
    let mut data = vec![0.0; len * d];
    let mut valid = vec![false; len];
    for slot in 0..len {
        // slot len-1 is the anchor
        let back = len - 1 - slot;
        if back <= anchor {
            let t = anchor - back;
            data[slot * d..(slot + 1) * d].copy_from_slice(features.row(t));
            valid[slot] = true;
        }
    }
    Window {
        features: Tensor::new(vec![len, d], data).expect("window shape"),
        valid,
    }
}

/// Short-term labels ending at `anchor` with validity flags.
pub fn short_labels_at(
    labels: &[usize],
    anchor: usize,
    short_len: usize,
) -> (Vec<usize>, Vec<bool>) {
    (0..short_len)
        .map(|slot| {
            let back = short_len - 1 - slot;
            if back <= anchor {
                (labels[anchor - back], true)
            } else {
                (0, false)
            }
        })
        .unzip()
}

/// One sample per anchor `0, stride, 2·stride, …`; anchors whose future
/// horizon runs past the last frame are dropped.
pub fn make_samples(video: &Video, cfg: &ModelConfig, stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(MatError::Argument("stride must be positive".into()));
    }
    let horizon = cfg.future_steps();
    let labels = &video.labels.labels;
    let mut out = Vec::new();
    let mut anchor = 0;
    while anchor + horizon < video.frames() {
        let (short_labels, short_valid) = short_labels_at(labels, anchor, cfg.short_len);
        out.push(Sample {
            video: video.id,
            anchor,
            short_labels,
            short_valid,
            future_labels: labels[anchor + 1..=anchor + horizon].to_vec(),
        });
        anchor += stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(t: usize) -> Video {
        let data = (0..t * 2).map(|i| i as f32).collect();
        Video::new(
            0,
            FeatureFile {
                fps: 4,
                features: Tensor::new(vec![t, 2], data).unwrap(),
            },
            LabelTrack {
                num_classes: 3,
                labels: (0..t).map(|i| i % 4).collect(),
            },
        )
        .unwrap()
    }

    #[test]
    fn full_window_has_no_padding() {
        let v = video(50);
        let w = window_at(&v.features.features, 11, 8, 4);
        assert!(w.valid.iter().all(|&b| b));
        assert_eq!(w.features.row(0), v.features.features.row(0));
        assert_eq!(w.features.row(11), v.features.features.row(11));
    }

    #[test]
    fn first_anchor_is_maximally_padded() {
        let v = video(50);
        let w = window_at(&v.features.features, 0, 8, 4);
        assert_eq!(w.valid.iter().filter(|&&b| b).count(), 1);
        assert!(w.valid[11]);
        assert!(w.features.data()[..22].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn future_labels_are_offset_by_one() {
        let v = video(60);
        let cfg = ModelConfig {
            long_len: 8,
            short_len: 4,
            num_segments: 2,
            ..ModelConfig::default()
        };
        let samples = make_samples(&v, &cfg, 3).unwrap();
        for s in &samples {
            assert_eq!(s.future_labels.len(), 16);
            // tau = 1 s at 4 fps
            assert_eq!(s.future_labels[3], v.labels.labels[s.anchor + 4]);
            for (slot, (&l, &ok)) in s.short_labels.iter().zip(&s.short_valid).enumerate() {
                if ok {
                    assert_eq!(l, v.labels.labels[s.anchor + slot + 1 - 4]);
                }
            }
        }
        let last = samples.last().unwrap();
        assert!(last.anchor + 16 < 60);
        assert_eq!(samples.len(), (60 - 16usize).div_ceil(3));
    }
}
