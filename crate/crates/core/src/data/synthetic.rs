//! Synthetic action grammar with long-range structure.
//!
//! A video is a sequence of segments with lengths drawn uniformly from
//! `[segment_len_min, segment_len_max]`. The first `lag` segments take
//! uniform random classes; every later segment `k` has class
//! `g(class(k − lag))` for a fixed permutation `g`. Frame features are the
//! class embedding (a fixed random unit vector) plus `N(0, σ²)` noise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::GrammarConfig;
use crate::data::files::{
    write_feature_file, write_label_file, write_manifest, FeatureFile, LabelTrack, ManifestEntry,
    Split,
};
use crate::error::{MatError, Result};
use crate::numerics::Tensor;
use crate::rng::{indexed_substream, substream};

/// One contiguous run of frames sharing a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub features: FeatureFile,
    pub labels: LabelTrack,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    config: GrammarConfig,
    /// `successor[c]` is `g(c)` for classes `1..=C`; index 0 unused.
    successor: Vec<usize>,
    /// Unit embedding per class, index 0 unused.
    embeddings: Vec<Vec<f32>>,
}

impl SyntheticGrammar {
    /// Draws the permutation and class embeddings from the `"grammar"`
    /// sub-stream of `seed`.
    pub fn new(config: GrammarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "grammar");
        let c = config.num_classes;
        let mut successor: Vec<usize> = (1..=c).collect();
        successor.shuffle(&mut rng);
        successor.insert(0, 0);
        let mut embeddings = vec![vec![0.0; config.dim]];
        for _ in 0..c {
            let v: Vec<f64> = (0..config.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            embeddings.push(v.iter().map(|x| (x / norm) as f32).collect());
        }
        Ok(SyntheticGrammar {
            config,
            successor,
            embeddings,
        })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    /// `g(c)`.
    pub fn successor(&self, class: usize) -> usize {
        self.successor[class]
    }

    pub fn embedding(&self, class: usize) -> &[f32] {
        &self.embeddings[class]
    }

    /// Minimum useful video length: the lag plus one full segment.
    pub fn min_frames(&self) -> usize {
        (self.config.lag + 1) * self.config.segment_len_max
    }

    pub fn generate_video<R: Rng>(&self, frames: usize, rng: &mut R) -> Result<SyntheticVideo> {
        if frames < self.min_frames() {
            return Err(MatError::Argument(format!(
                "videos need at least {} frames, got {frames}",
                self.min_frames()
            )));
        }
        let cfg = &self.config;
        let mut segments: Vec<Segment> = Vec::new();
        let mut start = 0;
        while start < frames {
            let k = segments.len();
            let class = if k < cfg.lag {
                rng.random_range(1..=cfg.num_classes)
            } else {
                self.successor(segments[k - cfg.lag].class)
            };
            let len = rng.random_range(cfg.segment_len_min..=cfg.segment_len_max);
            let len = len.min(frames - start);
            segments.push(Segment { start, len, class });
            start += len;
        }
        let labels: Vec<usize> = segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.class, s.len))
            .collect();
        let noise = Normal::new(0.0, cfg.noise_std).expect("nonnegative std");
        let mut data = Vec::with_capacity(frames * cfg.dim);
        for &l in &labels {
            for &e in self.embedding(l) {
                let n: f64 = if cfg.noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push(e + n as f32);
            }
        }
        Ok(SyntheticVideo {
            features: FeatureFile {
                fps: cfg.fps,
                features: Tensor::new(vec![frames, cfg.dim], data)?,
            },
            labels: LabelTrack {
                num_classes: cfg.num_classes,
                labels,
            },
            segments,
        })
    }

    /// Class distribution of segment `k` given the classes of segments
    /// `0..=current`.
    fn class_distribution(&self, segments: &[Segment], current: usize, k: usize) -> Vec<f64> {
        let c = self.config.num_classes;
        let mut dist = vec![0.0; c + 1];
        // Follow g through the lag chain back to a known or random segment.
        let mut applications = 0;
        let mut src = k;
        while src > current && src >= self.config.lag {
            src -= self.config.lag;
            applications += 1;
        }
        if src > current {
            for p in dist.iter_mut().skip(1) {
                *p = 1.0 / c as f64;
            }
            return dist;
        }
        let mut class = segments[src].class;
        for _ in 0..applications {
            class = self.successor(class);
        }
        dist[class] = 1.0;
        dist
    }

    /// Bayes-optimal prediction of the label `steps` frames after `t`, given
    /// the true past (classes, segment boundaries, elapsed length) and the
    /// grammar, but not future segment lengths.
    pub fn oracle_prediction(&self, segments: &[Segment], t: usize, steps: usize) -> usize {
        let cfg = &self.config;
        let current = segments
            .iter()
            .position(|s| t < s.start + s.len)
            .expect("frame inside video");
        let elapsed = t - segments[current].start + 1;
        // Distribution over the absolute end (exclusive) of the current segment.
        let lo = cfg.segment_len_min.max(elapsed);
        let hi = cfg.segment_len_max;
        let mut ends: BTreeMap<usize, f64> = BTreeMap::new();
        let start = segments[current].start;
        for len in lo..=hi {
            *ends.entry(start + len).or_default() += 1.0 / (hi - lo + 1) as f64;
        }
        let target = t + steps;
        let mut class_prob = vec![0.0; cfg.num_classes + 1];
        // Walk segments forward; `ends` is the distribution of the end of
        // segment `current + j`.
        let mut j = 0;
        loop {
            let seg = current + j;
            let inside: f64 = ends
                .iter()
                .filter(|(&e, _)| e > target)
                .map(|(_, p)| p)
                .sum();
            // Probability that segment `seg` starts at or before `target`
            // is the mass carried into this iteration.
            let mass: f64 = ends.values().sum();
            if inside > 0.0 {
                let dist = self.class_distribution(segments, current, seg);
                for (acc, p) in class_prob.iter_mut().zip(dist) {
                    *acc += inside * p;
                }
            }
            let carried = mass - inside;
            if carried <= 1e-15 {
                break;
            }
            let mut next: BTreeMap<usize, f64> = BTreeMap::new();
            let span = (cfg.segment_len_max - cfg.segment_len_min + 1) as f64;
            for (&e, &p) in ends.iter().filter(|(&e, _)| e <= target) {
                for len in cfg.segment_len_min..=cfg.segment_len_max {
                    *next.entry(e + len).or_default() += p / span;
                }
            }
            ends = next;
            j += 1;
        }
        let mut best = 1;
        for c in 1..class_prob.len() {
            if class_prob[c] > class_prob[best] + 1e-12 {
                best = c;
            }
        }
        best
    }
}

/// Oracle accuracy of the grammar for one anticipation gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleGap {
    pub steps: usize,
    pub seconds: f64,
    /// Bayes-oracle accuracy over every frame with ground truth.
    pub accuracy: f64,
    /// Fraction of scored frames whose target lies in the anchor's segment;
    /// the oracle is exact on those.
    pub interior_fraction: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSplit {
    pub videos: usize,
    pub frames: usize,
    /// With the past fully known, the current label is always recoverable.
    pub detection_accuracy: f64,
    pub anticipation: Vec<OracleGap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub grammar: GrammarConfig,
    pub seed: u64,
    pub splits: BTreeMap<String, OracleSplit>,
}

/// Oracle accuracies for a set of videos, for gaps `1..=max_steps` frames.
pub fn oracle_split(
    grammar: &SyntheticGrammar,
    videos: &[&SyntheticVideo],
    max_steps: usize,
) -> OracleSplit {
    let fps = grammar.config.fps as f64;
    let anticipation = (1..=max_steps)
        .map(|steps| {
            let (mut n, mut hit, mut interior) = (0usize, 0usize, 0usize);
            for v in videos {
                let t_max = v.labels.labels.len();
                for t in 0..t_max.saturating_sub(steps) {
                    n += 1;
                    let truth = v.labels.labels[t + steps];
                    if grammar.oracle_prediction(&v.segments, t, steps) == truth {
                        hit += 1;
                    }
                    let seg = v
                        .segments
                        .iter()
                        .find(|s| t < s.start + s.len)
                        .expect("segment");
                    if t + steps < seg.start + seg.len {
                        interior += 1;
                    }
                }
            }
            OracleGap {
                steps,
                seconds: steps as f64 / fps,
                accuracy: hit as f64 / n.max(1) as f64,
                interior_fraction: interior as f64 / n.max(1) as f64,
                frames: n,
            }
        })
        .collect();
    OracleSplit {
        videos: videos.len(),
        frames: videos.iter().map(|v| v.labels.labels.len()).sum(),
        detection_accuracy: 1.0,
        anticipation,
    }
}

/// Generated videos plus their split assignment.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub grammar: SyntheticGrammar,
    pub videos: Vec<SyntheticVideo>,
    pub splits: Vec<Split>,
}

impl SyntheticDataset {
    pub fn split_videos(&self, split: Split) -> Vec<&SyntheticVideo> {
        self.videos
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(v, _)| v)
            .collect()
    }

    pub fn oracle_report(&self, seed: u64, max_steps: usize) -> OracleReport {
        let mut splits = BTreeMap::new();
        for (name, split) in [("train", Split::Train), ("test", Split::Test)] {
            let vids = self.split_videos(split);
            if !vids.is_empty() {
                splits.insert(
                    name.to_string(),
                    oracle_split(&self.grammar, &vids, max_steps),
                );
            }
        }
        OracleReport {
            grammar: self.grammar.config.clone(),
            seed,
            splits,
        }
    }
}

/// Builds the dataset in memory. Video `i` draws from its own sub-stream,
/// the last `test_fraction` of videos form the test split.
pub fn synthesize(config: &GrammarConfig, seed: u64) -> Result<SyntheticDataset> {
    let grammar = SyntheticGrammar::new(config.clone(), seed)?;
    let n = config.num_videos;
    let n_test = ((n as f64) * config.test_fraction).round() as usize;
    let mut videos = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = indexed_substream(seed, "data", i as u64);
        videos.push(grammar.generate_video(config.frames_per_video, &mut rng)?);
        splits.push(if i + n_test >= n {
            Split::Test
        } else {
            Split::Train
        });
    }
    Ok(SyntheticDataset {
        grammar,
        videos,
        splits,
    })
}

/// Writes every video, `manifest.json` and `oracle.json` into `out_dir`.
/// Returns the manifest entries and the oracle report.
pub fn generate_synthetic(
    config: &GrammarConfig,
    seed: u64,
    oracle_steps: usize,
    out_dir: &Path,
) -> Result<(Vec<ManifestEntry>, OracleReport)> {
    let dataset = synthesize(config, seed)?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(dataset.videos.len());
    for (i, (video, &split)) in dataset.videos.iter().zip(&dataset.splits).enumerate() {
        let feature_path = format!("video_{i:04}.matf");
        let label_path = format!("video_{i:04}.matl");
        write_feature_file(&out_dir.join(&feature_path), &video.features)?;
        write_label_file(&out_dir.join(&label_path), &video.labels)?;
        entries.push(ManifestEntry {
            feature_path: feature_path.into(),
            label_path: label_path.into(),
            split,
        });
    }
    write_manifest(&out_dir.join("manifest.json"), &entries)?;
    let report = dataset.oracle_report(seed, oracle_steps);
    fs::write(
        out_dir.join("oracle.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok((entries, report))
}
