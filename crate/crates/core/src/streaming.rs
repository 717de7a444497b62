//! Online inference over a frame stream, plus the offline sliding-window
//! driver it must agree with.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::data::{window_at, Video};
use crate::error::{MatError, Result};
use crate::metrics::{export_score_curve, task_metrics, AnticipationMetrics, EvalReport};
use crate::model::{MatModel, Prediction, Window};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_RECALL_K: usize = 5;

/// Future-token index for a gap of `tau` seconds: `round(tau · fps) − 1`.
pub fn tau_index(cfg: &ModelConfig, tau: f64) -> Result<usize> {
    let lo = 1.0 / cfg.fps as f64;
    let hi = cfg.future_seconds;
    if !(tau >= lo - 1e-9 && tau <= hi + 1e-9) {
        return Err(MatError::Argument(format!(
            "tau {tau} s outside the anticipation horizon [{lo}, {hi}] s"
        )));
    }
    let steps = (tau * cfg.fps as f64).round() as usize;
    Ok(steps.clamp(1, cfg.future_steps()) - 1)
}

/// Answers for one pushed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput<T> {
    pub detection: Vec<T>,
    /// `(tau, probabilities)` in request order.
    pub anticipation: Vec<(f64, Vec<T>)>,
}

/// FIFO memory of the last `m_L + m_S` frames of one stream.
#[derive(Clone, Debug)]
pub struct StreamState<'a, T> {
    model: &'a MatModel,
    params: &'a ParamStore<T>,
    /// Ring of `m_L + m_S` rows; `head` is the slot written next.
    ring: Vec<T>,
    head: usize,
    frames_seen: usize,
    forward_passes: usize,
}

impl<'a, T: Scalar> StreamState<'a, T> {
    pub fn new(model: &'a MatModel, params: &'a ParamStore<T>) -> Self {
        let cfg = model.config();
        StreamState {
            model,
            params,
            ring: vec![T::zero(); cfg.window_len() * cfg.d_model],
            head: 0,
            frames_seen: 0,
            forward_passes: 0,
        }
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn valid_slots(&self) -> usize {
        self.frames_seen.min(self.model.config().window_len())
    }

    /// The memory window, oldest slot first; the newest frame is last.
    pub fn window(&self) -> Window<T> {
        let cfg = self.model.config();
        let (len, d) = (cfg.window_len(), cfg.d_model);
        let mut data = Vec::with_capacity(len * d);
        for i in 0..len {
            let slot = (self.head + i) % len;
            data.extend_from_slice(&self.ring[slot * d..(slot + 1) * d]);
        }
        let valid_from = len - self.valid_slots();
        let valid = (0..len).map(|i| i >= valid_from).collect();
        Window::new(
            Tensor::new(vec![len, d], data).expect("window shape"),
            valid,
        )
        .expect("window")
    }

    /// Appends one frame, evicting the oldest, and runs one forward pass.
    pub fn push_frame(&mut self, feature: &[T], taus: &[f64]) -> Result<StreamOutput<T>> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        if feature.len() != d {
            return Err(MatError::shape("push_frame", &[feature.len()], &[d]));
        }
        let indices = taus
            .iter()
            .map(|&t| tau_index(cfg, t))
            .collect::<Result<Vec<_>>>()?;
        self.ring[self.head * d..(self.head + 1) * d].copy_from_slice(feature);
        self.head = (self.head + 1) % cfg.window_len();
        self.frames_seen += 1;
        let pred = self.model.predict(self.params, &self.window())?;
        self.forward_passes += 1;
        Ok(StreamOutput {
            detection: pred.detection,
            anticipation: taus
                .iter()
                .zip(indices)
                .map(|(&tau, i)| (tau, pred.anticipation.row(i).to_vec()))
                .collect(),
        })
    }

    /// Forgets every frame.
    pub fn reset(&mut self) {
        self.ring.fill(T::zero());
        self.head = 0;
        self.frames_seen = 0;
    }
}

/// One prediction per frame from independent sliding windows at stride 1.
pub fn offline_predictions(
    model: &MatModel,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
) -> Result<Vec<Prediction<f32>>> {
    let cfg = model.config();
    (0..features.rows())
        .map(|t| model.predict(params, &window_at(features, t, cfg.long_len, cfg.short_len)))
        .collect()
}

/// Per-frame probabilities of one video: detection and one table per gap.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub detection: Vec<Vec<f64>>,
    /// Indexed like the requested gaps.
    pub anticipation: Vec<Vec<Vec<f64>>>,
}

impl VideoScores {
    pub fn from_predictions(preds: &[Prediction<f32>], indices: &[usize]) -> Self {
        let widen = |r: &[f32]| r.iter().map(|&x| x as f64).collect::<Vec<_>>();
        VideoScores {
            detection: preds.iter().map(|p| widen(&p.detection)).collect(),
            anticipation: indices
                .iter()
                .map(|&i| preds.iter().map(|p| widen(p.anticipation.row(i))).collect())
                .collect(),
        }
    }
}

/// Scores detections against frame labels and each gap against the label
/// `steps` frames later; the last `steps` frames of a video have no
/// anticipation ground truth and are skipped.
pub fn score_videos(
    cfg: &ModelConfig,
    scores: &[VideoScores],
    labels: &[&[usize]],
    taus: &[f64],
    recall_k: usize,
) -> Result<EvalReport> {
    let indices = taus
        .iter()
        .map(|&t| tau_index(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let mut det_rows = Vec::new();
    let mut det_labels = Vec::new();
    for (s, l) in scores.iter().zip(labels) {
        det_rows.extend(s.detection.iter().cloned());
        det_labels.extend_from_slice(l);
    }
    let mut anticipation = Vec::with_capacity(taus.len());
    for (j, (&tau, &idx)) in taus.iter().zip(&indices).enumerate() {
        let steps = idx + 1;
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (s, l) in scores.iter().zip(labels) {
            for t in 0..l.len().saturating_sub(steps) {
                rows.push(s.anticipation[j][t].clone());
                truth.push(l[t + steps]);
            }
        }
        anticipation.push(AnticipationMetrics {
            tau_seconds: tau,
            steps,
            metrics: task_metrics(&rows, &truth, recall_k)?,
        });
    }
    Ok(EvalReport {
        config: cfg.clone(),
        videos: scores.len(),
        frames: det_labels.len(),
        detection: task_metrics(&det_rows, &det_labels, recall_k)?,
        anticipation,
        notes: BTreeMap::new(),
    })
}

/// Offline evaluation over whole videos.
pub fn evaluate_videos(
    model: &MatModel,
    params: &ParamStore<f32>,
    videos: &[&Video],
    taus: &[f64],
    recall_k: usize,
) -> Result<EvalReport> {
    let cfg = model.config();
    let indices = taus
        .iter()
        .map(|&t| tau_index(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(videos.len());
    for v in videos {
        let preds = offline_predictions(model, params, &v.features.features)?;
        scores.push(VideoScores::from_predictions(&preds, &indices));
    }
    let labels: Vec<&[usize]> = videos.iter().map(|v| v.labels.labels.as_slice()).collect();
    score_videos(cfg, &scores, &labels, taus, recall_k)
}

/// Streams every frame of `video` through a fresh [`StreamState`], writes
/// the report to `report_path` and one detection curve per class next to it.
pub fn replay_file(
    model: &MatModel,
    params: &ParamStore<f32>,
    video: &Video,
    taus: &[f64],
    report_path: &Path,
) -> Result<EvalReport> {
    let cfg = model.config();
    let mut state = StreamState::new(model, params);
    let widen = |r: &[f32]| r.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut scores = VideoScores {
        detection: Vec::new(),
        anticipation: vec![Vec::new(); taus.len()],
    };
    let features = &video.features.features;
    for t in 0..features.rows() {
        let out = state.push_frame(features.row(t), taus)?;
        scores.detection.push(widen(&out.detection));
        for (j, (_, row)) in out.anticipation.iter().enumerate() {
            scores.anticipation[j].push(widen(row));
        }
    }
    let labels = video.labels.labels.as_slice();
    let mut report = score_videos(
        cfg,
        std::slice::from_ref(&scores),
        &[labels],
        taus,
        DEFAULT_RECALL_K,
    )?;
    report
        .notes
        .insert("forward_passes".into(), state.forward_passes().into());
    report.write_json(report_path)?;
    let dir = report_path.parent().unwrap_or(Path::new("."));
    let stem = report_path.file_stem().map_or_else(
        || "replay".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    for c in 0..cfg.num_outputs() {
        export_score_curve(
            &scores.detection,
            labels,
            c,
            cfg.fps,
            &dir.join(format!("{stem}_class_{c}.csv")),
        )?;
    }
    Ok(report)
}
