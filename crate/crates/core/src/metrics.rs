//! Per-frame evaluation: average precision, calibrated average precision,
//! top-k recall, accuracy, and score-curve export.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{MatError, Result};

/// Frame order by descending score, ties by ascending frame index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn check_lengths(scores: &[f64], positives: &[bool]) -> Result<usize> {
    if scores.len() != positives.len() {
        return Err(MatError::shape(
            "average precision",
            &[scores.len()],
            &[positives.len()],
        ));
    }
    Ok(positives.iter().filter(|&&p| p).count())
}

/// Non-interpolated AP. `None` when there is no positive frame.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    calibrated_average_precision(scores, positives, 1.0)
}

/// AP with calibrated precision `w·TP / (w·TP + FP)`.
pub fn calibrated_average_precision(
    scores: &[f64],
    positives: &[bool],
    w: f64,
) -> Result<Option<f64>> {
    let total = check_lengths(scores, positives)?;
    if !(w > 0.0) {
        return Err(MatError::Argument(format!(
            "calibration weight must be positive, got {w}"
        )));
    }
    if total == 0 {
        return Ok(None);
    }
    let (mut tp, mut fp, mut acc) = (0.0, 0.0, 0.0);
    for i in ranking(scores) {
        if positives[i] {
            tp += 1.0;
            acc += w * tp / (w * tp + fp);
        } else {
            fp += 1.0;
        }
    }
    Ok(Some(acc / total as f64))
}

/// Negative-to-positive ratio of one class; `None` without positives.
pub fn calibration_weight(positives: &[bool]) -> Option<f64> {
    let p = positives.iter().filter(|&&b| b).count();
    (p > 0).then(|| (positives.len() - p) as f64 / p as f64)
}

/// Classes of `row` ordered by descending score, ties by class index.
fn class_ranking(row: &[f64]) -> Vec<usize> {
    ranking(row)
}

/// Per-class recall at `k` for classes present in `labels`, and their mean
/// excluding background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    /// `None` for classes without frames.
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn topk_recall(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<RecallAtK> {
    if k == 0 {
        return Err(MatError::Argument("k must be at least 1".into()));
    }
    if scores.len() != labels.len() {
        return Err(MatError::shape("recall", &[scores.len()], &[labels.len()]));
    }
    let classes = scores.first().map_or(0, Vec::len);
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != classes || label >= classes {
            return Err(MatError::Label {
                index: label,
                label,
                max: classes.saturating_sub(1),
            });
        }
        total[label] += 1;
        if class_ranking(row).iter().take(k).any(|&c| c == label) {
            hit[label] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    Ok(RecallAtK {
        k,
        mean: mean_over_classes(&per_class),
        per_class,
    })
}

/// Mean over non-background classes with a value.
pub fn mean_over_classes(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().skip(1).flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Index of the highest score, ties to the lowest class.
pub fn argmax(row: &[f64]) -> usize {
    class_ranking(row)[0]
}

pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Metrics of one score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub frames: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_cap: Vec<Option<f64>>,
    /// Classes without positive frames; left out of every mean.
    pub skipped_classes: Vec<usize>,
    pub map: Option<f64>,
    pub mcap: Option<f64>,
    pub recall: RecallAtK,
    pub accuracy: f64,
}

/// AP, cAP, recall@k and accuracy of a `frames × (C + 1)` table.
pub fn task_metrics(scores: &[Vec<f64>], labels: &[usize], recall_k: usize) -> Result<TaskMetrics> {
    let classes = scores.first().map_or(0, Vec::len);
    let mut per_class_ap = Vec::with_capacity(classes);
    let mut per_class_cap = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for c in 0..classes {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let ap = average_precision(&column, &positives)?;
        let cap = match calibration_weight(&positives) {
            Some(w) if w > 0.0 => calibrated_average_precision(&column, &positives, w)?,
            Some(_) => Some(1.0),
            None => None,
        };
        if ap.is_none() && c > 0 {
            skipped.push(c);
        }
        per_class_ap.push(ap);
        per_class_cap.push(cap);
    }
    Ok(TaskMetrics {
        frames: labels.len(),
        map: mean_over_classes(&per_class_ap),
        mcap: mean_over_classes(&per_class_cap),
        per_class_ap,
        per_class_cap,
        skipped_classes: skipped,
        recall: topk_recall(scores, labels, recall_k)?,
        accuracy: accuracy(scores, labels),
    })
}

/// Anticipation metrics for one gap `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnticipationMetrics {
    pub tau_seconds: f64,
    pub steps: usize,
    #[serde(flatten)]
    pub metrics: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ModelConfig,
    pub videos: usize,
    /// Frames pushed through the model.
    pub frames: usize,
    pub detection: TaskMetrics,
    pub anticipation: Vec<AnticipationMetrics>,
    /// Free-form extra fields (checkpoint path, oracle numbers, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn anticipation_at(&self, tau: f64) -> Option<&AnticipationMetrics> {
        self.anticipation
            .iter()
            .find(|a| (a.tau_seconds - tau).abs() < 1e-9)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Writes `frame_index,time_seconds,score,is_ground_truth` for one class.
pub fn export_score_curve(
    scores: &[Vec<f64>],
    labels: &[usize],
    class_id: usize,
    fps: u32,
    path: &Path,
) -> Result<()> {
    let classes = scores.first().map_or(0, Vec::len);
    if class_id >= classes {
        return Err(MatError::Label {
            index: 0,
            label: class_id,
            max: classes.saturating_sub(1),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame_index", "time_seconds", "score", "is_ground_truth"])?;
    for (t, row) in scores.iter().enumerate() {
        let truth = labels.get(t).is_some_and(|&l| l == class_id);
        w.write_record([
            t.to_string(),
            (t as f64 / fps as f64).to_string(),
            row[class_id].to_string(),
            (truth as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve written by [`export_score_curve`] as `(score, truth)` rows.
pub fn read_score_curve(path: &Path) -> Result<Vec<(f64, bool)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MatError::Format(format!("bad curve row {rec:?}")))
        };
        out.push((parse(2)?, parse(3)? != 0.0));
    }
    Ok(out)
}
