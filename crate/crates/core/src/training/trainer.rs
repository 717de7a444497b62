//! Training loop: batch assembly, per-sample forward/backward, Adam.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{make_samples, window_at, Sample, Video};
use crate::error::{MatError, Result};
use crate::model::{ForwardMode, MatModel, Window};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;
use crate::rng::indexed_substream;
use crate::scalar::Scalar;
use crate::training::augment::{mixclip_long, mixclip_plus_short};
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::{compute_total_loss, LossWeights, SupervisionTargets};
use crate::training::optim::Adam;

/// Worker threads used for per-sample gradients, from `MAT_THREADS`
/// (default 1).
pub fn thread_count() -> usize {
    std::env::var("MAT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Training videos and every anchor drawn from them.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub videos: Vec<Video>,
    pub samples: Vec<Sample>,
    /// Sample indices grouped by position in `videos`.
    by_video: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn new(videos: Vec<Video>, cfg: &ModelConfig) -> Result<Self> {
        let mut samples = Vec::new();
        let mut by_video = Vec::with_capacity(videos.len());
        for v in &videos {
            if v.features.dim() != cfg.d_model {
                return Err(MatError::Config(format!(
                    "video {} has feature width {}, model expects {}",
                    v.id,
                    v.features.dim(),
                    cfg.d_model
                )));
            }
            let s = make_samples(v, cfg, cfg.stride)?;
            by_video.push((samples.len()..samples.len() + s.len()).collect());
            samples.extend(s);
        }
        if samples.is_empty() {
            return Err(MatError::Config(
                "no training samples: videos shorter than the horizon".into(),
            ));
        }
        Ok(TrainingSet {
            videos,
            samples,
            by_video,
        })
    }

    fn video_index(&self, sample: usize) -> usize {
        self.by_video
            .iter()
            .position(|ids| ids.contains(&sample))
            .expect("sample belongs to a video")
    }

    pub fn window(&self, sample: &Sample, cfg: &ModelConfig) -> Window<f32> {
        let video = self
            .videos
            .iter()
            .find(|v| v.id == sample.video)
            .expect("known video");
        window_at(
            &video.features.features,
            sample.anchor,
            cfg.long_len,
            cfg.short_len,
        )
    }
}

/// One training example after augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub window: Window<f32>,
    pub targets: SupervisionTargets,
}

/// Batch for optimizer step `step`: indices from the `"batch"` sub-stream,
/// augmentation from the `"augment"` sub-stream, both indexed by step.
pub fn prepare_batch(
    set: &TrainingSet,
    cfg: &ModelConfig,
    step: u64,
) -> Result<Vec<PreparedSample>> {
    let mut pick = indexed_substream(cfg.seed, "batch", step);
    let mut aug = indexed_substream(cfg.seed, "augment", step);
    let m_l = cfg.long_len;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = pick.random_range(0..set.samples.len());
        let sample = &set.samples[idx];
        let mut window = set.window(sample, cfg);
        let mut targets = SupervisionTargets {
            short_labels: sample.short_labels.clone(),
            short_valid: sample.short_valid.clone(),
            future_labels: sample.future_labels.clone(),
            short_mix: None,
        };
        let own = set.video_index(idx);
        let others = set.by_video.len() - 1;
        let donors_exist = set
            .by_video
            .iter()
            .enumerate()
            .any(|(i, ids)| i != own && !ids.is_empty());
        if others > 0
            && donors_exist
            && (cfg.p_mixclip_long > 0.0 || cfg.p_mixclip_plus_short > 0.0)
        {
            let donor_video = loop {
                let mut v = aug.random_range(0..others);
                if v >= own {
                    v += 1;
                }
                if !set.by_video[v].is_empty() {
                    break v;
                }
            };
            let ids = &set.by_video[donor_video];
            let donor = &set.samples[ids[aug.random_range(0..ids.len())]];
            let donor_window = set.window(donor, cfg);
            window = mix_window(
                &window,
                &donor_window,
                donor,
                &mut targets,
                cfg,
                m_l,
                &mut aug,
            )?;
        }
        batch.push(PreparedSample { window, targets });
    }
    Ok(batch)
}

fn mix_window<R: Rng>(
    window: &Window<f32>,
    donor_window: &Window<f32>,
    donor: &Sample,
    targets: &mut SupervisionTargets,
    cfg: &ModelConfig,
    m_l: usize,
    rng: &mut R,
) -> Result<Window<f32>> {
    let long = window.features.slice_rows(0, m_l)?;
    let short = window.features.slice_rows(m_l, cfg.short_len)?;
    let donor_long = donor_window.features.slice_rows(0, m_l)?;
    let donor_short = donor_window.features.slice_rows(m_l, cfg.short_len)?;
    let (valid_long, valid_short) = window.valid.split_at(m_l);
    let (donor_valid_long, donor_valid_short) = donor_window.valid.split_at(m_l);
    let (long, valid_long, _) = mixclip_long(
        &long,
        valid_long,
        &donor_long,
        donor_valid_long,
        cfg.segment_len(),
        cfg.p_mixclip_long,
        rng,
    )?;
    let mix = mixclip_plus_short(
        &short,
        valid_short,
        &donor_short,
        &donor.short_labels,
        donor_valid_short,
        cfg.alpha,
        cfg.p_mixclip_plus_short,
        cfg.per_token_mix,
        rng,
    )?;
    targets.short_mix = mix.labels;
    let mut valid = valid_long;
    valid.extend_from_slice(valid_short);
    Window::new(Tensor::concat_rows(&[&long, &mix.features])?, valid)
}

/// Loss terms of one sample or a batch mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub short: Vec<f64>,
    pub future: Vec<f64>,
}

impl LossValues {
    fn zeros(terms: usize) -> Self {
        LossValues {
            total: 0.0,
            short: vec![0.0; terms],
            future: vec![0.0; terms],
        }
    }

    fn accumulate(&mut self, other: &LossValues, w: f64) {
        self.total += w * other.total;
        for (a, b) in self.short.iter_mut().zip(&other.short) {
            *a += w * b;
        }
        for (a, b) in self.future.iter_mut().zip(&other.future) {
            *a += w * b;
        }
    }
}

/// Loss of one window and its gradient for every parameter, in store order.
pub fn sample_gradients<T: Scalar>(
    model: &MatModel,
    store: &ParamStore<T>,
    window: &Window<T>,
    targets: &SupervisionTargets,
    mode: ForwardMode,
) -> Result<(LossValues, Vec<Tensor<T>>)> {
    let cfg = model.config();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, window, mode)?;
    let terms = compute_total_loss(
        &mut g,
        &p,
        &model.classifier,
        &out,
        targets,
        &LossWeights::from_config(cfg),
        cfg.future_steps(),
    )?;
    let value = |v| g.value(v).item().to_f64_lossless();
    let values = LossValues {
        total: value(terms.total),
        short: terms.short.iter().map(|&v| value(v)).collect(),
        future: terms.future.iter().map(|&v| value(v)).collect(),
    };
    let grads = g.backward(terms.total)?;
    Ok((values, store.collect_grads(&g, &grads, &p)))
}

/// Model, parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: MatModel,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    /// Completed optimizer steps.
    pub step: u64,
    pub threads: usize,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let (model, params) = MatModel::new::<f32>(cfg)?;
        let optimizer = Adam::new(&params, cfg.lr);
        Ok(Trainer {
            model,
            params,
            optimizer,
            step: 0,
            threads: thread_count(),
        })
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(&ckpt.config)?;
        t.params.load_from(&ckpt.params)?;
        if let Some(adam) = &ckpt.optimizer {
            if adam.m.len() != t.params.len() {
                return Err(MatError::Format(
                    "optimizer state does not match parameters".into(),
                ));
            }
            t.optimizer = adam.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Draws the batch for the current step and applies one update.
    pub fn train_step(&mut self, set: &TrainingSet) -> Result<LossValues> {
        let batch = prepare_batch(set, self.model.config(), self.step)?;
        self.step_on(&batch)
    }

    /// One update on a fixed batch. The gradient is the batch mean, summed in
    /// sample order whatever the thread count.
    pub fn step_on(&mut self, batch: &[PreparedSample]) -> Result<LossValues> {
        if batch.is_empty() {
            return Err(MatError::Argument("empty batch".into()));
        }
        let results = self.per_sample(batch);
        let terms = self.model.config().rounds + 1;
        let w = 1.0 / batch.len() as f64;
        let mut mean = LossValues::zeros(terms);
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for r in results {
            let (values, grads) = r?;
            mean.accumulate(&values, w);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        let scale = w as f32;
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        if !mean.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(MatError::Divergence { step: self.step });
        }
        self.optimizer.step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(mean)
    }

    fn per_sample(&self, batch: &[PreparedSample]) -> Vec<Result<(LossValues, Vec<Tensor<f32>>)>> {
        let run = |s: &PreparedSample| {
            sample_gradients(
                &self.model,
                &self.params,
                &s.window,
                &s.targets,
                ForwardMode::Train,
            )
        };
        let threads = self.threads.min(batch.len()).max(1);
        if threads == 1 {
            return batch.iter().map(run).collect();
        }
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }

    /// Runs until `self.step == steps`, writing a loss row every 10 steps
    /// and after the final one.
    pub fn train<W: Write>(
        &mut self,
        set: &TrainingSet,
        steps: u64,
        log: Option<&mut LossLog<W>>,
    ) -> Result<Vec<LossValues>> {
        let mut history = Vec::new();
        let mut log = log;
        while self.step < steps {
            let step = self.step;
            let values = self.train_step(set)?;
            if let Some(l) = log.as_deref_mut() {
                if step.is_multiple_of(10) || self.step == steps {
                    l.write(step, &values)?;
                }
            }
            history.push(values);
        }
        Ok(history)
    }
}

/// CSV loss log: `step,total,short_0..short_N,future_0..future_N`.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(inner: W, rounds: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        let mut header = vec!["step".to_string(), "total".to_string()];
        header.extend((0..=rounds).map(|i| format!("short_{i}")));
        header.extend((0..=rounds).map(|i| format!("future_{i}")));
        writer.write_record(&header)?;
        Ok(LossLog { writer })
    }

    pub fn write(&mut self, step: u64, values: &LossValues) -> Result<()> {
        let mut row = vec![step.to_string(), values.total.to_string()];
        row.extend(
            values
                .short
                .iter()
                .chain(&values.future)
                .map(f64::to_string),
        );
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        Ok(())
    }
}
