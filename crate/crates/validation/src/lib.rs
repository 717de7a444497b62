//! Train-then-evaluate experiments on in-memory synthetic datasets.

use mat_core::data::{dataset_videos, synthesize, Split, Video};
use mat_core::metrics::EvalReport;
use mat_core::streaming::{evaluate_videos, DEFAULT_RECALL_K};
use mat_core::training::{LossLog, LossValues, Trainer, TrainingSet};
use mat_core::{Result, RunConfig};

/// Videos of one generated dataset, by split.
pub fn split_videos(run: &RunConfig) -> Result<(Vec<Video>, Vec<Video>)> {
    let ds = synthesize(&run.grammar, run.model.seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (v, split) in dataset_videos(&ds) {
        match split {
            Split::Train => train.push(v),
            Split::Test => test.push(v),
        }
    }
    Ok((train, test))
}

/// Outcome of [`train_and_evaluate`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub losses: Vec<LossValues>,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Generates the dataset for `run`, trains for `model.steps` steps and
/// evaluates on the test split at the given horizons.
pub fn train_and_evaluate(run: &RunConfig, taus: &[f64]) -> Result<Experiment> {
    run.validate()?;
    let start = std::time::Instant::now();
    let (train, test) = split_videos(run)?;
    let set = TrainingSet::new(train, &run.model)?;
    let mut trainer = Trainer::new(&run.model)?;
    let losses = trainer.train(
        &set,
        run.model.steps as u64,
        None::<&mut LossLog<std::io::Sink>>,
    )?;
    let refs: Vec<&Video> = test.iter().collect();
    let report = evaluate_videos(
        &trainer.model,
        &trainer.params,
        &refs,
        taus,
        DEFAULT_RECALL_K,
    )?;
    Ok(Experiment {
        losses,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
