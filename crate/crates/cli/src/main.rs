//! `mat`: dataset generation, training, evaluation, streaming replay and
//! gradient checking.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mat_core::data::{generate_synthetic, load_manifest, Split, Video};
use mat_core::gradcheck::gradcheck_model;
use mat_core::numerics::OpKind;
use mat_core::streaming::{evaluate_videos, replay_file, DEFAULT_RECALL_K};
use mat_core::training::{load_checkpoint, save_checkpoint, LossLog, Trainer, TrainingSet};
use mat_core::{MatError, MatModel, ModelConfig, RunConfig};

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_CHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(
    name = "mat",
    version,
    about = "Memory-and-anticipation transformer toolkit"
)]
struct Cli {
    /// JSON run configuration with `model` and `grammar` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.rounds=1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset, its manifest and the oracle report.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV (default: next to the checkpoint).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint, including optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Offline sliding-window evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        taus: Vec<f64>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_RECALL_K)]
        recall_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay one video frame by frame through the streaming engine.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        taus: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check, tiny model unless --config is given.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt one backward rule (negative control), e.g. `layer-norm`.
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(MatError),
    Check(String),
}

impl From<MatError> for Failure {
    fn from(e: MatError) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Check(_) => EXIT_CHECK,
        Failure::Core(e) => match e {
            MatError::Config(_) | MatError::Argument(_) => EXIT_CONFIG,
            MatError::Divergence { .. } => EXIT_DIVERGENCE,
            MatError::Format(_)
            | MatError::Length { .. }
            | MatError::Label { .. }
            | MatError::Shape { .. } => EXIT_DATA,
            _ => EXIT_IO,
        },
    }
}

fn resolve(cli: &Cli, base: RunConfig) -> Result<RunConfig, Failure> {
    let run = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => base,
    };
    let run = run.with_overrides(&cli.overrides)?;
    run.validate()?;
    Ok(run)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<(), Failure> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn split_of(name: &str) -> Result<Split, Failure> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(MatError::Config(format!("unknown split {other:?}")).into()),
    }
}

fn videos_of(manifest: &Path, split: Split) -> Result<Vec<Video>, Failure> {
    let videos: Vec<Video> = load_manifest(manifest)?
        .into_iter()
        .filter(|(_, s)| *s == split)
        .map(|(v, _)| v)
        .collect();
    if videos.is_empty() {
        return Err(
            MatError::Format(format!("{} has no {split:?} videos", manifest.display())).into(),
        );
    }
    Ok(videos)
}

fn fault_kind(name: &str) -> Result<OpKind, Failure> {
    Ok(match name {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "add-bias" => OpKind::AddBias,
        "softmax" => OpKind::Softmax,
        "layer-norm" => OpKind::LayerNorm,
        "gelu" => OpKind::Gelu,
        "attention" => OpKind::Attention,
        "mean-rows" => OpKind::MeanRows,
        "interpolate" => OpKind::Interpolate,
        "cross-entropy" => OpKind::CrossEntropy,
        other => return Err(MatError::Config(format!("unknown fault op {other:?}")).into()),
    })
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData { out } => {
            let run = resolve(cli, RunConfig::default())?;
            let (entries, report) =
                generate_synthetic(&run.grammar, run.model.seed, run.model.future_steps(), out)?;
            write_json(&out.join("config.json"), &run)?;
            println!("wrote {} videos to {}", entries.len(), out.display());
            for (split, r) in &report.splits {
                let tau1 = r
                    .anticipation
                    .get(run.model.fps as usize - 1)
                    .map_or(f64::NAN, |g| g.accuracy);
                println!(
                    "oracle {split}: detection {:.4}, anticipation@1s {:.4}",
                    r.detection_accuracy, tau1
                );
            }
        }
        Command::Train {
            manifest,
            out,
            log,
            resume,
        } => {
            let run = resolve(cli, RunConfig::default())?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    let mut t = Trainer::from_checkpoint(&ckpt)?;
                    if ckpt.config != run.model && cli.config.is_some() {
                        eprintln!("note: training continues with the checkpoint's config");
                    }
                    t.threads = mat_core::training::thread_count();
                    t
                }
                None => Trainer::new(&run.model)?,
            };
            let cfg = trainer.config().clone();
            let set = TrainingSet::new(videos_of(manifest, Split::Train)?, &cfg)?;
            let log_path = log
                .clone()
                .unwrap_or_else(|| out.with_extension("loss.csv"));
            let mut loss_log = LossLog::new(fs::File::create(&log_path)?, cfg.rounds)?;
            write_json(
                &out.with_extension("config.json"),
                &RunConfig {
                    model: cfg.clone(),
                    ..run
                },
            )?;
            let history = trainer.train(&set, cfg.steps as u64, Some(&mut loss_log))?;
            save_checkpoint(out, &trainer.checkpoint())?;
            if let Some(last) = history.last() {
                println!("step {} loss {:.6}", trainer.step, last.total);
            }
            println!("checkpoint {}", out.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            taus,
            split,
            recall_k,
            out,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let (model, mut params) = MatModel::new::<f32>(&ckpt.config)?;
            params.load_from(&ckpt.params)?;
            let videos = videos_of(manifest, split_of(split)?)?;
            let refs: Vec<&Video> = videos.iter().collect();
            let mut report = evaluate_videos(&model, &params, &refs, taus, *recall_k)?;
            report
                .notes
                .insert("checkpoint".into(), checkpoint.display().to_string().into());
            report.notes.insert("split".into(), split.clone().into());
            report.write_json(out)?;
            print_summary(&report);
        }
        Command::Stream {
            checkpoint,
            features,
            labels,
            taus,
            out,
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let (model, mut params) = MatModel::new::<f32>(&ckpt.config)?;
            params.load_from(&ckpt.params)?;
            let (f, l) = mat_core::data::load_feature_file(features, labels)?;
            let video = Video::new(0, f, l)?;
            let report = replay_file(&model, &params, &video, taus, out)?;
            print_summary(&report);
        }
        Command::Gradcheck { out, fault } => {
            let base = RunConfig {
                model: ModelConfig::tiny(),
                ..RunConfig::default()
            };
            let mut run = match &cli.config {
                Some(path) => RunConfig::load(path)?,
                None => base,
            }
            .with_overrides(&cli.overrides)?;
            run.grammar.num_classes = run.model.num_classes;
            run.grammar.dim = run.model.d_model;
            run.grammar.fps = run.model.fps;
            run.validate()?;
            let fault = fault.as_deref().map(fault_kind).transpose()?;
            let report = gradcheck_model(&run.model, fault.map(|k| (k, 1.5)))?;
            print!("{}", report.table());
            if let Some(path) = out {
                write_json(path, &report)?;
            }
            if !report.passed {
                return Err(Failure::Check("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn print_summary(report: &mat_core::metrics::EvalReport) {
    let d = &report.detection;
    println!(
        "frames {}  detection mAP {:.4}  mcAP {:.4}  accuracy {:.4}",
        report.frames,
        d.map.unwrap_or(f64::NAN),
        d.mcap.unwrap_or(f64::NAN),
        d.accuracy
    );
    for a in &report.anticipation {
        println!(
            "tau {:.2}s  mAP {:.4}  accuracy {:.4}",
            a.tau_seconds,
            a.metrics.map.unwrap_or(f64::NAN),
            a.metrics.accuracy
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Check(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
