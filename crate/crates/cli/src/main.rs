//! Command line front end: one subcommand per pipeline stage.
//!
//! Every subcommand takes an optional TOML config (`--config`), repeatable
//! `--set key=value` overrides and an output directory (`--out`). The fully
//! resolved config is written next to the outputs. Exit codes: 0 success,
//! 1 other failure, 2 config error or bad usage, 3 missing input, 4 numerical
//! failure, 5 checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use im2flow::pipeline::{self, string_override, PipelineError};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "im2flow", version, about = "Single-image flow hallucination and two-stream recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (dotted path), e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the flow classifier used by the content loss.
    TrainContent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the flow network.
    TrainIm2flow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Content network checkpoint.
        #[arg(long)]
        content: Option<PathBuf>,
        /// Content-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict flow for one image or a directory of images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score predictors (im2flow, nn, zero, identity) on a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated predictor list.
        #[arg(long, value_delimiter = ',')]
        predictors: Vec<String>,
    },
    /// Train the appearance and motion streams and pick the fusion weight.
    TrainStreams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Classify a dataset split or a directory of images.
    Recognize {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train-streams`.
        #[arg(long)]
        streams: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Rank images (or the controlled motion-scale set) by motion potential.
    RankMotion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn path_set(sets: &mut Vec<String>, key: &str, path: &Option<PathBuf>) {
    if let Some(p) = path {
        sets.push(string_override(key, &p.to_string_lossy()));
    }
}

fn value_set<T: ToString>(sets: &mut Vec<String>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        sets.push(format!("{key}={}", v.to_string()));
    }
}

/// Flag-derived overrides come first so explicit `--set` values win.
fn stage<C, S>(common: &Common, flags: Vec<String>, run: impl FnOnce(&C, &Path) -> Result<S, PipelineError>) -> Result<(), PipelineError>
where
    C: DeserializeOwned,
    S: Serialize,
{
    let mut sets = flags;
    sets.extend(common.overrides.iter().cloned());
    let cfg: C = pipeline::load_config(common.config.as_deref(), &sets)?;
    let summary = run(&cfg, &common.out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    Ok(())
}

fn dispatch(command: Command) -> Result<(), PipelineError> {
    let mut f = Vec::new();
    match command {
        Command::Synth { common, seed } => {
            value_set(&mut f, "seed", &seed);
            stage(&common, f, pipeline::run_synth)
        }
        Command::TrainContent { common, dataset } => {
            path_set(&mut f, "dataset", &dataset);
            stage(&common, f, pipeline::run_train_content)
        }
        Command::TrainIm2flow { common, dataset, content, lambda, epochs } => {
            path_set(&mut f, "dataset", &dataset);
            path_set(&mut f, "content", &content);
            value_set(&mut f, "loss.lambda", &lambda);
            value_set(&mut f, "train.epochs", &epochs);
            stage(&common, f, pipeline::run_train_im2flow)
        }
        Command::Predict { common, model, input } => {
            path_set(&mut f, "model", &model);
            path_set(&mut f, "input", &input);
            stage(&common, f, pipeline::run_predict)
        }
        Command::Evaluate { common, dataset, model, predictors } => {
            path_set(&mut f, "dataset", &dataset);
            path_set(&mut f, "model", &model);
            if !predictors.is_empty() {
                let quoted: Vec<String> = predictors.iter().map(|p| format!("{:?}", p.trim())).collect();
                f.push(format!("predictors=[{}]", quoted.join(",")));
            }
            stage(&common, f, |cfg, out| {
                let reports = pipeline::run_evaluate(cfg, out)?;
                eprint!("{}", im2flow::metrics::format_table(&reports));
                Ok(reports.iter().map(|r| (r.predictor.clone(), r.masks.clone())).collect::<Vec<_>>())
            })
        }
        Command::TrainStreams { common, dataset, model } => {
            path_set(&mut f, "dataset", &dataset);
            path_set(&mut f, "model", &model);
            stage(&common, f, pipeline::run_train_streams)
        }
        Command::Recognize { common, streams, dataset, images } => {
            path_set(&mut f, "streams", &streams);
            path_set(&mut f, "dataset", &dataset);
            path_set(&mut f, "images", &images);
            stage(&common, f, pipeline::run_recognize)
        }
        Command::RankMotion { common, model, images } => {
            path_set(&mut f, "model", &model);
            path_set(&mut f, "images", &images);
            stage(&common, f, pipeline::run_rank_motion)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
