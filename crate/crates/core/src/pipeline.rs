//! On-disk pipeline stages. Each stage reads its inputs by path, writes its
//! artifacts and the fully resolved `config.toml` into one output directory,
//! and returns a summary that is also saved as `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use im2flow_nn::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::classifier::{ClassifierError, ClassifierTrainConfig, SmallCnn, SmallCnnConfig};
use crate::flow_io::{self, FlowIoError};
use crate::metrics::{self, EvalConfig, EvalItem, MetricsError, MetricsReport};
use crate::model::{magnitude_quantile, Im2FlowNet, ModelConfig, ModelError};
use crate::recognition::{self, RecognitionError, StreamKind, StreamReport};
use crate::synth::{self, frames_to_tensor, Dataset, DatasetConfig, Split, SynthError, SyntheticSample};
use crate::training::{self, FlowData, LossConfig, TrainConfig, TrainingError};
use crate::{decode_flow, EncodedFlow, FlowError, FlowField, Mask};

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const SUMMARY: &str = "summary.json";
pub const CONTENT_CKPT: &str = "content.ckpt";
pub const MODEL_CKPT: &str = "best.ckpt";
pub const FUSION: &str = "fusion.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Stage(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 missing input, 4 numerical failure,
    /// 5 checkpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingInput(_) => 3,
            PipelineError::Numerical(_) => 4,
            PipelineError::Checkpoint(_) => 5,
            PipelineError::Io { .. } | PipelineError::Stage(_) => 1,
        }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::Infeasible { .. } => PipelineError::Config(e.to_string()),
            SynthError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                PipelineError::MissingInput(e.to_string())
            }
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<FlowIoError> for PipelineError {
    fn from(e: FlowIoError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}

impl From<FlowError> for PipelineError {
    fn from(e: FlowError) -> Self {
        PipelineError::Stage(e.to_string())
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Checkpoint(e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } | ModelError::BadNormalizer(_) => PipelineError::Config(e.to_string()),
            ModelError::InputShape { .. } => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<ClassifierError> for PipelineError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::NonFinite { .. } => PipelineError::Numerical(e.to_string()),
            ClassifierError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<TrainingError> for PipelineError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFinite { .. } => PipelineError::Numerical(e.to_string()),
            TrainingError::Config(_) => PipelineError::Config(e.to_string()),
            TrainingError::Checkpoint(e) => e.into(),
            TrainingError::Classifier(e) => e.into(),
            TrainingError::Model(e) => e.into(),
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<RecognitionError> for PipelineError {
    fn from(e: RecognitionError) -> Self {
        match e {
            RecognitionError::Classifier(e) => e.into(),
            RecognitionError::Model(e) => e.into(),
            RecognitionError::BadWeight(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Thresholds { .. } | MetricsError::Sigma(_) | MetricsError::MissingForeground(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Config plumbing

/// Parses a TOML config (or defaults when `path` is `None`) and applies
/// `key=value` overrides. Keys are dotted paths; values are TOML literals,
/// falling back to plain strings.
pub fn load_config<T: DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T, PipelineError> {
    let mut root = match path {
        Some(p) => {
            if !p.exists() {
                return Err(PipelineError::MissingInput(format!("config file {}", p.display())));
            }
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            text.parse::<toml::Table>().map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, raw) =
            o.split_once('=').ok_or_else(|| PipelineError::Config(format!("override `{o}` is not key=value")))?;
        set_dotted(&mut root, key.trim(), parse_value(raw.trim()))?;
    }
    toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))
}

/// A `key=value` override whose value is always read as a string.
pub fn string_override(key: &str, value: &str) -> String {
    format!("{key}={}", toml::Value::String(value.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), PipelineError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn write_resolved<T: Serialize>(out: &Path, cfg: &T) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let text = toml::to_string(cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
    let path = out.join(RESOLVED_CONFIG);
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable")).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(require(path, "file")?).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage(format!("{}: {e}", path.display())))
}

fn require<'a>(path: &'a Path, what: &str) -> Result<&'a Path, PipelineError> {
    if path.as_os_str().is_empty() {
        return Err(PipelineError::Config(format!("no {what} path given")));
    }
    if !path.exists() {
        return Err(PipelineError::MissingInput(format!("{what} {}", path.display())));
    }
    Ok(path)
}

fn load_dataset(dir: &Path) -> Result<Dataset, PipelineError> {
    Ok(synth::read_dataset(require(dir, "dataset")?)?)
}

pub fn load_model(path: &Path) -> Result<Im2FlowNet<f32>, PipelineError> {
    Ok(checkpoint::load_model(require(path, "model checkpoint")?)?)
}

fn load_classifier(path: &Path) -> Result<SmallCnn<f32>, PipelineError> {
    Ok(checkpoint::load_classifier(require(path, "classifier checkpoint")?)?)
}

fn check_input_size(model: &Im2FlowNet<f32>, size: usize) -> Result<(), PipelineError> {
    if model.config.input_size != size {
        return Err(PipelineError::Config(format!(
            "model expects {0}x{0} images, data is {1}x{1}",
            model.config.input_size, size
        )));
    }
    Ok(())
}

fn flows_of(pred: &Tensor<f32>) -> Result<Vec<FlowField>, PipelineError> {
    (0..pred.n()).map(|i| Ok(decode_flow(&EncodedFlow::from_tensor(pred, i)?))).collect()
}

fn split_data(ds: &Dataset, split: Split) -> Result<FlowData, PipelineError> {
    let samples = ds.split(split);
    if samples.is_empty() {
        return Err(PipelineError::MissingInput(format!("{} split is empty", split.name())));
    }
    Ok(FlowData::from_samples(samples))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    pub seed: u64,
    pub dataset: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub checksum: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Writes the dataset tree, with its resolved config, to `out` (replacing
/// any previous contents) and returns the tree checksum.
pub fn run_synth(cfg: &SynthStage, out: &Path) -> Result<SynthSummary, PipelineError> {
    let ds = synth::generate_dataset(cfg.seed, &cfg.dataset)?;
    if out.exists() {
        let empty = fs::read_dir(out).map_err(io_err(out))?.next().is_none();
        if !empty && !out.join(synth::META).exists() {
            return Err(PipelineError::Config(format!(
                "{} exists and is not a dataset directory; refusing to overwrite it",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(io_err(out))?;
    }
    write_resolved(out, cfg)?;
    synth::write_dataset(&ds, out)?;
    Ok(SynthSummary {
        checksum: dataset_checksum(out)?,
        n_train: ds.train.len(),
        n_val: ds.val.len(),
        n_test: ds.test.len(),
    })
}

pub fn dataset_checksum(dir: &Path) -> Result<String, PipelineError> {
    Ok(synth::dataset_checksum(require(dir, "dataset")?)?)
}

// ---------------------------------------------------------------------------
// train-content

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainContentStage {
    pub dataset: PathBuf,
    pub network: SmallCnnConfig,
    pub train: ClassifierTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Trains the content network on ground-truth encoded flow of the train split.
pub fn run_train_content(cfg: &TrainContentStage, out: &Path) -> Result<ClassifierSummary, PipelineError> {
    let ds = load_dataset(&cfg.dataset)?;
    write_resolved(out, cfg)?;
    let start = Instant::now();
    let (train, val) = (split_data(&ds, Split::Train)?, split_data(&ds, Split::Val)?);
    let (net, history) = training::train_content_network(&train, Some(&val), cfg.network.clone(), &cfg.train)?;
    checkpoint::save_classifier(&net, &out.join(CONTENT_CKPT))?;
    synth::write_jsonl(&out.join("history.jsonl"), &history)?;
    let last = history.last().expect("at least one epoch");
    let summary = ClassifierSummary {
        train_accuracy: last.train_accuracy,
        val_accuracy: last.val_accuracy,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train-im2flow

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainIm2flowStage {
    pub dataset: PathBuf,
    /// Content network checkpoint; required when `loss.lambda > 0`.
    pub content: Option<PathBuf>,
    /// Quantile of training magnitudes used as the magnitude normalizer.
    pub m_max_quantile: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for TrainIm2flowStage {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            content: None,
            m_max_quantile: 0.99,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Im2flowSummary {
    pub m_max: f64,
    pub best_epoch: usize,
    pub best_val_epe: f64,
    pub steps: usize,
    pub seconds: f64,
    /// The only split the model saw during training.
    pub trained_on: Split,
    pub dataset_checksum: String,
}

pub fn run_train_im2flow(cfg: &TrainIm2flowStage, out: &Path) -> Result<Im2flowSummary, PipelineError> {
    if !(cfg.m_max_quantile > 0.0 && cfg.m_max_quantile <= 1.0) {
        return Err(PipelineError::Config(format!("m_max_quantile must lie in (0, 1], got {}", cfg.m_max_quantile)));
    }
    cfg.loss.validate()?;
    cfg.train.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let phi = match &cfg.content {
        Some(p) => Some(load_classifier(p)?),
        None if cfg.loss.lambda > 0.0 => {
            return Err(PipelineError::Config("loss.lambda > 0 needs a content network checkpoint".into()))
        }
        None => None,
    };
    if cfg.model.input_size != ds.config.image_size {
        return Err(PipelineError::Config(format!(
            "model.input_size {} does not match the dataset image size {}",
            cfg.model.input_size, ds.config.image_size
        )));
    }
    write_resolved(out, cfg)?;
    let start = Instant::now();
    let (train, val) = (split_data(&ds, Split::Train)?, split_data(&ds, Split::Val)?);
    let m_max =
        magnitude_quantile(ds.train.iter().map(|s| &s.target), cfg.m_max_quantile, crate::flow::DEFAULT_EPS_MOTION);
    let mut model = Im2FlowNet::<f32>::new(cfg.model.clone(), m_max)?;
    let outcome = training::train_im2flow(
        &mut model,
        &train,
        &val,
        phi.as_ref(),
        &cfg.train,
        &cfg.loss,
        Some(out),
        &mut |r| log::info!("epoch {} {}: total {:.4} epe {:?}", r.epoch, r.split, r.total_loss, r.epe),
    )?;
    checkpoint::save_model(&model, &out.join(MODEL_CKPT))?;
    let summary = Im2flowSummary {
        m_max,
        best_epoch: outcome.best_epoch,
        best_val_epe: outcome.best_val_epe,
        steps: outcome.steps,
        seconds: start.elapsed().as_secs_f64(),
        trained_on: Split::Train,
        dataset_checksum: dataset_checksum(&cfg.dataset)?,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// predict

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictStage {
    pub model: PathBuf,
    /// One image file or a directory of `.png` images.
    pub input: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRecord {
    pub image: String,
    pub flo: String,
    pub visualization: String,
    pub mean_magnitude: f64,
}

fn load_rgb(path: &Path) -> Result<RgbImage, PipelineError> {
    Ok(image::open(path).map_err(|e| PipelineError::Stage(format!("image {}: {e}", path.display())))?.to_rgb8())
}

fn list_images(input: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(input).map_err(io_err(input))? {
        let path = entry.map_err(io_err(input))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::MissingInput(format!("no .png images in {}", input.display())));
    }
    Ok(files)
}

/// Writes `<stem>.flo` and `<stem>_flow.png` per input image plus
/// `predictions.jsonl`.
pub fn run_predict(cfg: &PredictStage, out: &Path) -> Result<Vec<PredictRecord>, PipelineError> {
    let model = load_model(&cfg.model)?;
    let files = list_images(require(&cfg.input, "input")?)?;
    write_resolved(out, cfg)?;
    let mut rows = Vec::new();
    for path in files {
        let img = load_rgb(&path)?;
        if img.width() != img.height() {
            return Err(PipelineError::Config(format!("{} is not square", path.display())));
        }
        check_input_size(&model, img.width() as usize)?;
        let pred = training::predict(&model, &frames_to_tensor(&[&img]), 1)?;
        let field = flows_of(&pred)?.remove(0);
        let stem = path.file_stem().expect("file name").to_string_lossy().to_string();
        let flo = out.join(format!("{stem}.flo"));
        let vis = out.join(format!("{stem}_flow.png"));
        flow_io::write_flo(&field, &flo)?;
        flow_io::flow_to_color(&field, model.m_max() as f32)
            .save(&vis)
            .map_err(|e| PipelineError::Stage(format!("{}: {e}", vis.display())))?;
        let mags = field.magnitudes();
        rows.push(PredictRecord {
            image: path.display().to_string(),
            flo: flo.display().to_string(),
            visualization: vis.display().to_string(),
            mean_magnitude: mags.iter().map(|m| *m as f64).sum::<f64>() / mags.len() as f64,
        });
    }
    synth::write_jsonl(&out.join("predictions.jsonl"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Im2flow,
    /// Ground truth of the nearest training frame in bottleneck feature space.
    Nn,
    Zero,
    /// Returns the ground truth; a sanity check of the evaluation path.
    Identity,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Im2flow => "im2flow",
            Predictor::Nn => "nn",
            Predictor::Zero => "zero",
            Predictor::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateStage {
    pub dataset: PathBuf,
    /// Needed by the `im2flow` and `nn` predictors.
    pub model: Option<PathBuf>,
    pub predictors: Vec<Predictor>,
    pub split: Split,
    pub eval: EvalConfig,
}

impl Default for EvaluateStage {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            model: None,
            predictors: vec![Predictor::Im2flow, Predictor::Nn, Predictor::Zero],
            split: Split::Test,
            eval: EvalConfig::default(),
        }
    }
}

fn predict_fields(
    predictor: Predictor,
    model: Option<&Im2FlowNet<f32>>,
    ds: &Dataset,
    samples: &[SyntheticSample],
) -> Result<Vec<FlowField>, PipelineError> {
    let need_model = || model.ok_or_else(|| PipelineError::Config(format!("predictor {} needs a model", predictor.name())));
    let frames = || frames_to_tensor(&samples.iter().map(|s| &s.frame).collect::<Vec<_>>());
    Ok(match predictor {
        Predictor::Identity => samples.iter().map(|s| s.target.clone()).collect(),
        Predictor::Zero => {
            samples.iter().map(|s| FlowField::zeros(s.target.width(), s.target.height())).collect()
        }
        Predictor::Im2flow => flows_of(&training::predict(need_model()?, &frames(), 64)?)?,
        Predictor::Nn => {
            let model = need_model()?;
            if ds.train.is_empty() {
                return Err(PipelineError::MissingInput("nn baseline needs a training pool".into()));
            }
            let pool_frames = frames_to_tensor(&ds.train.iter().map(|s| &s.frame).collect::<Vec<_>>());
            let pool = recognition::bottleneck_features(model, &pool_frames)?;
            let queries = recognition::bottleneck_features(model, &frames())?;
            recognition::nn_baseline(&pool, &queries)?.into_iter().map(|i| ds.train[i].target.clone()).collect()
        }
    })
}

/// Scores every predictor on one split; writes `report.json` (all reports)
/// and `report.txt` (the summary table).
pub fn run_evaluate(cfg: &EvaluateStage, out: &Path) -> Result<Vec<MetricsReport>, PipelineError> {
    if cfg.predictors.is_empty() {
        return Err(PipelineError::Config("no predictors selected".into()));
    }
    let ds = load_dataset(&cfg.dataset)?;
    let model = cfg.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        check_input_size(m, ds.config.image_size)?;
    }
    write_resolved(out, cfg)?;
    let samples = ds.split(cfg.split);
    let items: Vec<EvalItem> =
        samples.iter().map(|s| EvalItem { id: &s.id, image: &s.frame, gt: &s.target, fg: Some(&s.mask) }).collect();
    let mut reports = Vec::new();
    for &p in &cfg.predictors {
        let preds: Vec<Result<FlowField, String>> =
            predict_fields(p, model.as_ref(), &ds, samples)?.into_iter().map(Ok).collect();
        reports.push(metrics::evaluate(p.name(), &items, &preds, &cfg.eval)?);
    }
    write_json(&out.join("report.json"), &reports)?;
    let table = metrics::format_table(&reports);
    let path = out.join("report.txt");
    fs::write(&path, &table).map_err(io_err(&path))?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// train-streams

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStreamsStage {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub network: SmallCnnConfig,
    pub train: ClassifierTrainConfig,
    /// Also train the ground-truth-flow motion stream (upper bound).
    pub ground_truth_stream: bool,
}

impl Default for TrainStreamsStage {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            model: PathBuf::new(),
            network: SmallCnnConfig::default(),
            train: ClassifierTrainConfig::default(),
            ground_truth_stream: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    /// Weight on the appearance stream.
    pub weight: f64,
    pub val_fused_accuracy: f64,
    pub val_appearance_accuracy: f64,
    pub val_motion_accuracy: f64,
    pub val_motion_gt_accuracy: Option<f64>,
    pub model: PathBuf,
    pub seconds: f64,
}

fn stream_ckpt(kind: StreamKind) -> String {
    format!("{}.ckpt", kind.name())
}

/// Trains the appearance and hallucinated-motion streams (and optionally the
/// ground-truth stream) on the train split and picks the fusion weight on val.
pub fn run_train_streams(cfg: &TrainStreamsStage, out: &Path) -> Result<FusionSummary, PipelineError> {
    let ds = load_dataset(&cfg.dataset)?;
    let model = load_model(&cfg.model)?;
    check_input_size(&model, ds.config.image_size)?;
    write_resolved(out, cfg)?;
    let start = Instant::now();
    let (train, val) = (split_data(&ds, Split::Train)?, split_data(&ds, Split::Val)?);
    let train_flow = recognition::hallucinate(&model, &train.images)?;
    let val_flow = recognition::hallucinate(&model, &val.images)?;
    let fit = |kind: StreamKind, x: &Tensor<f32>, vx: &Tensor<f32>| -> Result<Vec<Vec<f64>>, PipelineError> {
        log::info!("training {} stream", kind.name());
        let s = recognition::train_stream(
            kind,
            x,
            &train.labels,
            Some((vx, &val.labels)),
            cfg.network.clone(),
            &cfg.train,
        )?;
        checkpoint::save_classifier(&s.net, &out.join(stream_ckpt(kind)))?;
        synth::write_jsonl(&out.join(format!("{}_history.jsonl", kind.name())), &s.history)?;
        Ok(s.predict_proba(vx)?)
    };
    let p_app = fit(StreamKind::Appearance, &train.images, &val.images)?;
    let p_mot = fit(StreamKind::Motion, &train_flow, &val_flow)?;
    let p_gt = if cfg.ground_truth_stream {
        Some(fit(StreamKind::MotionGroundTruth, &train.targets, &val.targets)?)
    } else {
        None
    };
    let (weight, val_fused_accuracy) = recognition::select_fusion_weight(&p_app, &p_mot, &val.labels)?;
    let acc = |p: &[Vec<f64>]| crate::classifier::accuracy(p, &val.labels);
    let summary = FusionSummary {
        weight,
        val_fused_accuracy,
        val_appearance_accuracy: acc(&p_app),
        val_motion_accuracy: acc(&p_mot),
        val_motion_gt_accuracy: p_gt.as_deref().map(acc),
        model: cfg.model.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&out.join(FUSION), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// recognize

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizeStage {
    /// Output directory of `train-streams`.
    pub streams: PathBuf,
    /// Flow model; defaults to the one recorded by `train-streams`.
    pub model: Option<PathBuf>,
    /// Labeled dataset to classify (one split), or ...
    pub dataset: Option<PathBuf>,
    pub split: Split,
    /// ... a directory of unlabeled `.png` images.
    pub images: Option<PathBuf>,
}

impl Default for RecognizeStage {
    fn default() -> Self {
        Self { streams: PathBuf::new(), model: None, dataset: None, split: Split::Test, images: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionRecord {
    pub id: String,
    pub predicted: String,
    pub label: Option<String>,
    pub appearance: Vec<f64>,
    pub motion: Vec<f64>,
    pub fused: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionSummary {
    pub weight: f64,
    pub n: usize,
    /// Present when labels are known: appearance, motion, fused and, when
    /// trained, the ground-truth motion stream.
    pub streams: Vec<StreamReport>,
}

impl RecognitionSummary {
    pub fn stream(&self, name: &str) -> Option<&StreamReport> {
        self.streams.iter().find(|s| s.name == name)
    }
}

fn class_name(label: usize) -> String {
    synth::ActionClass::from_label(label).map(|c| c.name().to_string()).unwrap_or_else(|| label.to_string())
}

pub fn run_recognize(cfg: &RecognizeStage, out: &Path) -> Result<RecognitionSummary, PipelineError> {
    let streams = require(&cfg.streams, "streams directory")?;
    let fusion: FusionSummary = read_json(&streams.join(FUSION))?;
    let model = load_model(cfg.model.as_deref().unwrap_or(&fusion.model))?;
    let app = load_classifier(&streams.join(stream_ckpt(StreamKind::Appearance)))?;
    let mot = load_classifier(&streams.join(stream_ckpt(StreamKind::Motion)))?;
    let gt_path = streams.join(stream_ckpt(StreamKind::MotionGroundTruth));

    let (ids, images, labeled) = match (&cfg.dataset, &cfg.images) {
        (Some(_), Some(_)) => return Err(PipelineError::Config("give either dataset or images, not both".into())),
        (None, None) => return Err(PipelineError::Config("no dataset or images given".into())),
        (Some(d), None) => {
            let ds = load_dataset(d)?;
            let data = split_data(&ds, cfg.split)?;
            (data.ids.clone(), data.images.clone(), Some(data))
        }
        (None, Some(dir)) => {
            let files = list_images(require(dir, "images")?)?;
            let frames = files.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>, _>>()?;
            let ids = files.iter().map(|p| p.file_stem().expect("file").to_string_lossy().to_string()).collect();
            (ids, frames_to_tensor(&frames.iter().collect::<Vec<_>>()), None)
        }
    };
    check_input_size(&model, images.w())?;
    write_resolved(out, cfg)?;
    let p_app = app.predict_proba(&images, 64)?;
    let p_mot = mot.predict_proba(&recognition::hallucinate(&model, &images)?, 64)?;
    let p_fused = recognition::fuse_all(&p_app, &p_mot, fusion.weight)?;
    let pred = recognition::predictions(&p_fused);
    let labels = labeled.as_ref().map(|d| d.labels.clone());
    let records: Vec<RecognitionRecord> = (0..ids.len())
        .map(|i| RecognitionRecord {
            id: ids[i].clone(),
            predicted: class_name(pred[i]),
            label: labels.as_ref().map(|l| class_name(l[i])),
            appearance: p_app[i].clone(),
            motion: p_mot[i].clone(),
            fused: p_fused[i].clone(),
        })
        .collect();
    synth::write_jsonl(&out.join("predictions.jsonl"), &records)?;

    let mut reports = Vec::new();
    if let Some(data) = &labeled {
        let k = app.config.num_classes;
        reports.push(recognition::stream_report("appearance", &p_app, &data.labels, k));
        reports.push(recognition::stream_report("motion", &p_mot, &data.labels, k));
        reports.push(recognition::stream_report("fused", &p_fused, &data.labels, k));
        if gt_path.exists() {
            let gt = load_classifier(&gt_path)?;
            let p_gt = gt.predict_proba(&data.targets, 64)?;
            reports.push(recognition::stream_report("motion-gt", &p_gt, &data.labels, k));
        }
    }
    let summary = RecognitionSummary { weight: fusion.weight, n: ids.len(), streams: reports };
    write_json(&out.join("recognition.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// rank-motion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlledSet {
    pub seed: u64,
    pub pairs: usize,
    /// Motion magnitudes (px/frame) of the two members of each pair.
    pub slow: f64,
    pub fast: f64,
    /// Background-only frames, the zero-motion controls.
    pub blanks: usize,
}

impl Default for ControlledSet {
    fn default() -> Self {
        Self { seed: 1000, pairs: 100, slow: 0.5, fast: 4.0, blanks: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankMotionStage {
    pub model: PathBuf,
    /// Directory of images to rank over the whole frame; when absent the
    /// controlled set is generated and ranked.
    pub images: Option<PathBuf>,
    pub controlled: ControlledSet,
}

impl Default for RankMotionStage {
    fn default() -> Self {
        Self { model: PathBuf::new(), images: None, controlled: ControlledSet::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub n: usize,
    /// Controlled set only: fraction of pairs whose fast member ranks above
    /// its slow member.
    pub pair_fraction: Option<f64>,
    /// Controlled set only: every blank frame ranks below every other image.
    pub blanks_last: Option<bool>,
}

pub fn run_rank_motion(cfg: &RankMotionStage, out: &Path) -> Result<RankSummary, PipelineError> {
    let model = load_model(&cfg.model)?;
    let size = model.config.input_size;
    let (ids, frames, masks, controlled): (Vec<String>, Vec<RgbImage>, Vec<Option<Mask>>, bool) = match &cfg.images {
        Some(dir) => {
            let files = list_images(require(dir, "images")?)?;
            let frames = files.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>, _>>()?;
            let ids = files.iter().map(|p| p.file_stem().expect("file").to_string_lossy().to_string()).collect();
            let n = frames.len();
            (ids, frames, vec![None; n], false)
        }
        None => {
            let c = &cfg.controlled;
            if c.pairs == 0 {
                return Err(PipelineError::Config("controlled.pairs must be at least 1".into()));
            }
            let pairs = synth::motion_scale_pairs(c.seed, c.pairs, size, c.slow, c.fast)?;
            let (mut ids, mut frames, mut masks) = (Vec::new(), Vec::new(), Vec::new());
            for (slow, fast) in pairs {
                for s in [slow, fast] {
                    ids.push(s.id);
                    frames.push(s.frame);
                    masks.push(Some(s.mask));
                }
            }
            for (i, f) in synth::blank_frames(c.seed, c.blanks, size).into_iter().enumerate() {
                ids.push(format!("blank/{i:04}"));
                frames.push(f);
                masks.push(None);
            }
            (ids, frames, masks, true)
        }
    };
    for f in &frames {
        check_input_size(&model, f.width() as usize)?;
    }
    write_resolved(out, cfg)?;
    let images = frames_to_tensor(&frames.iter().collect::<Vec<_>>());
    let ranking = recognition::rank_by_motion_potential(&model, &images, &masks)?;
    let records: Vec<RankRecord> = ranking
        .iter()
        .enumerate()
        .map(|(rank, e)| RankRecord { rank, id: ids[e.index].clone(), score: e.score })
        .collect();
    synth::write_jsonl(&out.join("ranking.jsonl"), &records)?;

    let mut summary = RankSummary { n: ids.len(), pair_fraction: None, blanks_last: None };
    if controlled {
        let mut position = vec![0; ids.len()];
        let mut score = vec![0.0; ids.len()];
        for (rank, e) in ranking.iter().enumerate() {
            position[e.index] = rank;
            score[e.index] = e.score;
        }
        let pairs = cfg.controlled.pairs;
        let wins = (0..pairs).filter(|i| position[2 * i + 1] < position[2 * i]).count();
        summary.pair_fraction = Some(wins as f64 / pairs as f64);
        // Strictly below every shape image, so ties do not count as last.
        let lowest_shape = score[..2 * pairs].iter().copied().fold(f64::INFINITY, f64::min);
        summary.blanks_last = Some(score[2 * pairs..].iter().all(|s| *s < lowest_shape));
    }
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MaskKind;

    fn tiny_synth(seed: u64) -> SynthStage {
        SynthStage {
            seed,
            dataset: DatasetConfig { n_train: 16, n_val: 8, n_test: 8, image_size: 48, ..DatasetConfig::default() },
        }
    }

    #[test]
    fn config_overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "dataset = \"a\"\n[train]\nepochs = 3\n").unwrap();
        let sets = vec!["train.lr=0.5".to_string(), "loss.weighting=\"uniform\"".to_string(), string_override("dataset", "7")];
        let cfg: TrainIm2flowStage = load_config(Some(&path), &sets).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.loss.weighting, training::Weighting::Uniform);
        assert_eq!(cfg.dataset, PathBuf::from("7"));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn config_errors_are_classified() {
        let e = load_config::<SynthStage>(None, &["bogus=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
        let e = load_config::<SynthStage>(None, &["seed".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = load_config::<SynthStage>(Some(Path::new("/nonexistent/c.toml")), &[]).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        // bare words fall back to strings
        let cfg: PredictStage = load_config(None, &["input=some/dir".into()]).unwrap();
        assert_eq!(cfg.input, PathBuf::from("some/dir"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainIm2flowStage { content: Some("phi.ckpt".into()), ..Default::default() };
        write_resolved(dir.path(), &cfg).unwrap();
        let back: TrainIm2flowStage = load_config(Some(&dir.path().join(RESOLVED_CONFIG)), &[]).unwrap();
        assert_eq!(back, cfg);
        let stages = EvaluateStage::default();
        write_resolved(dir.path(), &stages).unwrap();
        let back: EvaluateStage = load_config(Some(&dir.path().join(RESOLVED_CONFIG)), &[]).unwrap();
        assert_eq!(back, stages);
    }

    #[test]
    fn synth_is_deterministic_and_guards_foreign_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let a = run_synth(&tiny_synth(7), &dir.path().join("a")).unwrap();
        let b = run_synth(&tiny_synth(7), &dir.path().join("b")).unwrap();
        assert_eq!(a.checksum, b.checksum);
        // rerunning into an existing dataset replaces it
        let again = run_synth(&tiny_synth(7), &dir.path().join("a")).unwrap();
        assert_eq!(again.checksum, a.checksum);
        let c = run_synth(&tiny_synth(8), &dir.path().join("c")).unwrap();
        assert_ne!(a.checksum, c.checksum);
        let foreign = dir.path().join("foreign");
        fs::create_dir_all(&foreign).unwrap();
        fs::write(foreign.join("keep.txt"), "x").unwrap();
        assert_eq!(run_synth(&tiny_synth(7), &foreign).unwrap_err().exit_code(), 2);
        assert!(foreign.join("keep.txt").exists());
    }

    #[test]
    fn oracle_predictors_score_as_expected() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        run_synth(&tiny_synth(3), &data).unwrap();
        let cfg = EvaluateStage {
            dataset: data.clone(),
            predictors: vec![Predictor::Identity, Predictor::Zero],
            ..Default::default()
        };
        let reports = run_evaluate(&cfg, &dir.path().join("eval")).unwrap();
        let ds = synth::read_dataset(&data).unwrap();
        for kind in MaskKind::ALL {
            let id = reports[0].scores(kind).unwrap();
            assert_eq!(id.epe, Some(0.0));
            assert_eq!(id.ds, Some(1.0));
            assert_eq!(id.os, Some(1.0));
        }
        let mean_mag: f64 = ds
            .test
            .iter()
            .map(|s| s.target.magnitudes().iter().map(|m| *m as f64).sum::<f64>() / s.target.len() as f64)
            .sum::<f64>()
            / ds.test.len() as f64;
        let zero = reports[1].scores(MaskKind::All).unwrap();
        assert!((zero.epe.unwrap() - mean_mag).abs() < 1e-6);
        assert!(dir.path().join("eval/report.txt").exists());
        assert!(dir.path().join("eval").join(RESOLVED_CONFIG).exists());

        let needs_model = EvaluateStage { predictors: vec![Predictor::Im2flow], ..cfg };
        assert_eq!(run_evaluate(&needs_model, &dir.path().join("e2")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_inputs_and_bad_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EvaluateStage { dataset: dir.path().join("nope"), ..Default::default() };
        assert_eq!(run_evaluate(&cfg, &dir.path().join("o")).unwrap_err().exit_code(), 3);
        let empty = TrainContentStage::default();
        assert_eq!(run_train_content(&empty, &dir.path().join("o")).unwrap_err().exit_code(), 2);
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, b"not a checkpoint").unwrap();
        let p = PredictStage { model: bad, input: dir.path().to_path_buf() };
        assert_eq!(run_predict(&p, &dir.path().join("o")).unwrap_err().exit_code(), 5);
    }

    #[test]
    fn predict_and_rank_with_an_untrained_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig { input_size: 48, base_channels: 8, depth: 3, dilation_rates: vec![1, 2], seed: 0 };
        let model = Im2FlowNet::<f32>::new(cfg, 2.0).unwrap();
        let ckpt = dir.path().join("m.ckpt");
        checkpoint::save_model(&model, &ckpt).unwrap();
        let data = dir.path().join("data");
        run_synth(&tiny_synth(1), &data).unwrap();

        let rows = run_predict(&PredictStage { model: ckpt.clone(), input: data.join("test") }, &dir.path().join("p"))
            .unwrap();
        // images and masks are both .png
        assert_eq!(rows.len(), 16);
        let field = flow_io::read_flo(Path::new(&rows[0].flo)).unwrap();
        assert_eq!((field.width(), field.height()), (48, 48));

        let rank = RankMotionStage {
            model: ckpt,
            images: None,
            controlled: ControlledSet { seed: 2, pairs: 3, slow: 0.5, fast: 4.0, blanks: 2 },
        };
        let s = run_rank_motion(&rank, &dir.path().join("r")).unwrap();
        assert_eq!(s.n, 8);
        assert!(s.pair_fraction.is_some() && s.blanks_last.is_some());
        let lines = fs::read_to_string(dir.path().join("r/ranking.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 8);
    }
}
