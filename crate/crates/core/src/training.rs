//! Losses, gradient checking, augmentation and the optimization loops for
//! the flow network and its content network.
//!
//! The pixel loss is the per-sample L2 norm of the prediction error, averaged
//! over the batch. In magnitude-weighted mode the squared direction errors are
//! scaled by `w = f3_target / mean(f3_target)` (a constant, no gradient), so
//! direction channels learn only where the target moves. The content loss
//! compares activations of a fixed classifier `phi` at one tap.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use im2flow_nn::{Adam, AdamConfig, Module, Real, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::classifier::{
    channel_stats, train_classifier, ClassifierEpoch, ClassifierError, ClassifierTrainConfig, SmallCnn, SmallCnnConfig,
};
use crate::metrics;
use crate::model::{Im2FlowNet, ModelError};
use crate::synth::{frames_to_tensor, sample_rng, SyntheticSample};
use crate::{decode_flow, encode_flow, flip_horizontal, EncodedFlow, FlowError, FlowField, MotionThresholds};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("prediction shape {pred:?} does not match target shape {target:?}")]
    Shape { pred: [usize; 4], target: [usize; 4] },
    #[error("target is not a valid encoded flow: {0}")]
    InvalidTarget(String),
    #[error("content tap {tap} is empty for {height}x{width} inputs")]
    TapShape { tap: usize, height: usize, width: usize },
    #[error("gradient check needs at most 4x4 spatial inputs, got {height}x{width}")]
    GradcheckSize { height: usize, width: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; model restored to the last good state{}",
        .checkpoint.as_ref().map(|p| format!(" (saved to {})", p.display())).unwrap_or_default())]
    NonFinite { epoch: usize, step: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    MagnitudeWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub content_layer: usize,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.02, content_layer: 2, weighting: Weighting::MagnitudeWeighted }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainingError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(1..=3).contains(&self.content_layer) {
            return Err(TrainingError::Config(format!("content_layer must be 1, 2 or 3, got {}", self.content_layer)));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(), TrainingError> {
    if pred.shape() != target.shape() || pred.c() != 3 {
        return Err(TrainingError::Shape { pred: pred.shape(), target: target.shape() });
    }
    let p = target.plane_len();
    for i in 0..target.n() {
        if let Some(m) = target.sample(i)[2 * p..].iter().find(|m| !(m.as_f64() >= 0.0)) {
            return Err(TrainingError::InvalidTarget(format!("magnitude {m} in sample {i}")));
        }
    }
    Ok(())
}

/// Per-pixel direction weights of one target sample.
fn direction_weights<T: Real>(f3: &[T], mode: Weighting) -> Vec<f64> {
    match mode {
        Weighting::Uniform => vec![1.0; f3.len()],
        Weighting::MagnitudeWeighted => {
            let mean = f3.iter().map(|m| m.as_f64()).sum::<f64>() / f3.len() as f64;
            if mean > 0.0 {
                f3.iter().map(|m| m.as_f64() / mean).collect()
            } else {
                vec![0.0; f3.len()]
            }
        }
    }
}

/// Pixel loss and its gradient with respect to `pred`.
pub fn pixel_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mode: Weighting) -> Result<(f64, Tensor<T>), TrainingError> {
    check_pair(pred, target)?;
    let (n, p) = (pred.n(), pred.plane_len());
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (ps, ts) = (pred.sample(i), target.sample(i));
        let w = direction_weights(&ts[2 * p..], mode);
        let diff = |k: usize| ps[k].as_f64() - ts[k].as_f64();
        let mut s = 0.0;
        for k in 0..p {
            s += w[k] * (diff(k).powi(2) + diff(p + k).powi(2)) + diff(2 * p + k).powi(2);
        }
        let norm = s.sqrt();
        total += norm;
        if norm > 0.0 {
            let scale = 1.0 / (n as f64 * norm);
            let g = grad.sample_mut(i);
            for k in 0..p {
                g[k] = T::lit(scale * w[k] * diff(k));
                g[p + k] = T::lit(scale * w[k] * diff(p + k));
                g[2 * p + k] = T::lit(scale * diff(2 * p + k));
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// `||phi_j(pred) - phi_j(target)||^2 / (D H W)`, averaged over the batch,
/// with the gradient with respect to `pred` when requested. `phi` is only read.
pub fn content_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    phi: &SmallCnn<T>,
    j: usize,
    need_grad: bool,
) -> Result<(f64, Option<Tensor<T>>), TrainingError> {
    if pred.shape() != target.shape() {
        return Err(TrainingError::Shape { pred: pred.shape(), target: target.shape() });
    }
    let [d, th, tw] = phi.tap_shape(j, pred.h(), pred.w())?;
    let size = d * th * tw;
    if size == 0 {
        return Err(TrainingError::TapShape { tap: j, height: pred.h(), width: pred.w() });
    }
    let b = phi.tap(target, j)?;
    let (a, trace) = if need_grad {
        let (a, t) = phi.tap_with_trace(pred, j)?;
        (a, Some(t))
    } else {
        (phi.tap(pred, j)?, None)
    };
    let n = pred.n() as f64;
    let norm = size as f64;
    let loss = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / norm / n;
    let grad = trace.map(|trace| {
        let scale = 2.0 / (norm * n);
        let ga = Tensor::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| T::lit(scale * (x.as_f64() - y.as_f64()))).collect(),
        );
        phi.tap_backward(&trace, &ga)
    });
    Ok((loss, grad))
}

/// Direction channels of `pred` restricted to pixels where the target moves;
/// elsewhere they take the target's values. Channel 3 is unchanged.
fn gate_directions<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let p = pred.plane_len();
    let mut out = pred.clone();
    for i in 0..pred.n() {
        let ts = target.sample(i);
        let os = out.sample_mut(i);
        for k in 0..p {
            if ts[2 * p + k] <= T::zero() {
                os[k] = ts[k];
                os[p + k] = ts[p + k];
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LossParts<T: Real> {
    pub pixel: f64,
    /// Computed whenever `phi` is supplied, even at `lambda = 0`, for logging.
    pub content: Option<f64>,
    pub total: f64,
    pub grad: Option<Tensor<T>>,
}

/// `pixel + lambda * content`.
///
/// In magnitude-weighted mode `phi` sees the predicted direction channels
/// only where the target moves, so the whole objective has exactly zero
/// direction gradient at static target pixels.
pub fn total_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    phi: Option<&SmallCnn<T>>,
    cfg: &LossConfig,
    need_grad: bool,
) -> Result<LossParts<T>, TrainingError> {
    cfg.validate()?;
    let (pixel, mut grad) = pixel_loss(pred, target, cfg.weighting)?;
    if cfg.lambda > 0.0 && phi.is_none() {
        return Err(TrainingError::Config("a content network is required when lambda > 0".into()));
    }
    let mut content = None;
    let mut total = pixel;
    if let Some(phi) = phi {
        let gated;
        let input = match cfg.weighting {
            Weighting::MagnitudeWeighted => {
                gated = gate_directions(pred, target);
                &gated
            }
            Weighting::Uniform => pred,
        };
        let with_grad = need_grad && cfg.lambda > 0.0;
        let (c, g) = content_loss(input, target, phi, cfg.content_layer, with_grad)?;
        content = Some(c);
        if cfg.lambda > 0.0 {
            total = pixel + cfg.lambda * c;
        }
        if let Some(g) = g {
            let gated = match cfg.weighting {
                Weighting::MagnitudeWeighted => mask_static_directions(g, target),
                Weighting::Uniform => g,
            };
            let lam = T::lit(cfg.lambda);
            for (d, s) in grad.data_mut().iter_mut().zip(gated.data()) {
                *d += lam * *s;
            }
        }
    }
    Ok(LossParts { pixel, content, total, grad: need_grad.then_some(grad) })
}

fn mask_static_directions<T: Real>(mut g: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let p = g.plane_len();
    for i in 0..g.n() {
        let ts = target.sample(i);
        let gs = g.sample_mut(i);
        for k in 0..p {
            if ts[2 * p + k] <= T::zero() {
                gs[k] = T::zero();
                gs[p + k] = T::zero();
            }
        }
    }
    g
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |a - n| / max(|a|, |n|, 1e-6)` over all coordinates.
    pub max_rel_error: f64,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

/// Central finite differences of `f` around `x` against its analytic gradient.
pub fn gradcheck(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>), TrainingError>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheck, TrainingError> {
    if x.h() > 4 || x.w() > 4 {
        return Err(TrainingError::GradcheckSize { height: x.h(), width: x.w() });
    }
    let (_, analytic) = f(x)?;
    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, analytic, numeric })
}

/// Frames and encoded targets of a sample set, ready for batching.
#[derive(Clone, Debug)]
pub struct FlowData {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl FlowData {
    pub fn from_samples(samples: &[SyntheticSample]) -> Self {
        assert!(!samples.is_empty(), "no samples");
        let frames: Vec<_> = samples.iter().map(|s| &s.frame).collect();
        let encoded: Vec<Tensor<f32>> =
            samples.iter().map(|s| encode_flow(&s.target, MotionThresholds::default()).to_tensor()).collect();
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: frames_to_tensor(&frames),
            targets: Tensor::stack(&encoded.iter().collect::<Vec<_>>()),
            labels: samples.iter().map(|s| s.label()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn target_fields(&self) -> Result<Vec<FlowField>, FlowError> {
        (0..self.len()).map(|i| Ok(decode_flow(&EncodedFlow::from_tensor(&self.targets, i)?))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub hflip: bool,
    /// Reflect-pad width for random crops; 0 disables cropping.
    pub crop_pad: usize,
    pub eval_batch_size: usize,
    /// Start the magnitude head at the mean training magnitude.
    pub init_magnitude_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            hflip: true,
            crop_pad: 4,
            eval_batch_size: 64,
            init_magnitude_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: &str| Err(TrainingError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Transform drawn for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    /// Crop origin inside the padded frame, each in `0..=2 * pad`.
    pub offset: (usize, usize),
    pub pad: usize,
}

impl Augmentation {
    pub const NONE: Augmentation = Augmentation { flip: false, offset: (0, 0), pad: 0 };

    /// Pure function of `(seed, epoch, index)`.
    pub fn draw(cfg: &TrainConfig, epoch: usize, index: usize) -> Self {
        let mut rng = sample_rng(cfg.seed, &format!("augment/{epoch}"), index);
        let flip = cfg.hflip && rng.gen_bool(0.5);
        let pad = cfg.crop_pad;
        let offset = if pad > 0 { (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)) } else { (0, 0) };
        Self { flip, offset, pad }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Reflect-padded crop of every channel plane.
fn crop_planes(data: &[f32], h: usize, w: usize, aug: &Augmentation) -> Vec<f32> {
    let (ox, oy) = (aug.offset.0 as isize - aug.pad as isize, aug.offset.1 as isize - aug.pad as isize);
    let mut out = Vec::with_capacity(data.len());
    for plane in data.chunks(h * w) {
        for y in 0..h as isize {
            let sy = reflect(y + oy, h);
            for x in 0..w as isize {
                out.push(plane[sy * w + reflect(x + ox, w)]);
            }
        }
    }
    out
}

/// Applies the same flip and crop to one image (`3 x h x w`, channel-major)
/// and its encoded target. The target flip goes through the flow field so the
/// horizontal component changes sign.
pub fn augment_pair(image: &[f32], target: &EncodedFlow, aug: &Augmentation) -> (Vec<f32>, EncodedFlow) {
    let (w, h) = (target.width(), target.height());
    let mut img = image.to_vec();
    let mut tgt = target.clone();
    if aug.flip {
        for row in img.chunks_mut(w) {
            row.reverse();
        }
        tgt = encode_flow(&flip_horizontal(&decode_flow(&tgt)), MotionThresholds::default());
    }
    if aug.pad > 0 {
        img = crop_planes(&img, h, w, aug);
        let t = crop_planes(tgt.to_tensor().data(), h, w, aug);
        let p = h * w;
        tgt = EncodedFlow::new(w, h, t[..p].to_vec(), t[p..2 * p].to_vec(), t[2 * p..].to_vec()).expect("cropped flow");
    }
    (img, tgt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: String,
    pub pixel_loss: f64,
    pub content_loss: Option<f64>,
    pub total_loss: f64,
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub best_val_epe: f64,
    pub steps: usize,
}

/// Inference-mode predictions in batches.
pub fn predict(model: &Im2FlowNet<f32>, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>, ModelError> {
    let mut outs = Vec::new();
    let idx: Vec<usize> = (0..images.n()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        outs.push(model.forward(&images.gather(chunk))?);
    }
    Ok(Tensor::stack(&outs.iter().collect::<Vec<_>>()))
}

fn mean_magnitude(targets: &Tensor<f32>) -> f64 {
    let mut sum = 0.0;
    for b in 0..targets.n() {
        sum += targets.plane(b, 2).iter().map(|v| *v as f64).sum::<f64>();
    }
    sum / (targets.n() * targets.h() * targets.w()).max(1) as f64
}

/// Losses and all-pixel EPE of `model` on `data`, in inference mode.
pub fn evaluate_split(
    model: &Im2FlowNet<f32>,
    data: &FlowData,
    phi: Option<&SmallCnn<f32>>,
    loss: &LossConfig,
    batch: usize,
) -> Result<HistoryRecord, TrainingError> {
    let pred = predict(model, &data.images, batch)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut pixel, mut content, mut total, mut epe) = (0.0, 0.0, 0.0, 0.0);
    for chunk in idx.chunks(batch.max(1)) {
        let (p, t) = (pred.gather(chunk), data.targets.gather(chunk));
        let parts = total_loss(&p, &t, phi, loss, false)?;
        let k = chunk.len() as f64;
        pixel += parts.pixel * k;
        content += parts.content.unwrap_or(0.0) * k;
        total += parts.total * k;
        for i in 0..chunk.len() {
            let pf = decode_flow(&EncodedFlow::from_tensor(&p, i)?);
            let tf = decode_flow(&EncodedFlow::from_tensor(&t, i)?);
            epe += metrics::epe(&pf, &tf, None).expect("non-empty frame");
        }
    }
    let n = data.len() as f64;
    Ok(HistoryRecord {
        epoch: 0,
        split: "val".into(),
        pixel_loss: pixel / n,
        content_loss: phi.map(|_| content / n),
        total_loss: total / n,
        epe: Some(epe / n),
    })
}

fn build_batch(data: &FlowData, chunk: &[usize], cfg: &TrainConfig, epoch: usize) -> (Tensor<f32>, Tensor<f32>) {
    let (h, w) = (data.images.h(), data.images.w());
    let mut xs = Vec::with_capacity(chunk.len() * 3 * h * w);
    let mut ys = Vec::with_capacity(chunk.len() * 3 * h * w);
    for &i in chunk {
        let aug = Augmentation::draw(cfg, epoch, i);
        if aug == Augmentation::NONE {
            xs.extend_from_slice(data.images.sample(i));
            ys.extend_from_slice(data.targets.sample(i));
            continue;
        }
        let target = EncodedFlow::from_tensor(&data.targets, i).expect("stored targets are valid");
        let (img, tgt) = augment_pair(data.images.sample(i), &target, &aug);
        xs.extend(img);
        ys.extend_from_slice(tgt.to_tensor().data());
    }
    (Tensor::from_vec([chunk.len(), 3, h, w], xs), Tensor::from_vec([chunk.len(), 3, h, w], ys))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainingError + '_ {
    move |source| TrainingError::Io { path: path.to_path_buf(), source }
}

/// Adam on the total loss. Input statistics are fitted on the training frames.
/// A validation record (epoch 0) precedes training; afterwards each epoch adds
/// a train and a val record. The model ends in its best-val-EPE state.
///
/// With `out_dir`, the history is streamed to `history.jsonl` and the best
/// state to `best.ckpt`; on a non-finite loss the last good state is written
/// to `last_good.ckpt` before returning the error.
pub fn train_im2flow(
    model: &mut Im2FlowNet<f32>,
    train: &FlowData,
    val: &FlowData,
    phi: Option<&SmallCnn<f32>>,
    cfg: &TrainConfig,
    loss: &LossConfig,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&HistoryRecord),
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    loss.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainingError::Config("train and val sets must be nonempty".into()));
    }
    if loss.lambda > 0.0 && phi.is_none() {
        return Err(TrainingError::Config("a content network is required when lambda > 0".into()));
    }
    let mut history_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("history.jsonl");
            Some((File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut emit = |rec: HistoryRecord, history: &mut Vec<HistoryRecord>| -> Result<(), TrainingError> {
        if let Some((f, path)) = history_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(io_err(path))?;
        }
        observer(&rec);
        history.push(rec);
        Ok(())
    };

    let (mean, std) = channel_stats(&train.images);
    model.set_input_stats(&mean, &std.iter().map(|s| s.max(1e-6)).collect::<Vec<_>>());
    if cfg.init_magnitude_bias {
        model.init_magnitude_bias(mean_magnitude(&train.targets));
    }
    let initial = evaluate_split(model, val, phi, loss, cfg.eval_batch_size)?;
    let mut best_val_epe = initial.epe.unwrap_or(f64::INFINITY);
    emit(initial, &mut history)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut last_good = model.clone();

    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut sample_rng(cfg.seed, "shuffle", epoch));
        let (mut pixel, mut content, mut total) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = build_batch(train, chunk, cfg, epoch);
            let (pred, trace) = model.forward_train(&x)?;
            let parts = total_loss(&pred, &y, phi, loss, true)?;
            if !parts.total.is_finite() || !pred.all_finite() {
                *model = last_good;
                let checkpoint = match out_dir {
                    Some(dir) => {
                        let path = dir.join("last_good.ckpt");
                        checkpoint::save_model(model, &path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainingError::NonFinite { epoch, step, checkpoint });
            }
            let k = chunk.len() as f64;
            pixel += parts.pixel * k;
            content += parts.content.unwrap_or(0.0) * k;
            total += parts.total * k;
            model.zero_grad();
            model.backward(&trace, parts.grad.as_ref().expect("gradient requested"));
            opt.step(model);
            steps += 1;
        }
        let n = train.len() as f64;
        emit(
            HistoryRecord {
                epoch,
                split: "train".into(),
                pixel_loss: pixel / n,
                content_loss: phi.map(|_| content / n),
                total_loss: total / n,
                epe: None,
            },
            &mut history,
        )?;
        let mut rec = evaluate_split(model, val, phi, loss, cfg.eval_batch_size)?;
        rec.epoch = epoch;
        let epe = rec.epe.unwrap_or(f64::INFINITY);
        if !rec.total_loss.is_finite() {
            *model = last_good;
            return Err(TrainingError::NonFinite { epoch, step: usize::MAX, checkpoint: None });
        }
        emit(rec, &mut history)?;
        last_good = model.clone();
        if epe < best_val_epe {
            best_val_epe = epe;
            best_epoch = epoch;
            best = model.clone();
            best.zero_grad();
            if let Some(dir) = out_dir {
                checkpoint::save_model(&best, &dir.join("best.ckpt"))?;
            }
        }
    }
    if best_epoch == 0 {
        if let Some(dir) = out_dir {
            checkpoint::save_model(&best, &dir.join("best.ckpt"))?;
        }
    }
    *model = best;
    Ok(TrainOutcome { history, best_epoch, best_val_epe, steps })
}

/// Trains the content network `phi` as a flow-map action classifier.
pub fn train_content_network(
    train: &FlowData,
    val: Option<&FlowData>,
    net_cfg: SmallCnnConfig,
    train_cfg: &ClassifierTrainConfig,
) -> Result<(SmallCnn<f32>, Vec<ClassifierEpoch>), TrainingError> {
    let mut net = SmallCnn::new(net_cfg)?;
    let val = val.map(|v| (&v.targets, v.labels.as_slice()));
    let history = train_classifier(&mut net, &train.targets, &train.labels, val, train_cfg)?;
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, DatasetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Random encoded target with some static pixels.
    fn random_target(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
        let p = h * w;
        let mut data = Vec::new();
        for _ in 0..n {
            let mut f3: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..3.0)).collect();
            f3[0] = 0.0;
            f3[p - 1] = 0.0;
            let angles: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            data.extend(angles.iter().zip(&f3).map(|(a, m)| if *m > 0.0 { a.sin() } else { 0.0 }));
            data.extend(angles.iter().zip(&f3).map(|(a, m)| if *m > 0.0 { a.cos() } else { 0.0 }));
            data.extend(f3);
        }
        Tensor::from_vec([n, 3, h, w], data)
    }

    fn small_phi() -> SmallCnn<f64> {
        let mut phi = SmallCnn::<f64>::new(SmallCnnConfig { channels: [4, 5, 6], seed: 11, ..Default::default() }).unwrap();
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(3), [4, 3, 4, 4], -1.0, 1.0).cast::<f32>();
        phi.fit_input_stats(&x);
        phi
    }

    #[test]
    fn pixel_loss_elementary_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_target(&mut rng, 2, 4, 4);
        assert_eq!(pixel_loss(&t, &t, Weighting::Uniform).unwrap().0, 0.0);
        assert_eq!(pixel_loss(&t, &t, Weighting::MagnitudeWeighted).unwrap().0, 0.0);
        let zero = Tensor::<f64>::zeros([1, 3, 5, 4]);
        let mut one = zero.clone();
        one.plane_mut(0, 2).iter_mut().for_each(|v| *v = 1.0);
        let (l, _) = pixel_loss(&one, &zero, Weighting::Uniform).unwrap();
        assert!((l - 20f64.sqrt()).abs() < 1e-12);
        assert!(pixel_loss(&zero, &Tensor::zeros([1, 3, 4, 4]), Weighting::Uniform).is_err());
    }

    #[test]
    fn gradchecks_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_target(&mut rng, 2, 4, 4);
        let x = random_tensor(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
        let phi = small_phi();
        for mode in [Weighting::Uniform, Weighting::MagnitudeWeighted] {
            let r = gradcheck(&mut |p| pixel_loss(p, &t, mode), &x, 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-3, "{mode:?}: {}", r.max_rel_error);
        }
        let r = gradcheck(&mut |p| Ok(content_loss(p, &t, &phi, 2, true).map(|(l, g)| (l, g.unwrap()))?), &x, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-3, "content: {}", r.max_rel_error);
        for mode in [Weighting::Uniform, Weighting::MagnitudeWeighted] {
            let cfg = LossConfig { weighting: mode, ..Default::default() };
            let r = gradcheck(&mut |p| total_loss(p, &t, Some(&phi), &cfg, true).map(|l| (l.total, l.grad.unwrap())), &x, 1e-6)
                .unwrap();
            assert!(r.max_rel_error < 1e-3, "total {mode:?}: {}", r.max_rel_error);
        }
        assert!(gradcheck(&mut |p| pixel_loss(p, p, Weighting::Uniform), &Tensor::zeros([1, 3, 5, 4]), 1e-6).is_err());
    }

    #[test]
    fn static_pixels_get_no_direction_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_target(&mut rng, 2, 4, 4);
        let x = random_tensor(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
        let phi = small_phi();
        let g = total_loss(&x, &t, Some(&phi), &LossConfig::default(), true).unwrap().grad.unwrap();
        for i in 0..2 {
            for k in [0, 15] {
                assert_eq!(g.sample(i)[k], 0.0);
                assert_eq!(g.sample(i)[16 + k], 0.0);
            }
            assert_ne!(g.sample(i)[32], 0.0);
        }
        // Uniform mode does not gate.
        let cfg = LossConfig { weighting: Weighting::Uniform, ..Default::default() };
        let gu = total_loss(&x, &t, Some(&phi), &cfg, true).unwrap().grad.unwrap();
        assert_ne!(gu.sample(0)[0], 0.0);
        // Finite differences agree at those coordinates too.
        let r = gradcheck(&mut |p| pixel_loss(p, &t, Weighting::MagnitudeWeighted), &x, 1e-6).unwrap();
        assert!(r.numeric.sample(0)[0].abs() < 1e-8);
    }

    #[test]
    fn content_loss_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = small_phi();
        let a = random_tensor(&mut rng, [3, 3, 4, 4], -1.0, 1.0);
        let b = random_target(&mut rng, 3, 4, 4);
        assert_eq!(content_loss(&b, &b, &phi, 2, false).unwrap().0, 0.0);
        let (l, _) = content_loss(&a, &b, &phi, 2, false).unwrap();
        let (fa, fb) = (phi.tap(&a, 2).unwrap(), phi.tap(&b, 2).unwrap());
        let mut oracle = 0.0;
        for i in 0..3 {
            let d: f64 = fa.sample(i).iter().zip(fb.sample(i)).map(|(x, y)| (x - y) * (x - y)).sum();
            oracle += d / fa.sample_len() as f64;
        }
        assert!((l - oracle / 3.0).abs() < 1e-6);
        assert!(matches!(content_loss(&a.gather(&[0]), &b, &phi, 2, false), Err(TrainingError::Shape { .. })));
        let tiny = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(matches!(content_loss(&tiny, &tiny, &phi, 2, false), Err(TrainingError::TapShape { .. })));
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = small_phi();
        let a = random_tensor(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
        let t = random_target(&mut rng, 2, 4, 4);
        let zero = LossConfig { lambda: 0.0, ..Default::default() };
        let parts = total_loss(&a, &t, Some(&phi), &zero, true).unwrap();
        assert_eq!(parts.total.to_bits(), pixel_loss(&a, &t, zero.weighting).unwrap().0.to_bits());
        let parts = total_loss(&a, &t, Some(&phi), &LossConfig::default(), false).unwrap();
        assert!((parts.total - (parts.pixel + 0.02 * parts.content.unwrap())).abs() < 1e-7);
        assert!(parts.total >= 0.0 && parts.pixel >= 0.0 && parts.content.unwrap() >= 0.0);
        assert!(total_loss(&a, &t, None, &LossConfig::default(), false).is_err());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { content_layer: 4, ..Default::default() }.validate().is_err());
    }

    fn tiny_data(seed: u64, n_train: usize) -> (FlowData, FlowData) {
        let cfg = DatasetConfig { n_train, n_val: 8, n_test: 1, image_size: 48, ..Default::default() };
        let ds = generate_dataset(seed, &cfg).unwrap();
        (FlowData::from_samples(&ds.train), FlowData::from_samples(&ds.val))
    }

    fn tiny_model(m_max: f64) -> Im2FlowNet<f32> {
        Im2FlowNet::new(ModelConfig { input_size: 48, base_channels: 8, depth: 3, dilation_rates: vec![1, 2], seed: 1 }, m_max)
            .unwrap()
    }

    #[test]
    fn augmentation_flips_flow_and_crops_consistently() {
        let (train, _) = tiny_data(1, 8);
        let target = EncodedFlow::from_tensor(&train.targets, 0).unwrap();
        let aug = Augmentation { flip: true, offset: (4, 4), pad: 4 };
        let (img, flipped) = augment_pair(train.images.sample(0), &target, &aug);
        let a = decode_flow(&flipped);
        let b = flip_horizontal(&decode_flow(&target));
        for (x, y) in a.u().iter().zip(b.u()).chain(a.v().iter().zip(b.v())) {
            assert!((x - y).abs() < 1e-5);
        }
        // The image flips the same way.
        let w = 48;
        assert_eq!(img[5], train.images.sample(0)[w - 1 - 5]);
        // A shifted crop moves image and target by the same offset.
        let shift = Augmentation { flip: false, offset: (6, 3), pad: 4 };
        let (img2, t2) = augment_pair(train.images.sample(0), &target, &shift);
        let (x, y) = (10, 12);
        assert_eq!(img2[y * w + x], train.images.sample(0)[(y - 1) * w + x + 2]);
        assert_eq!(t2.f3()[y * w + x], target.f3()[(y - 1) * w + x + 2]);
        let cfg = TrainConfig::default();
        assert_eq!(Augmentation::draw(&cfg, 3, 7), Augmentation::draw(&cfg, 3, 7));
        assert_eq!(Augmentation::draw(&TrainConfig { hflip: false, crop_pad: 0, ..cfg }, 3, 7), Augmentation::NONE);
    }

    #[test]
    fn one_epoch_smoke_changes_every_parameter() {
        let (train, val) = tiny_data(2, 8);
        let mut model = tiny_model(2.0);
        let before = model.clone();
        let mut phi = SmallCnn::<f32>::new(SmallCnnConfig { seed: 2, ..Default::default() }).unwrap();
        phi.fit_input_stats(&train.targets);
        let phi_before = phi.clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let out = train_im2flow(&mut model, &train, &val, Some(&phi), &cfg, &LossConfig::default(), None, &mut |_| {}).unwrap();
        assert!(out.history.iter().all(|r| r.total_loss.is_finite()));
        assert_eq!(out.history.len(), 3);
        assert_eq!(phi, phi_before);
        // Compare against the state right after training, whichever epoch was best.
        let mut trained = tiny_model(2.0);
        let cfg1 = TrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let mut snapshot = Vec::new();
        train_im2flow(&mut trained, &train, &val, Some(&phi), &cfg1, &LossConfig::default(), None, &mut |_| {}).unwrap();
        trained.visit_state("", &mut |name, kind, _, v| {
            if kind == im2flow_nn::TensorKind::Param {
                snapshot.push((name.to_string(), v.to_vec()));
            }
        });
        let mut i = 0;
        before.visit_state("", &mut |name, kind, _, v| {
            if kind == im2flow_nn::TensorKind::Param {
                if out.best_epoch == 1 {
                    assert_ne!(snapshot[i].1, v, "{name} unchanged");
                }
                i += 1;
            }
        });
    }

    #[test]
    fn every_parameter_moves_after_one_step() {
        let (train, _) = tiny_data(2, 8);
        let mut model = tiny_model(2.0);
        let before = model.clone();
        let (pred, trace) = model.forward_train(&train.images).unwrap();
        let parts = total_loss(&pred, &train.targets, None, &LossConfig { lambda: 0.0, ..Default::default() }, true).unwrap();
        model.backward(&trace, parts.grad.as_ref().unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut model);
        let mut old = Vec::new();
        before.visit_state("", &mut |_, kind, _, v| {
            if kind == im2flow_nn::TensorKind::Param {
                old.push(v.to_vec());
            }
        });
        let mut i = 0;
        model.visit_state("", &mut |name, kind, _, v| {
            if kind == im2flow_nn::TensorKind::Param {
                assert_ne!(old[i], v, "{name} unchanged");
                i += 1;
            }
        });
    }

    #[test]
    fn overfits_a_small_set() {
        let (train, val) = tiny_data(3, 32);
        let m_max = crate::model::magnitude_quantile(&train.target_fields().unwrap(), 0.99, 1e-3);
        let mut model = tiny_model(m_max);
        let cfg = TrainConfig { epochs: 200, batch_size: 32, lr: 2e-3, hflip: false, crop_pad: 0, ..Default::default() };
        let loss = LossConfig { lambda: 0.0, ..Default::default() };
        let out = train_im2flow(&mut model, &train, &val, None, &cfg, &loss, None, &mut |_| {}).unwrap();
        let train_losses: Vec<f64> = out.history.iter().filter(|r| r.split == "train").map(|r| r.total_loss).collect();
        let first = train_losses[0];
        let best = train_losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best <= 0.5 * first, "loss {first} -> {best}");
    }

    #[test]
    fn flips_do_not_touch_the_epoch_zero_validation() {
        let (train, val) = tiny_data(4, 8);
        let run = |hflip: bool| {
            let mut model = tiny_model(2.0);
            let cfg = TrainConfig { epochs: 1, batch_size: 8, hflip, ..Default::default() };
            let loss = LossConfig { lambda: 0.0, ..Default::default() };
            train_im2flow(&mut model, &train, &val, None, &cfg, &loss, None, &mut |_| {}).unwrap().history
        };
        let (a, b) = (run(true), run(false));
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn training_is_deterministic_and_writes_artifacts() {
        let (train, val) = tiny_data(5, 8);
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<&Path>| {
            let mut model = tiny_model(2.0);
            let cfg = TrainConfig { epochs: 2, batch_size: 4, ..Default::default() };
            let loss = LossConfig { lambda: 0.0, ..Default::default() };
            (train_im2flow(&mut model, &train, &val, None, &cfg, &loss, out, &mut |_| {}).unwrap(), model)
        };
        let (a, ma) = run(Some(dir.path()));
        let (b, _) = run(None);
        assert_eq!(a.history, b.history);
        let lines = fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), a.history.len());
        let best = checkpoint::load_model(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best, ma);
    }

    #[test]
    fn content_network_beats_chance() {
        let cfg = DatasetConfig { n_train: 160, n_val: 40, n_test: 1, image_size: 48, ..Default::default() };
        let ds = generate_dataset(6, &cfg).unwrap();
        let (train, val) = (FlowData::from_samples(&ds.train), FlowData::from_samples(&ds.val));
        let tc = ClassifierTrainConfig { epochs: 6, ..Default::default() };
        let (phi, hist) = train_content_network(&train, Some(&val), SmallCnnConfig::default(), &tc).unwrap();
        assert!(hist.last().unwrap().val_accuracy.unwrap() > 1.0 / 8.0);
        let x = val.targets.gather(&[0, 1]);
        assert_eq!(phi.tap(&x, 2).unwrap().data(), phi.tap(&x, 2).unwrap().data());
        let single = FlowData { labels: vec![0; train.len()], ..train.clone() };
        assert!(train_content_network(&single, None, SmallCnnConfig::default(), &tc).is_err());
    }
}
