//! Two-stream static-image action recognition.
//!
//! The appearance stream classifies frames; the motion stream classifies
//! encoded flow, either hallucinated by a frozen flow network or taken from
//! the ground truth. Softmax scores are fused by a weighted sum whose weight is
//! chosen on validation data. Also here: the nearest-neighbor flow transfer
//! baseline and motion-potential ranking.

use im2flow_nn::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{argmax, train_classifier, ClassifierEpoch, ClassifierError, ClassifierTrainConfig, SmallCnn, SmallCnnConfig};
use crate::model::{Im2FlowNet, ModelError};
use crate::synth::ActionClass;
use crate::training::predict;
use crate::{motion_potential, EncodedFlow, FlowError, Mask};

#[derive(Debug, Error)]
pub enum RecognitionError {
    #[error("{inputs} inputs but {labels} labels")]
    CountMismatch { inputs: usize, labels: usize },
    #[error("score vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("fusion weight must lie in [0, 1], got {0}")]
    BadWeight(f64),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("feature length {query} does not match the pool ({pool})")]
    FeatureDim { pool: usize, query: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamKind {
    Appearance,
    /// Flow hallucinated by a frozen flow network.
    Motion,
    /// Ground-truth flow; the upper bound for the motion stream.
    MotionGroundTruth,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Appearance => "appearance",
            StreamKind::Motion => "motion",
            StreamKind::MotionGroundTruth => "motion-gt",
        }
    }
}

pub struct StreamClassifier {
    pub kind: StreamKind,
    pub net: SmallCnn<f32>,
    pub history: Vec<ClassifierEpoch>,
}

impl StreamClassifier {
    pub fn val_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|h| h.val_accuracy)
    }

    pub fn predict_proba(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>, RecognitionError> {
        Ok(self.net.predict_proba(x, 64)?)
    }
}

/// Trains one stream. `x` holds frames for the appearance stream and encoded
/// flow maps for the motion streams.
pub fn train_stream(
    kind: StreamKind,
    x: &Tensor<f32>,
    labels: &[usize],
    val: Option<(&Tensor<f32>, &[usize])>,
    net_cfg: SmallCnnConfig,
    train_cfg: &ClassifierTrainConfig,
) -> Result<StreamClassifier, RecognitionError> {
    if x.n() != labels.len() {
        return Err(RecognitionError::CountMismatch { inputs: x.n(), labels: labels.len() });
    }
    let mut net = SmallCnn::new(net_cfg)?;
    let history = train_classifier(&mut net, x, labels, val, train_cfg)?;
    Ok(StreamClassifier { kind, net, history })
}

/// Encoded flow maps predicted by a frozen flow network.
pub fn hallucinate(model: &Im2FlowNet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>, RecognitionError> {
    Ok(predict(model, images, 64)?)
}

/// `w * p_app + (1 - w) * p_mot`.
pub fn fuse(p_app: &[f64], p_mot: &[f64], w: f64) -> Result<Vec<f64>, RecognitionError> {
    if p_app.len() != p_mot.len() {
        return Err(RecognitionError::LengthMismatch(p_app.len(), p_mot.len()));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(RecognitionError::BadWeight(w));
    }
    Ok(p_app.iter().zip(p_mot).map(|(a, m)| w * a + (1.0 - w) * m).collect())
}

pub fn fuse_all(p_app: &[Vec<f64>], p_mot: &[Vec<f64>], w: f64) -> Result<Vec<Vec<f64>>, RecognitionError> {
    if p_app.len() != p_mot.len() {
        return Err(RecognitionError::CountMismatch { inputs: p_app.len(), labels: p_mot.len() });
    }
    p_app.iter().zip(p_mot).map(|(a, m)| fuse(a, m, w)).collect()
}

pub fn predictions(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub const FUSION_GRID_STEPS: usize = 20;

/// Grid search over `w = k / 20`; the first (smallest) best weight wins.
/// Returns the weight and its validation accuracy.
pub fn select_fusion_weight(
    p_app: &[Vec<f64>],
    p_mot: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, f64), RecognitionError> {
    if labels.is_empty() {
        return Err(RecognitionError::Empty("validation set"));
    }
    if p_app.len() != labels.len() || p_mot.len() != labels.len() {
        return Err(RecognitionError::CountMismatch { inputs: p_app.len().min(p_mot.len()), labels: labels.len() });
    }
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 0..=FUSION_GRID_STEPS {
        let w = k as f64 / FUSION_GRID_STEPS as f64;
        let acc = accuracy_of(&predictions(&fuse_all(p_app, p_mot, w)?), labels);
        if acc > best.1 {
            best = (w, acc);
        }
    }
    Ok(best)
}

/// `k x k` counts, rows = true class, columns = predicted class.
pub fn confusion_matrix(pred: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (p, y) in pred.iter().zip(labels) {
        m[*y][*p] += 1;
    }
    m
}

/// Within-pair accuracy for each ambiguous pair: over samples of the pair,
/// the fraction whose probability is higher for the true class than for its
/// partner (ties go to the lower label).
pub fn pair_accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Vec<Option<f64>> {
    let pairs = ActionClass::ALL.len() / 2;
    let mut hits = vec![0usize; pairs];
    let mut counts = vec![0usize; pairs];
    for (p, &y) in probs.iter().zip(labels) {
        let Some(class) = ActionClass::from_label(y) else { continue };
        let other = class.partner().label();
        let (lo, hi) = (y.min(other), y.max(other));
        let choice = if p[hi] > p[lo] { hi } else { lo };
        let pi = class.pair_index();
        counts[pi] += 1;
        hits[pi] += usize::from(choice == y);
    }
    hits.iter().zip(&counts).map(|(h, c)| (*c > 0).then(|| *h as f64 / *c as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub name: String,
    pub accuracy: f64,
    pub pair_accuracy: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn stream_report(name: &str, probs: &[Vec<f64>], labels: &[usize], k: usize) -> StreamReport {
    let pred = predictions(probs);
    StreamReport {
        name: name.to_string(),
        accuracy: accuracy_of(&pred, labels),
        pair_accuracy: pair_accuracy(probs, labels),
        confusion: confusion_matrix(&pred, labels, k),
    }
}

/// Flattened bottleneck activations, one row per image.
pub fn bottleneck_features(model: &Im2FlowNet<f32>, images: &Tensor<f32>) -> Result<Vec<Vec<f32>>, RecognitionError> {
    let mut out = Vec::with_capacity(images.n());
    let idx: Vec<usize> = (0..images.n()).collect();
    for chunk in idx.chunks(64) {
        let f = model.bottleneck_features(&images.gather(chunk))?;
        out.extend((0..chunk.len()).map(|i| f.sample(i).to_vec()));
    }
    Ok(out)
}

/// Index of the L2-nearest pool entry; ties go to the lowest index.
pub fn nearest(pool: &[Vec<f32>], query: &[f32]) -> Result<usize, RecognitionError> {
    if pool.is_empty() {
        return Err(RecognitionError::Empty("retrieval pool"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, f) in pool.iter().enumerate() {
        if f.len() != query.len() {
            return Err(RecognitionError::FeatureDim { pool: f.len(), query: query.len() });
        }
        let d: f64 = f.iter().zip(query).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// For each query, the pool index whose ground-truth flow it adopts.
pub fn nn_baseline(pool: &[Vec<f32>], queries: &[Vec<f32>]) -> Result<Vec<usize>, RecognitionError> {
    queries.iter().map(|q| nearest(pool, q)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub index: usize,
    pub score: f64,
}

/// Descending order of `scores`; equal scores keep input order.
pub fn rank_scores(scores: &[f64]) -> Vec<RankEntry> {
    let mut entries: Vec<RankEntry> = scores.iter().enumerate().map(|(index, &score)| RankEntry { index, score }).collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    entries
}

/// Motion potential of the predicted flow of every image. Images without a
/// foreground mask are scored over the whole frame.
pub fn motion_potential_scores(
    model: &Im2FlowNet<f32>,
    images: &Tensor<f32>,
    masks: &[Option<Mask>],
) -> Result<Vec<f64>, RecognitionError> {
    if masks.len() != images.n() {
        return Err(RecognitionError::CountMismatch { inputs: images.n(), labels: masks.len() });
    }
    let pred = hallucinate(model, images)?;
    let (w, h) = (images.w(), images.h());
    (0..images.n())
        .map(|i| {
            let enc = EncodedFlow::from_tensor(&pred, i)?;
            let full;
            let mask = match &masks[i] {
                Some(m) => m,
                None => {
                    full = Mask::full(w, h);
                    &full
                }
            };
            Ok(motion_potential(&enc, mask)?)
        })
        .collect()
}

pub fn rank_by_motion_potential(
    model: &Im2FlowNet<f32>,
    images: &Tensor<f32>,
    masks: &[Option<Mask>],
) -> Result<Vec<RankEntry>, RecognitionError> {
    Ok(rank_scores(&motion_potential_scores(model, images, masks)?))
}
