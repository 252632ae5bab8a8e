//! Small convolutional classifier: three `conv3x3 -> BN -> ReLU -> maxpool`
//! blocks, global average pooling and a linear head.
//!
//! The same network serves as the content-loss network (over encoded flow)
//! and as both recognition streams. Block outputs are exposed as taps.

use im2flow_nn::{
    global_avg_pool, global_avg_pool_backward, join, relu_backward, relu_inplace, softmax_cross_entropy,
    softmax_rows, Adam, AdamConfig, BatchNorm2d, BnCache, Conv2d, ConvGeom, Linear, MaxPool2, Module, PadMode,
    Param, Real, SeededInit, Tensor, TensorKind,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("need at least two classes in the training labels, found {0}")]
    SingleClass(usize),
    #[error("{inputs} inputs but {labels} labels")]
    CountMismatch { inputs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input has {actual} channels, network expects {expected}")]
    Channels { expected: usize, actual: usize },
    #[error("tap {0} does not exist (valid: 1..=3)")]
    BadTap(usize),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid classifier config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallCnnConfig {
    pub in_channels: usize,
    pub channels: [usize; 3],
    pub num_classes: usize,
    /// Periodic padding: with it the network is exactly invariant to cyclic
    /// shifts by multiples of 8 pixels.
    pub circular_padding: bool,
    pub seed: u64,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self { in_channels: 3, channels: [16, 32, 64], num_classes: 8, circular_padding: true, seed: 0 }
    }
}

impl SmallCnnConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.in_channels == 0 || self.channels.contains(&0) {
            return Err(ClassifierError::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ClassifierError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallCnn<T: Real = f32> {
    pub config: SmallCnnConfig,
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm2d<T>>,
    head: Linear<T>,
    input_mean: Vec<T>,
    input_std: Vec<T>,
}

struct BlockTrace<T: Real> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    relu_out: Tensor<T>,
    pool_idx: Vec<u32>,
}

/// Activations kept by a training forward pass.
pub struct CnnTrace<T: Real> {
    blocks: Vec<BlockTrace<T>>,
    last_shape: [usize; 4],
    pooled: Tensor<T>,
}

/// Activations kept by an inference-mode forward pass up to a tap.
pub struct TapTrace<T: Real> {
    blocks: Vec<BlockTrace<T>>,
    input_shape: [usize; 4],
}

impl<T: Real> SmallCnn<T> {
    pub fn new(config: SmallCnnConfig) -> Result<Self, ClassifierError> {
        config.validate()?;
        let mut init = SeededInit::new(config.seed);
        let pad = if config.circular_padding { PadMode::Circular } else { PadMode::Zero };
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = config.in_channels;
        for &c in &config.channels {
            convs.push(Conv2d::new(cin, c, ConvGeom::same(3, 1, pad), false, &mut init));
            bns.push(BatchNorm2d::new(c));
            cin = c;
        }
        let head = Linear::new(cin, config.num_classes, &mut init);
        let n = config.in_channels;
        Ok(Self { config, convs, bns, head, input_mean: vec![T::zero(); n], input_std: vec![T::one(); n] })
    }

    /// Same network in another scalar type.
    pub fn cast<U: Real>(&self) -> SmallCnn<U> {
        let mut out = SmallCnn::<U>::new(self.config.clone()).expect("validated config");
        im2flow_nn::copy_state(self, &mut out);
        out
    }

    /// Tap `j` shape for an `h x w` input: `[channels[j - 1], h / 2^j, w / 2^j]`.
    pub fn tap_shape(&self, j: usize, h: usize, w: usize) -> Result<[usize; 3], ClassifierError> {
        if !(1..=3).contains(&j) {
            return Err(ClassifierError::BadTap(j));
        }
        Ok([self.config.channels[j - 1], h >> j, w >> j])
    }

    pub fn input_stats(&self) -> (&[T], &[T]) {
        (&self.input_mean, &self.input_std)
    }

    /// Per-channel mean and standard deviation of the training inputs.
    pub fn fit_input_stats(&mut self, x: &Tensor<f32>) {
        let (m, s) = channel_stats(x);
        self.input_mean = m.iter().map(|v| T::lit(*v)).collect();
        self.input_std = s.iter().map(|v| T::lit(*v)).collect();
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ClassifierError> {
        if x.c() != self.config.in_channels {
            return Err(ClassifierError::Channels { expected: self.config.in_channels, actual: x.c() });
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        for b in 0..x.n() {
            for c in 0..x.c() {
                let (m, s) = (self.input_mean[c], self.input_std[c]);
                out.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        out
    }

    fn block_eval(&self, i: usize, x: Tensor<T>, keep: bool, traces: &mut Vec<BlockTrace<T>>) -> Tensor<T> {
        let mut y = self.bns[i].forward_eval(&self.convs[i].forward(&x));
        relu_inplace(&mut y);
        let (p, idx) = MaxPool2::forward(&y);
        if keep {
            traces.push(BlockTrace { input: x, bn: None, relu_out: y, pool_idx: idx });
        }
        p
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, ClassifierError> {
        self.check_input(x)?;
        let mut h = self.normalize(x);
        let mut none = Vec::new();
        for i in 0..self.convs.len() {
            h = self.block_eval(i, h, false, &mut none);
        }
        Ok(self.head.forward(&global_avg_pool(&h)))
    }

    /// Inference-mode output of block `j` (1-based).
    pub fn tap(&self, x: &Tensor<T>, j: usize) -> Result<Tensor<T>, ClassifierError> {
        Ok(self.tap_traced(x, j, false)?.0)
    }

    /// Like [`tap`](Self::tap) but keeps what [`tap_backward`](Self::tap_backward) needs.
    pub fn tap_with_trace(&self, x: &Tensor<T>, j: usize) -> Result<(Tensor<T>, TapTrace<T>), ClassifierError> {
        self.tap_traced(x, j, true)
    }

    fn tap_traced(&self, x: &Tensor<T>, j: usize, keep: bool) -> Result<(Tensor<T>, TapTrace<T>), ClassifierError> {
        self.check_input(x)?;
        if !(1..=self.convs.len()).contains(&j) {
            return Err(ClassifierError::BadTap(j));
        }
        let mut traces = Vec::new();
        let mut h = self.normalize(x);
        for i in 0..j {
            h = self.block_eval(i, h, keep, &mut traces);
        }
        Ok((h, TapTrace { blocks: traces, input_shape: x.shape() }))
    }

    /// Gradient of a function of the tap with respect to the raw input.
    /// Parameters are not touched.
    pub fn tap_backward(&self, trace: &TapTrace<T>, g_tap: &Tensor<T>) -> Tensor<T> {
        let mut g = g_tap.clone();
        for (i, bt) in trace.blocks.iter().enumerate().rev() {
            let mut gr = MaxPool2::backward(bt.relu_out.shape(), &bt.pool_idx, &g);
            relu_backward(&bt.relu_out, &mut gr);
            let gc = self.bns[i].backward_eval(&gr);
            g = self.convs[i].input_grad(bt.input.shape(), &gc);
        }
        assert_eq!(g.shape(), trace.input_shape);
        for b in 0..g.n() {
            for c in 0..g.c() {
                let s = self.input_std[c];
                g.plane_mut(b, c).iter_mut().for_each(|v| *v /= s);
            }
        }
        g
    }

    /// Training-mode forward (batch statistics, running estimates updated).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, CnnTrace<T>), ClassifierError> {
        self.check_input(x)?;
        let mut h = self.normalize(x);
        let mut blocks = Vec::new();
        for i in 0..self.convs.len() {
            let z = self.convs[i].forward(&h);
            let (mut y, cache) = self.bns[i].forward_train(&z);
            relu_inplace(&mut y);
            let (p, idx) = MaxPool2::forward(&y);
            blocks.push(BlockTrace { input: h, bn: Some(cache), relu_out: y, pool_idx: idx });
            h = p;
        }
        let pooled = global_avg_pool(&h);
        let logits = self.head.forward(&pooled);
        Ok((logits, CnnTrace { blocks, last_shape: h.shape(), pooled }))
    }

    /// Accumulates parameter gradients from the logits gradient.
    pub fn backward_train(&mut self, trace: &CnnTrace<T>, g_logits: &Tensor<T>) {
        let gp = self.head.backward(&trace.pooled, g_logits, true);
        let mut g = global_avg_pool_backward(trace.last_shape, &gp);
        for (i, bt) in trace.blocks.iter().enumerate().rev() {
            let mut gr = MaxPool2::backward(bt.relu_out.shape(), &bt.pool_idx, &g);
            relu_backward(&bt.relu_out, &mut gr);
            let gc = self.bns[i].backward_train(bt.bn.as_ref().expect("training trace"), &gr, true);
            let need_input = i > 0;
            if let Some(gx) = self.convs[i].backward(&bt.input, &gc, true, need_input) {
                g = gx;
            }
        }
    }
}

impl SmallCnn<f32> {
    /// Softmax probabilities in inference mode, evaluated in batches.
    pub fn predict_proba(&self, x: &Tensor<f32>, batch: usize) -> Result<Vec<Vec<f64>>, ClassifierError> {
        let mut out = Vec::with_capacity(x.n());
        let idx: Vec<usize> = (0..x.n()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let logits = self.logits(&x.gather(chunk))?;
            out.extend(softmax_rows(&logits.cast::<f64>()));
        }
        Ok(out)
    }
}

impl<T: Real> Module<T> for SmallCnn<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (c, b) in self.convs.iter_mut().zip(&mut self.bns) {
            c.visit_params(f);
            b.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            c.visit_state(&join(prefix, &format!("block{}.conv", i + 1)), f);
            b.visit_state(&join(prefix, &format!("block{}.bn", i + 1)), f);
        }
        self.head.visit_state(&join(prefix, "head"), f);
        let n = [self.input_mean.len()];
        f(&join(prefix, "input_mean"), TensorKind::Buffer, &n, &self.input_mean);
        f(&join(prefix, "input_std"), TensorKind::Buffer, &n, &self.input_std);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T])) {
        for (i, (c, b)) in self.convs.iter_mut().zip(&mut self.bns).enumerate() {
            c.visit_state_mut(&join(prefix, &format!("block{}.conv", i + 1)), f);
            b.visit_state_mut(&join(prefix, &format!("block{}.bn", i + 1)), f);
        }
        self.head.visit_state_mut(&join(prefix, "head"), f);
        let n = [self.input_mean.len()];
        f(&join(prefix, "input_mean"), TensorKind::Buffer, &n, &mut self.input_mean);
        f(&join(prefix, "input_std"), TensorKind::Buffer, &n, &mut self.input_std);
    }
}

/// Per-channel mean and population standard deviation (floored at 1e-6).
pub fn channel_stats(x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.n(), x.c());
    let count = (n * x.plane_len()) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).map(|b| x.plane(b, ch).iter().map(|v| *v as f64).sum::<f64>()).sum();
        let m = s / count;
        let sq: f64 = (0..n).map(|b| x.plane(b, ch).iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>()).sum();
        mean[ch] = m;
        std[ch] = (sq / count).sqrt().max(1e-6);
    }
    (mean, std)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = probs.iter().zip(labels).filter(|(p, y)| argmax(p) == **y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

/// Trains with Adam on softmax cross-entropy. Input statistics are fitted on
/// `x` first. Returns one record per epoch.
pub fn train_classifier(
    net: &mut SmallCnn<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
    val: Option<(&Tensor<f32>, &[usize])>,
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<ClassifierEpoch>, ClassifierError> {
    if x.n() != labels.len() {
        return Err(ClassifierError::CountMismatch { inputs: x.n(), labels: labels.len() });
    }
    if let Some((vx, vy)) = val {
        if vx.n() != vy.len() {
            return Err(ClassifierError::CountMismatch { inputs: vx.n(), labels: vy.len() });
        }
    }
    let k = net.config.num_classes;
    if let Some(&bad) = labels.iter().find(|l| **l >= k) {
        return Err(ClassifierError::LabelOutOfRange { label: bad, classes: k });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ClassifierError::SingleClass(distinct.len()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ClassifierError::Config("epochs and batch_size must be positive".into()));
    }
    net.fit_input_stats(x);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..x.n()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.gather(chunk);
            let yb: Vec<usize> = chunk.iter().map(|i| labels[*i]).collect();
            let (logits, trace) = net.forward_train(&xb)?;
            let (loss, g) = softmax_cross_entropy(&logits, &yb);
            if !loss.is_finite() {
                return Err(ClassifierError::NonFinite { epoch });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            for (p, y) in softmax_rows(&logits.cast::<f64>()).iter().zip(&yb) {
                hits += usize::from(argmax(p) == *y);
            }
            net.zero_grad();
            net.backward_train(&trace, &g);
            opt.step(net);
        }
        let val_accuracy = match val {
            Some((vx, vy)) => Some(accuracy(&net.predict_proba(vx, 64)?, vy)),
            None => None,
        };
        history.push(ClassifierEpoch {
            epoch,
            train_loss: loss_sum / x.n() as f64,
            train_accuracy: hits as f64 / x.n() as f64,
            val_accuracy,
        });
    }
    Ok(history)
}
