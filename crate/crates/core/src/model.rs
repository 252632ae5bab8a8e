//! Encoder-decoder flow network.
//!
//! Stem `conv3x3-BN-ReLU`, `depth` stride-2 down blocks (channels doubling,
//! capped at `8 * base`), a bottleneck of dilated `conv3x3-BN-ReLU` layers,
//! `depth` up blocks (2x transposed conv, concatenate the matching encoder
//! activation, `conv3x3-BN-ReLU`) and a `1x1` head. Direction channels use
//! `tanh`; the magnitude channel is `m_max * sigmoid`.

use im2flow_nn::{
    concat_channels, join, relu_backward, relu_inplace, split_channels, BatchNorm2d, BnCache, Conv2d, ConvGeom,
    ConvTranspose2x2, Module, PadMode, Param, Real, SeededInit, Tensor, TensorKind,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("input must be [n, 3, {expected}, {expected}], got {actual:?}")]
    InputShape { expected: usize, actual: [usize; 4] },
    #[error("m_max must be positive and finite, got {0}")]
    BadNormalizer(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dilation_rates: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_size: 64, base_channels: 16, depth: 4, dilation_rates: vec![1, 2, 4], seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |field, message: &str| Err(ModelError::Config { field, message: message.to_string() });
        if self.depth < 2 {
            return err("depth", "must be at least 2");
        }
        if self.depth > 8 {
            return err("depth", "must be at most 8");
        }
        if self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return err("input_size", &format!("must be a positive multiple of 2^depth = {}", 1 << self.depth));
        }
        if self.base_channels == 0 {
            return err("base_channels", "must be positive");
        }
        if self.dilation_rates.is_empty() {
            return err("dilation_rates", "must not be empty");
        }
        if self.dilation_rates.contains(&0) {
            return err("dilation_rates", "rates must be positive");
        }
        Ok(())
    }

    /// Channels at encoder stage `i` (0 = stem).
    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(8 * self.base_channels)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Receptive field (pixels) of one bottleneck output unit.
    pub fn bottleneck_receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (3, 1);
        for _ in 0..self.depth {
            rf += 2 * jump;
            jump *= 2;
        }
        for r in &self.dilation_rates {
            rf += 2 * r * jump;
        }
        rf
    }
}

/// `conv3x3 (no bias) -> BN -> ReLU`.
#[derive(Clone, Debug, PartialEq)]
struct Cbr<T: Real> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

struct CbrTrace<T: Real> {
    input: Tensor<T>,
    bn: BnCache<T>,
    out: Tensor<T>,
}

impl<T: Real> Cbr<T> {
    fn new(cin: usize, cout: usize, geom: ConvGeom, init: &mut SeededInit) -> Self {
        Self { conv: Conv2d::new(cin, cout, geom, false, init), bn: BatchNorm2d::new(cout) }
    }

    fn eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.bn.forward_eval(&self.conv.forward(x));
        relu_inplace(&mut y);
        y
    }

    fn train(&mut self, x: Tensor<T>) -> (Tensor<T>, CbrTrace<T>) {
        let (mut y, cache) = self.bn.forward_train(&self.conv.forward(&x));
        relu_inplace(&mut y);
        (y.clone(), CbrTrace { input: x, bn: cache, out: y })
    }

    fn backward(&mut self, t: &CbrTrace<T>, g: &Tensor<T>, need_input: bool) -> Option<Tensor<T>> {
        let mut g = g.clone();
        relu_backward(&t.out, &mut g);
        let gz = self.bn.backward_train(&t.bn, &g, true);
        self.conv.backward(&t.input, &gz, true, need_input)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        self.conv.visit_state(&join(prefix, "conv"), f);
        self.bn.visit_state(&join(prefix, "bn"), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T])) {
        self.conv.visit_state_mut(&join(prefix, "conv"), f);
        self.bn.visit_state_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock<T: Real> {
    up: ConvTranspose2x2<T>,
    fuse: Cbr<T>,
}

/// The flow network with its input statistics and magnitude normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Im2FlowNet<T: Real = f32> {
    pub config: ModelConfig,
    m_max: f64,
    input_mean: Vec<T>,
    input_std: Vec<T>,
    stem: Cbr<T>,
    downs: Vec<Cbr<T>>,
    bottleneck: Vec<Cbr<T>>,
    /// Ordered from the deepest stage to the shallowest.
    ups: Vec<UpBlock<T>>,
    head: Conv2d<T>,
}

/// Activations kept by [`Im2FlowNet::forward_train`].
pub struct Im2FlowTrace<T: Real> {
    stem: CbrTrace<T>,
    downs: Vec<CbrTrace<T>>,
    bottleneck: Vec<CbrTrace<T>>,
    ups: Vec<(Tensor<T>, CbrTrace<T>)>,
    head_input: Tensor<T>,
    output: Tensor<T>,
}

/// Inference-time probes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Encoder stages (0 = stem) whose skip activations are replaced by zeros.
    pub zeroed_skips: Vec<usize>,
}

impl<T: Real> Im2FlowNet<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig, m_max: f64) -> Result<Self, ModelError> {
        config.validate()?;
        if !(m_max > 0.0 && m_max.is_finite()) {
            return Err(ModelError::BadNormalizer(m_max));
        }
        let mut init = SeededInit::new(config.seed);
        let pad = PadMode::Zero;
        let c = |i| config.stage_channels(i);
        let stem = Cbr::new(3, c(0), ConvGeom::same(3, 1, pad), &mut init);
        let downs = (1..=config.depth).map(|i| Cbr::new(c(i - 1), c(i), ConvGeom::strided(3, 2, pad), &mut init)).collect();
        let cd = c(config.depth);
        let bottleneck =
            config.dilation_rates.iter().map(|r| Cbr::new(cd, cd, ConvGeom::same(3, *r, pad), &mut init)).collect();
        let ups = (1..=config.depth)
            .rev()
            .map(|i| UpBlock {
                up: ConvTranspose2x2::new(c(i), c(i - 1), &mut init),
                fuse: Cbr::new(2 * c(i - 1), c(i - 1), ConvGeom::same(3, 1, pad), &mut init),
            })
            .collect();
        let head = Conv2d::new(c(0), 3, ConvGeom::same(1, 1, pad), true, &mut init);
        Ok(Self { config, m_max, input_mean: vec![T::zero(); 3], input_std: vec![T::one(); 3], stem, downs, bottleneck, ups, head })
    }

    pub fn m_max(&self) -> f64 {
        self.m_max
    }

    pub fn set_m_max(&mut self, m_max: f64) -> Result<(), ModelError> {
        if !(m_max > 0.0 && m_max.is_finite()) {
            return Err(ModelError::BadNormalizer(m_max));
        }
        self.m_max = m_max;
        Ok(())
    }

    pub fn input_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (self.input_mean.iter().map(|v| v.as_f64()).collect(), self.input_std.iter().map(|v| v.as_f64()).collect())
    }

    pub fn set_input_stats(&mut self, mean: &[f64], std: &[f64]) {
        assert_eq!(mean.len(), 3);
        assert_eq!(std.len(), 3);
        assert!(std.iter().all(|s| *s > 0.0), "std must be positive");
        self.input_mean = mean.iter().map(|v| T::lit(*v)).collect();
        self.input_std = std.iter().map(|v| T::lit(*v)).collect();
    }

    /// Sets the magnitude head bias so an all-zero feature map predicts
    /// `magnitude` (clamped into the open activation range).
    pub fn init_magnitude_bias(&mut self, magnitude: f64) {
        let a = (magnitude / self.m_max).clamp(1e-4, 1.0 - 1e-4);
        let bias = self.head.bias.as_mut().expect("head has a bias");
        bias.value[2] = T::lit((a / (1.0 - a)).ln());
    }

    pub fn cast<U: Real>(&self) -> Im2FlowNet<U> {
        let mut out = Im2FlowNet::<U>::new(self.config.clone(), self.m_max).expect("validated");
        im2flow_nn::copy_state(self, &mut out);
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let s = self.config.input_size;
        if x.c() != 3 || x.h() != s || x.w() != s || x.n() == 0 {
            return Err(ModelError::InputShape { expected: s, actual: x.shape() });
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        for b in 0..x.n() {
            for c in 0..3 {
                let (m, s) = (self.input_mean[c], self.input_std[c]);
                out.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        out
    }

    fn activate(&self, mut z: Tensor<T>) -> Tensor<T> {
        let m = T::lit(self.m_max);
        for b in 0..z.n() {
            for c in 0..2 {
                z.plane_mut(b, c).iter_mut().for_each(|v| *v = v.tanh());
            }
            z.plane_mut(b, 2).iter_mut().for_each(|v| *v = m / (T::one() + (-*v).exp()));
        }
        z
    }

    fn encode_eval(&self, x: &Tensor<T>) -> (Vec<Tensor<T>>, Tensor<T>) {
        let mut skips = vec![self.stem.eval(&self.normalize(x))];
        for d in &self.downs {
            let next = d.eval(skips.last().expect("stem"));
            skips.push(next);
        }
        let mut h = skips.pop().expect("deepest stage");
        for b in &self.bottleneck {
            h = b.eval(&h);
        }
        (skips, h)
    }

    /// Inference-mode forward pass: `[n, 3, s, s]` images in `[0, 1]` to
    /// `[n, 3, s, s]` encoded flow.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.forward_with(x, &ForwardOptions::default())
    }

    pub fn forward_with(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let (skips, mut h) = self.encode_eval(x);
        for (k, u) in self.ups.iter().enumerate() {
            let stage = self.config.depth - 1 - k;
            let up = u.up.forward(&h);
            let skip = if opts.zeroed_skips.contains(&stage) { Tensor::zeros(skips[stage].shape()) } else { skips[stage].clone() };
            h = u.fuse.eval(&concat_channels(&up, &skip));
        }
        Ok(self.activate(self.head.forward(&h)))
    }

    /// Flattened bottleneck activations, one row per image.
    pub fn bottleneck_features(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let h = self.encode_eval(x).1;
        let n = h.n();
        let len = h.sample_len();
        Ok(Tensor::from_vec([n, len, 1, 1], h.into_data()))
    }

    /// Training-mode forward (batch statistics; running estimates updated).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Im2FlowTrace<T>), ModelError> {
        self.check_input(x)?;
        let (mut h, stem) = self.stem.train(self.normalize(x));
        let mut downs = Vec::with_capacity(self.downs.len());
        for d in &mut self.downs {
            let (y, t) = d.train(h);
            downs.push(t);
            h = y;
        }
        let mut bottleneck = Vec::with_capacity(self.bottleneck.len());
        for b in &mut self.bottleneck {
            let (y, t) = b.train(h);
            bottleneck.push(t);
            h = y;
        }
        let mut ups = Vec::with_capacity(self.ups.len());
        let depth = self.config.depth;
        for (k, u) in self.ups.iter_mut().enumerate() {
            let stage = depth - 1 - k;
            let skip = if stage == 0 { &stem.out } else { &downs[stage - 1].out };
            let cat = concat_channels(&u.up.forward(&h), skip);
            let (y, t) = u.fuse.train(cat);
            ups.push((h, t));
            h = y;
        }
        let output = self.activate(self.head.forward(&h));
        Ok((output.clone(), Im2FlowTrace { stem, downs, bottleneck, ups, head_input: h, output }))
    }

    /// Accumulates parameter gradients given the gradient of the loss with
    /// respect to the activated output.
    pub fn backward(&mut self, trace: &Im2FlowTrace<T>, g_out: &Tensor<T>) {
        assert_eq!(g_out.shape(), trace.output.shape(), "output gradient shape");
        let m = T::lit(self.m_max);
        let mut gz = g_out.clone();
        for b in 0..gz.n() {
            for c in 0..2 {
                let y = trace.output.plane(b, c).to_vec();
                gz.plane_mut(b, c).iter_mut().zip(y).for_each(|(g, y)| *g *= T::one() - y * y);
            }
            let y = trace.output.plane(b, 2).to_vec();
            gz.plane_mut(b, 2).iter_mut().zip(y).for_each(|(g, y)| {
                let s = y / m;
                *g *= m * s * (T::one() - s);
            });
        }
        let mut g = self.head.backward(&trace.head_input, &gz, true, true).expect("input grad");
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        for k in (0..self.ups.len()).rev() {
            let u = &mut self.ups[k];
            let stage = depth - 1 - k;
            let (up_input, fuse_trace) = &trace.ups[k];
            let gcat = u.fuse.backward(fuse_trace, &g, true).expect("input grad");
            let (gup, gskip) = split_channels(&gcat, u.up.cout);
            skip_grads[stage] = Some(gskip);
            g = u.up.backward(up_input, &gup, true, true).expect("input grad");
        }
        for (b, t) in self.bottleneck.iter_mut().zip(&trace.bottleneck).rev() {
            g = b.backward(t, &g, true).expect("input grad");
        }
        for i in (0..depth).rev() {
            g = self.downs[i].backward(&trace.downs[i], &g, true).expect("input grad");
            if let Some(s) = skip_grads[i].take() {
                g.add_assign(&s);
            }
        }
        self.stem.backward(&trace.stem, &g, false);
    }
}

impl<T: Real> Module<T> for Im2FlowNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params(f);
        for d in &mut self.downs {
            d.visit_params(f);
        }
        for b in &mut self.bottleneck {
            b.visit_params(f);
        }
        for u in &mut self.ups {
            u.up.visit_params(f);
            u.fuse.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        self.stem.visit_state(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit_state(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            b.visit_state(&join(prefix, &format!("bottleneck{}", i + 1)), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.up.visit_state(&join(prefix, &format!("up{}.upsample", i + 1)), f);
            u.fuse.visit_state(&join(prefix, &format!("up{}.fuse", i + 1)), f);
        }
        self.head.visit_state(&join(prefix, "head"), f);
        f(&join(prefix, "input_mean"), TensorKind::Buffer, &[3], &self.input_mean);
        f(&join(prefix, "input_std"), TensorKind::Buffer, &[3], &self.input_std);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T])) {
        self.stem.visit_state_mut(&join(prefix, "stem"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_state_mut(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            b.visit_state_mut(&join(prefix, &format!("bottleneck{}", i + 1)), f);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.up.visit_state_mut(&join(prefix, &format!("up{}.upsample", i + 1)), f);
            u.fuse.visit_state_mut(&join(prefix, &format!("up{}.fuse", i + 1)), f);
        }
        self.head.visit_state_mut(&join(prefix, "head"), f);
        f(&join(prefix, "input_mean"), TensorKind::Buffer, &[3], &mut self.input_mean);
        f(&join(prefix, "input_std"), TensorKind::Buffer, &[3], &mut self.input_std);
    }
}

/// The `q`-quantile (linear interpolation) of the magnitudes of moving pixels
/// (`M > eps`) over a set of flow fields, used as `m_max`. Falls back to 1.0
/// when nothing moves.
pub fn magnitude_quantile<'a>(fields: impl IntoIterator<Item = &'a crate::FlowField>, q: f64, eps: f32) -> f64 {
    let mut mags: Vec<f32> = fields.into_iter().flat_map(|f| f.magnitudes()).filter(|m| *m > eps).collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (mags.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    mags[lo] as f64 * (1.0 - frac) + mags[hi] as f64 * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(seed: u64, n: usize, s: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    /// Layer-by-layer parameter count written out from the architecture
    /// description, independent of the module visitor.
    fn hand_count(base: usize, depth: usize, rates: usize) -> usize {
        let c = |i: usize| (base << i).min(8 * base);
        let cbr = |cin: usize, cout: usize| cin * cout * 9 + 2 * cout;
        let mut n = cbr(3, c(0));
        for i in 1..=depth {
            n += cbr(c(i - 1), c(i));
        }
        n += rates * cbr(c(depth), c(depth));
        for i in (1..=depth).rev() {
            n += c(i) * c(i - 1) * 4 + c(i - 1);
            n += cbr(2 * c(i - 1), c(i - 1));
        }
        n + c(0) * 3 + 3
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        for (base, depth) in [(16, 4), (32, 4), (8, 3)] {
            let cfg = ModelConfig { base_channels: base, depth, ..Default::default() };
            let net = Im2FlowNet::<f32>::new(cfg, 4.0).unwrap();
            assert_eq!(net.param_count(), hand_count(base, depth, 3), "base {base} depth {depth}");
        }
        // Hand arithmetic for the default config.
        assert_eq!(hand_count(16, 4, 3), 1_189_523);
    }

    #[test]
    fn config_validation_names_the_field() {
        let bad = ModelConfig { input_size: 60, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config { field: "input_size", .. })));
        let bad = ModelConfig { depth: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config { field: "depth", .. })));
        let bad = ModelConfig { dilation_rates: vec![], ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Config { field: "dilation_rates", .. })));
        assert!(matches!(Im2FlowNet::<f32>::new(ModelConfig::default(), 0.0), Err(ModelError::BadNormalizer(_))));
    }

    #[test]
    fn bottleneck_geometry() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.bottleneck_size(), 4);
        assert!(cfg.bottleneck_receptive_field() > cfg.input_size / 2);
        let net = Im2FlowNet::<f32>::new(cfg.clone(), 3.0).unwrap();
        let f = net.bottleneck_features(&random_images(1, 2, 64)).unwrap();
        assert_eq!(f.shape(), [2, cfg.stage_channels(4) * 16, 1, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Im2FlowNet::<f32>::new(ModelConfig::default(), 3.0).unwrap();
        let b = Im2FlowNet::<f32>::new(ModelConfig::default(), 3.0).unwrap();
        assert_eq!(a, b);
        let c = Im2FlowNet::<f32>::new(ModelConfig { seed: 1, ..Default::default() }, 3.0).unwrap();
        assert_ne!(a, c);
        let mut finite = true;
        a.visit_state("", &mut |_, _, _, v| finite &= v.iter().all(|x| x.is_finite()));
        assert!(finite);
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let net = Im2FlowNet::<f32>::new(ModelConfig::default(), 3.0).unwrap();
        let x = random_images(2, 2, 64);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 64, 64]);
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().chain(y.plane(b, 1)).all(|v| v.abs() < 1.0));
            assert!(y.plane(b, 2).iter().all(|v| (0.0..=3.0).contains(v)));
        }
        assert_eq!(y, net.forward(&x).unwrap());
        assert!(matches!(net.forward(&random_images(2, 1, 32)), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn zeroing_any_skip_changes_the_output() {
        let net = Im2FlowNet::<f32>::new(ModelConfig::default(), 3.0).unwrap();
        let x = random_images(3, 1, 64);
        let y = net.forward(&x).unwrap();
        for stage in 0..4 {
            let z = net.forward_with(&x, &ForwardOptions { zeroed_skips: vec![stage] }).unwrap();
            assert!(y.max_abs_diff(&z) > 0.0, "skip {stage}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = ModelConfig { input_size: 8, base_channels: 2, depth: 2, dilation_rates: vec![1, 2], seed: 5 };
        let mut net = Im2FlowNet::<f64>::new(cfg, 2.0).unwrap();
        net.set_input_stats(&[0.4, 0.5, 0.6], &[0.2, 0.3, 0.25]);
        let x = random_images(4, 3, 8).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::from_vec([3, 3, 8, 8], (0..3 * 3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let loss = |n: &Im2FlowNet<f64>| -> f64 {
            let mut m = n.clone();
            m.forward_train(&x).unwrap().0.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let mut m = net.clone();
        let (_, trace) = m.forward_train(&x).unwrap();
        m.zero_grad();
        m.backward(&trace, &w);
        let mut analytic = Vec::new();
        m.visit_params(&mut |p| analytic.extend(p.grad.iter().copied()));
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in (0..analytic.len()).step_by(3) {
            let bump = |d: f64| {
                let mut c = net.clone();
                let mut idx = 0;
                c.visit_params(&mut |p| {
                    for v in p.value.iter_mut() {
                        if idx == k {
                            *v += d;
                        }
                        idx += 1;
                    }
                });
                loss(&c)
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let rel = (num - analytic[k]).abs() / num.abs().max(analytic[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut net = Im2FlowNet::<f32>::new(ModelConfig::default(), 3.0).unwrap();
        let x = random_images(7, 2, 64);
        let (y, trace) = net.forward_train(&x).unwrap();
        net.zero_grad();
        net.backward(&trace, &y.map(|v| v - 0.3));
        let mut dead = Vec::new();
        let mut i = 0;
        net.visit_params(&mut |p| {
            if p.grad_norm() == 0.0 {
                dead.push(i);
            }
            i += 1;
        });
        assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
    }

    #[test]
    fn quantile_of_moving_magnitudes() {
        let f = crate::FlowField::new(4, 1, vec![0.0, 1.0, 2.0, 3.0], vec![0.0; 4]).unwrap();
        assert_eq!(magnitude_quantile([&f], 1.0, 1e-3), 3.0);
        assert_eq!(magnitude_quantile([&f], 0.5, 1e-3), 2.0);
        assert_eq!(magnitude_quantile([&crate::FlowField::zeros(2, 2)], 0.99, 1e-3), 1.0);
    }
}
