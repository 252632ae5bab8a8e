use crate::module::join;
use crate::{Module, Param, Real, Tensor, TensorKind};

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Activations kept from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "batch norm channels");
        let count = (n * h * w) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(c);
        let mom = T::lit(self.momentum);
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                sum += x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                sq += x.plane(b, ch).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
            for b in 0..n {
                let src = x.plane(b, ch);
                let xh = xhat.plane_mut(b, ch);
                for (d, s) in xh.iter_mut().zip(src) {
                    *d = (*s - mean_t) * istd_t;
                }
                let xh = xhat.plane(b, ch).to_vec();
                for (d, s) in y.plane_mut(b, ch).iter_mut().zip(&xh) {
                    *d = g * *s + bt;
                }
            }
            inv_std.push(istd_t);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean_t;
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * T::lit(unbiased);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.channels(), "batch norm channels");
        let mut y = x.clone();
        for ch in 0..c {
            let (scale, shift) = self.eval_affine(ch);
            for b in 0..n {
                y.plane_mut(b, ch).iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    fn eval_affine(&self, ch: usize) -> (T, T) {
        let istd = T::one() / (self.running_var[ch] + T::lit(self.eps)).sqrt();
        let scale = self.gamma.value[ch] * istd;
        (scale, self.beta.value[ch] - self.running_mean[ch] * scale)
    }

    pub fn backward_train(&mut self, cache: &BnCache<T>, gy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let [n, c, h, w] = gy.shape();
        let count = T::lit((n * h * w) as f64);
        let mut gx = Tensor::zeros(gy.shape());
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..n {
                for (g, xh) in gy.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                    sum_g += *g;
                    sum_gx += *g * *xh;
                }
            }
            if param_grads {
                self.beta.grad[ch] += sum_g;
                self.gamma.grad[ch] += sum_gx;
            }
            let k = self.gamma.value[ch] * cache.inv_std[ch] / count;
            for b in 0..n {
                let xh = cache.xhat.plane(b, ch);
                let g = gy.plane(b, ch);
                for ((d, gv), xv) in gx.plane_mut(b, ch).iter_mut().zip(g).zip(xh) {
                    *d = k * (count * *gv - sum_g - *xv * sum_gx);
                }
            }
        }
        gx
    }

    /// Input gradient through the eval-mode affine map (running statistics).
    pub fn backward_eval(&self, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = gy.shape();
        let mut gx = gy.clone();
        for ch in 0..c {
            let (scale, _) = self.eval_affine(ch);
            for b in 0..n {
                gx.plane_mut(b, ch).iter_mut().for_each(|v| *v *= scale);
            }
        }
        gx
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), TensorKind::Param, &c, &self.gamma.value);
        f(&join(prefix, "beta"), TensorKind::Param, &c, &self.beta.value);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &c, &self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &c, &self.running_var);
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T]),
    ) {
        let c = [self.channels()];
        f(&join(prefix, "gamma"), TensorKind::Param, &c, &mut self.gamma.value);
        f(&join(prefix, "beta"), TensorKind::Param, &c, &mut self.beta.value);
        f(&join(prefix, "running_mean"), TensorKind::Buffer, &c, &mut self.running_mean);
        f(&join(prefix, "running_var"), TensorKind::Buffer, &c, &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * scale).sin() * 2.0 + 0.3).collect())
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let (y, _) = bn.forward_train(&ramp([3, 2, 4, 4], 0.7));
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let x = ramp([2, 2, 3, 3], 0.9);
        let gy = ramp(x.shape(), 0.37);
        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let mut probe = bn.clone();
        let (_, cache) = probe.forward_train(&x);
        let gx = probe.backward_train(&cache, &gy, true);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "{fd} vs {}", gx.data()[i]);
        }
        for ch in 0..2 {
            let mut b = bn.clone();
            b.gamma.value[ch] += eps;
            let lp = loss(&b, &x);
            b.gamma.value[ch] -= 2.0 * eps;
            let fd = (lp - loss(&b, &x)) / (2.0 * eps);
            assert!((fd - probe.gamma.grad[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 4.0]);
        let y = bn.forward_eval(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }
}
