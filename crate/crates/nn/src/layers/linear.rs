use crate::module::join;
use crate::{matmul, Module, Param, Real, SeededInit, Tensor, TensorKind};

/// Fully connected layer on `[n, in, 1, 1]` activations. Weight layout `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<T: Real> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, init: &mut SeededInit) -> Self {
        Self {
            weight: Param::new(vec![fan_out, fan_in], init.fan_in_uniform(fan_in * fan_out, fan_in)),
            bias: Param::filled(vec![fan_out], T::zero()),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.n();
        assert_eq!(x.sample_len(), self.fan_in, "linear input width");
        let mut y = vec![T::zero(); n * self.fan_out];
        matmul(false, true, n, self.fan_in, self.fan_out, x.data(), &self.weight.value, T::zero(), &mut y);
        for row in y.chunks_mut(self.fan_out) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        Tensor::from_vec([n, self.fan_out, 1, 1], y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let n = x.n();
        if param_grads {
            matmul(true, false, self.fan_out, n, self.fan_in, gy.data(), x.data(), T::one(), &mut self.weight.grad);
            for row in gy.data().chunks(self.fan_out) {
                for (g, v) in self.bias.grad.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut gx = vec![T::zero(); n * self.fan_in];
        matmul(false, false, n, self.fan_out, self.fan_in, gy.data(), &self.weight.value, T::zero(), &mut gx);
        Tensor::from_vec(x.shape(), gx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.shape, &self.weight.value);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias.shape, &self.bias.value);
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T]),
    ) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.shape, &mut self.weight.value);
        f(&join(prefix, "bias"), TensorKind::Param, &self.bias.shape, &mut self.bias.value);
    }
}

/// Row-wise softmax of `[n, k, 1, 1]` logits, returned as `n` vectors.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<T>> {
    let k = logits.sample_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|v| (*v - mx).exp()).collect();
            let s: T = e.iter().copied().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let n = logits.n();
    assert_eq!(labels.len(), n, "one label per row");
    let probs = softmax_rows(logits);
    let inv_n = T::lit(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (p, &y) in probs.iter().zip(labels) {
        loss -= p[y].max(T::lit(1e-30)).ln() * inv_n;
        for (j, &pj) in p.iter().enumerate() {
            let t = if j == y { T::one() } else { T::zero() };
            grad.push((pj - t) * inv_n);
        }
    }
    (loss, Tensor::from_vec(logits.shape(), grad))
}
