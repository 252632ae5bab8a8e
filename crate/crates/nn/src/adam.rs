use crate::{Module, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. State is keyed by parameter visit order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients currently stored in `module`.
    pub fn step(&mut self, module: &mut dyn Module<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr_t = T::lit(c.lr * bc2.sqrt() / bc1);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps * bc2.sqrt()));
        let one = T::one();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        module.visit_params(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![T::zero(); p.numel()]);
                vs.push(vec![T::zero(); p.numel()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.numel(), "parameter layout changed between steps");
            for i in 0..p.numel() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
            idx += 1;
        });
    }
}
