use crate::Real;

/// Trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Whether a named tensor is optimized or only carried along (running stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Visitor interface shared by layers and whole networks.
///
/// Visit order is fixed by construction; optimizers and checkpoints rely on it.
pub trait Module<T: Real> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T]));

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T]),
    );

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_state("", &mut |_, kind, _, v| {
            if kind == TensorKind::Param {
                n += v.len();
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Copies every named tensor of `src` into `dst`, converting the scalar type.
///
/// Both modules must have been built from the same configuration.
pub fn copy_state<A: Real, B: Real>(src: &dyn Module<A>, dst: &mut dyn Module<B>) {
    let mut values: Vec<(String, Vec<f64>)> = Vec::new();
    src.visit_state("", &mut |name, _, _, v| {
        values.push((name.to_string(), v.iter().map(|x| x.as_f64()).collect()));
    });
    let mut it = values.into_iter();
    dst.visit_state_mut("", &mut |name, _, _, v| {
        let (src_name, src_v) = it.next().expect("source has fewer tensors");
        assert_eq!(src_name, name, "tensor order differs");
        assert_eq!(src_v.len(), v.len(), "tensor {name} differs in size");
        for (d, s) in v.iter_mut().zip(src_v) {
            *d = B::lit(s);
        }
    });
}
