mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{Conv2d, ConvGeom, ConvTranspose2x2, PadMode};
pub use linear::{softmax_cross_entropy, softmax_rows, Linear};
pub use norm::{BatchNorm2d, BnCache};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2};

use crate::{Real, Tensor};

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positive entries of the ReLU output `out`.
pub fn relu_backward<T: Real>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, o) in grad.data_mut().iter_mut().zip(out.data()) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Concatenates two batches along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    assert_eq!([b.n(), b.h(), b.w()], [n, h, w], "concat operands differ in shape");
    let cb = b.c();
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        out.extend_from_slice(a.sample(i));
        out.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec([n, ca + cb, h, w], out)
}

/// Inverse of [`concat_channels`] for gradients: splits off the first `ca` channels.
pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * (c - ca) * plane);
    for i in 0..n {
        let s = g.sample(i);
        a.extend_from_slice(&s[..ca * plane]);
        b.extend_from_slice(&s[ca * plane..]);
    }
    (Tensor::from_vec([n, ca, h, w], a), Tensor::from_vec([n, c - ca, h, w], b))
}
