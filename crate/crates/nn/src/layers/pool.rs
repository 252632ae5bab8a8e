use crate::{Real, Tensor};

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns the pooled tensor and the flat input index of each maximum.
    pub fn forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let src = x.plane(b, ch);
                let dst = y.plane_mut(b, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let j = (2 * oy + dy) * w + 2 * ox + dx;
                            if src[j] > src[best] {
                                best = j;
                            }
                        }
                        dst[oy * ow + ox] = src[best];
                        idx.push((base + best) as u32);
                    }
                }
            }
        }
        (y, idx)
    }

    pub fn backward<T: Real>(in_shape: [usize; 4], idx: &[u32], gy: &Tensor<T>) -> Tensor<T> {
        let mut gx = Tensor::zeros(in_shape);
        let d = gx.data_mut();
        for (&i, &g) in idx.iter().zip(gy.data()) {
            d[i as usize] += g;
        }
        gx
    }
}

/// Mean over each `h x w` plane, producing `[n, c, 1, 1]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut y = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            y.push(x.plane(b, ch).iter().copied().sum::<T>() * inv);
        }
    }
    Tensor::from_vec([n, c, 1, 1], y)
}

pub fn global_avg_pool_backward<T: Real>(in_shape: [usize; 4], gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let inv = T::lit(1.0 / (h * w) as f64);
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = gy.at(b, ch, 0, 0) * inv;
            gx.plane_mut(b, ch).iter_mut().for_each(|v| *v = g);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]);
        let (y, idx) = MaxPool2::forward(&x);
        assert_eq!(y.data(), &[5.0, 7.0]);
        let gx = MaxPool2::backward(x.shape(), &idx, &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]));
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn avg_pool_round_trip() {
        let x = Tensor::<f64>::from_vec([1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]);
        let y = global_avg_pool(&x);
        assert_eq!(y.data(), &[2.0, 0.0]);
        let gx = global_avg_pool_backward(x.shape(), &Tensor::from_vec([1, 2, 1, 1], vec![1.0, 4.0]));
        assert_eq!(gx.data(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
