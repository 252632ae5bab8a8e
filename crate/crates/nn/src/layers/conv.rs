use crate::module::join;
use crate::{matmul, Module, Param, Real, SeededInit, Tensor, TensorKind};

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Periodic (wrap-around) boundary.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub pad_mode: PadMode,
}

impl ConvGeom {
    /// Stride-1 convolution that preserves spatial size.
    pub fn same(kernel: usize, dilation: usize, pad_mode: PadMode) -> Self {
        Self { kernel, stride: 1, padding: dilation * (kernel - 1) / 2, dilation, pad_mode }
    }

    pub fn strided(kernel: usize, stride: usize, pad_mode: PadMode) -> Self {
        Self { kernel, stride, padding: (kernel - 1) / 2, dilation: 1, pad_mode }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let f = |s: usize| (s + 2 * self.padding - span) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let i = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        if i >= 0 && (i as usize) < size {
            Some(i as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Circular => Some(i.rem_euclid(size as isize) as usize),
            }
        }
    }
}

/// 2-D convolution, weight layout `[cout, cin, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
}

impl<T: Real> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, geom: ConvGeom, bias: bool, init: &mut SeededInit) -> Self {
        let k = geom.kernel;
        let fan_in = cin * k * k;
        let weight = Param::new(vec![cout, cin, k, k], init.fan_in_uniform(cout * fan_in, fan_in));
        let bias = bias.then(|| Param::filled(vec![cout], T::zero()));
        Self { weight, bias, cin, cout, geom }
    }

    fn col_rows(&self) -> usize {
        self.cin * self.geom.kernel * self.geom.kernel
    }

    /// Output columns `[lo, hi)` whose source column for tap `kx` lies inside
    /// the input row.
    fn interior(&self, kx: usize, w: usize, ow: usize) -> (usize, usize, isize) {
        let g = &self.geom;
        let off = (kx * g.dilation) as isize - g.padding as isize;
        let s = g.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let hi = if (w as isize) <= off { 0 } else { (((w as isize - 1 - off) / s) + 1) as usize };
        let hi = hi.min(ow);
        (lo.min(hi), hi, off)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let g = &self.geom;
        let (oh, ow) = g.out_size(h, w);
        let k = g.kernel;
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi, off) = self.interior(kx, w, ow);
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        match g.source(oy, ky, h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * w..(iy + 1) * w];
                                for ox in (0..lo).chain(hi..ow) {
                                    line[ox] = g.source(ox, kx, w).map_or(T::zero(), |ix| src[ix]);
                                }
                                if g.stride == 1 {
                                    let start = (lo as isize + off) as usize;
                                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                } else {
                                    for ox in lo..hi {
                                        line[ox] = src[(ox as isize * g.stride as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, x: &mut [T]) {
        let g = &self.geom;
        let (oh, ow) = g.out_size(h, w);
        let k = g.kernel;
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi, off) = self.interior(kx, w, ow);
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        if let Some(iy) = g.source(oy, ky, h) {
                            let line = &src[oy * ow..(oy + 1) * ow];
                            let dst = &mut plane[iy * w..(iy + 1) * w];
                            for ox in (0..lo).chain(hi..ow) {
                                if let Some(ix) = g.source(ox, kx, w) {
                                    dst[ix] += line[ox];
                                }
                            }
                            if g.stride == 1 {
                                let start = (lo as isize + off) as usize;
                                for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                    *d += *v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[(ox as isize * g.stride as isize + off) as usize] += line[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, cin, h, w] = x.shape();
        assert_eq!(cin, self.cin, "conv input channels");
        let (oh, ow) = self.geom.out_size(h, w);
        let p = oh * ow;
        let kk = self.col_rows();
        let mut out = Tensor::zeros([n, self.cout, oh, ow]);
        let mut col = if self.geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        for i in 0..n {
            let xs = x.sample(i);
            let col_ref: &[T] = if self.geom.is_pointwise() {
                xs
            } else {
                self.im2col(xs, h, w, &mut col);
                &col
            };
            let ys = out.sample_mut(i);
            matmul(false, false, self.cout, kk, p, &self.weight.value, col_ref, T::zero(), ys);
            if let Some(b) = &self.bias {
                for (co, plane) in ys.chunks_mut(p).enumerate() {
                    let bv = b.value[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Backward pass for input `x` and output gradient `gy`.
    ///
    /// Parameter gradients are accumulated only when `param_grads` is set;
    /// the input gradient is returned only when `input_grad` is set.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.geom.out_size(h, w);
        assert_eq!(gy.shape(), [n, self.cout, oh, ow], "conv output gradient shape");
        let p = oh * ow;
        let kk = self.col_rows();
        let pointwise = self.geom.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut gcol = vec![T::zero(); if pointwise { 0 } else { kk * p }];
        let mut gx = input_grad.then(|| Tensor::zeros(x.shape()));
        // Weight gradient accumulated transposed: col (kk x p) times gy^T keeps
        // the long reduction axis contiguous in both operands.
        let mut gwt = vec![T::zero(); if param_grads { kk * self.cout } else { 0 }];
        for i in 0..n {
            let gys = gy.sample(i);
            if param_grads {
                let xs = x.sample(i);
                let col_ref: &[T] = if pointwise {
                    xs
                } else {
                    self.im2col(xs, h, w, &mut col);
                    &col
                };
                matmul(false, true, kk, p, self.cout, col_ref, gys, T::one(), &mut gwt);
                if let Some(b) = &mut self.bias {
                    for (co, plane) in gys.chunks(p).enumerate() {
                        b.grad[co] += plane.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                let gxs = gx.sample_mut(i);
                if pointwise {
                    matmul(true, false, kk, self.cout, p, &self.weight.value, gys, T::zero(), gxs);
                } else {
                    matmul(true, false, kk, self.cout, p, &self.weight.value, gys, T::zero(), &mut gcol);
                    self.col2im(&gcol, h, w, gxs);
                }
            }
        }
        if param_grads {
            for r in 0..kk {
                for co in 0..self.cout {
                    self.weight.grad[co * kk + r] += gwt[r * self.cout + co];
                }
            }
        }
        gx
    }
}

impl<T: Real> Conv2d<T> {
    /// Input gradient only; parameters are left untouched.
    pub fn input_grad(&self, in_shape: [usize; 4], gy: &Tensor<T>) -> Tensor<T> {
        let [n, _, h, w] = in_shape;
        let (oh, ow) = self.geom.out_size(h, w);
        assert_eq!(gy.shape(), [n, self.cout, oh, ow], "conv output gradient shape");
        let p = oh * ow;
        let kk = self.col_rows();
        let mut gx = Tensor::zeros(in_shape);
        let mut gcol = vec![T::zero(); if self.geom.is_pointwise() { 0 } else { kk * p }];
        for i in 0..n {
            let gxs = gx.sample_mut(i);
            if self.geom.is_pointwise() {
                matmul(true, false, kk, self.cout, p, &self.weight.value, gy.sample(i), T::zero(), gxs);
            } else {
                matmul(true, false, kk, self.cout, p, &self.weight.value, gy.sample(i), T::zero(), &mut gcol);
                self.col2im(&gcol, h, w, gxs);
            }
        }
        gx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, TensorKind, &[usize], &[T])) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.shape, &self.weight.value);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), TensorKind::Param, &b.shape, &b.value);
        }
    }

    fn visit_state_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, TensorKind, &[usize], &mut [T]),
    ) {
        f(&join(prefix, "weight"), TensorKind::Param, &self.weight.shape, &mut self.weight.value);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), TensorKind::Param, &b.shape, &mut b.value);
        }
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
/// Weight layout `[cin, cout, 2, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2x2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
}

impl<T: Real> ConvTranspose2x2<T> {
    pub fn new(cin: usize, cout: usize, init: &mut SeededInit) -> Self {
        let weight = Param::new(vec![cin, cout, 2, 2], init.fan_in_uniform(cin * cout * 4, cin));
        Self { weight, bias: Param::filled(vec![cout], T::zero()), cin, cout }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, cin, h, w] = x.shape();
        assert_eq!(cin, self.cin, "transposed conv input channels");
        let p = h * w;
        let rows = self.cout * 4;
        let mut tmp = vec![T::zero(); rows * p];
        let mut out = Tensor::zeros([n, self.cout, 2 * h, 2 * w]);
        for i in 0..n {
            matmul(true, false, rows, cin, p, &self.weight.value, x.sample(i), T::zero(), &mut tmp);
            let ys = out.sample_mut(i);
            for co in 0..self.cout {
                let b = self.bias.value[co];
                let plane = &mut ys[co * 4 * p..(co + 1) * 4 * p];
                for a in 0..2 {
                    for bx in 0..2 {
                        let src = &tmp[(co * 4 + a * 2 + bx) * p..][..p];
                        for y in 0..h {
                            let row = &mut plane[(2 * y + a) * 2 * w..][..2 * w];
                            for x in 0..w {
                                row[2 * x + bx] = src[y * w + x] + b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, cin, h, w] = x.shape();
        assert_eq!(gy.shape(), [n, self.cout, 2 * h, 2 * w], "transposed conv gradient shape");
        let p = h * w;
        let rows = self.cout * 4;
        let mut gtmp = vec![T::zero(); rows * p];
        let mut gx = input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let gys = gy.sample(i);
            for co in 0..self.cout {
                let plane = &gys[co * 4 * p..(co + 1) * 4 * p];
                if param_grads {
                    self.bias.grad[co] += plane.iter().copied().sum::<T>();
                }
                for a in 0..2 {
                    for bx in 0..2 {
                        let dst = &mut gtmp[(co * 4 + a * 2 + bx) * p..][..p];
                        for y in 0..h {
                            let row = &plane[(2 * y + a) * 2 * w..][..2 * w];
                            for x in 0..w {
                                dst[y * w + x] = row[2 * x + bx];
                            }
                        }
                    }
                }
            }
            if param_grads {
                matmul(false, true, cin, p, rows, x.sample(i), &gtmp, T::one(), &mut self.weight.grad);
            }
            if let Some(gx) = gx.as_mut() {
                matmul(false, false, cin, rows, p, &self.weight.value, &gtmp, T::zero(), gx.sample_mut(i));
            }
        }
        gx
    }
}

impl<T: Real> Module<T> for ConvTranspose2x2<T> {
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

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution, independent of im2col and gemm.
    fn naive_conv(c: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let g = c.geom;
        let (oh, ow) = g.out_size(h, w);
        let k = g.kernel;
        let mut out = Tensor::zeros([n, c.cout, oh, ow]);
        for b in 0..n {
            for co in 0..c.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    let (iy, ix) = match g.pad_mode {
                                        PadMode::Zero => {
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                continue;
                                            }
                                            (iy as usize, ix as usize)
                                        }
                                        PadMode::Circular => (
                                            iy.rem_euclid(h as isize) as usize,
                                            ix.rem_euclid(w as isize) as usize,
                                        ),
                                    };
                                    let wv = c.weight.value[((co * cin + ci) * k + ky) * k + kx];
                                    acc += wv * x.at(b, ci, iy, ix);
                                }
                            }
                        }
                        out.set(b, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + 1.0) * scale).sin()).collect())
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut init = SeededInit::new(3);
        let geoms = [
            ConvGeom::same(3, 1, PadMode::Zero),
            ConvGeom::same(3, 2, PadMode::Zero),
            ConvGeom::strided(3, 2, PadMode::Zero),
            ConvGeom::same(3, 1, PadMode::Circular),
            ConvGeom::same(1, 1, PadMode::Zero),
        ];
        for g in geoms {
            let conv = Conv2d::<f64>::new(2, 3, g, true, &mut init);
            let x = ramp([2, 2, 6, 6], 0.7);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert!(got.max_abs_diff(&want) < 1e-12, "geom {g:?}");
        }
    }

    fn finite_diff_check(conv: &mut Conv2d<f64>, x: &Tensor<f64>) {
        let y = conv.forward(x);
        let gy = ramp(y.shape(), 0.31);
        let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        conv.weight.zero_grad();
        let gx = conv.backward(x, &gy, true, true).unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(conv, &xp) - loss(conv, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6, "input grad {i}");
        }
        for i in 0..conv.weight.numel() {
            let mut c = conv.clone();
            c.weight.value[i] += eps;
            let lp = loss(&c, x);
            c.weight.value[i] -= 2.0 * eps;
            let lm = loss(&c, x);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-6, "weight grad {i}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut init = SeededInit::new(9);
        for g in [
            ConvGeom::same(3, 2, PadMode::Zero),
            ConvGeom::strided(3, 2, PadMode::Zero),
            ConvGeom::same(3, 1, PadMode::Circular),
            ConvGeom::same(1, 1, PadMode::Zero),
        ] {
            let mut conv = Conv2d::<f64>::new(2, 2, g, true, &mut init);
            finite_diff_check(&mut conv, &ramp([1, 2, 5, 5], 0.9));
        }
    }

    #[test]
    fn transposed_conv_upsamples_and_backprops() {
        let mut init = SeededInit::new(1);
        let mut t = ConvTranspose2x2::<f64>::new(2, 3, &mut init);
        let x = ramp([2, 2, 3, 3], 0.5);
        let y = t.forward(&x);
        assert_eq!(y.shape(), [2, 3, 6, 6]);
        // Each output pixel sees exactly one input pixel.
        let want = t.bias.value[1]
            + (0..2).map(|ci| x.at(1, ci, 2, 1) * t.weight.value[((ci * 3 + 1) * 2 + 1) * 2]).sum::<f64>();
        assert!((y.at(1, 1, 5, 2) - want).abs() < 1e-12);

        let gy = ramp(y.shape(), 0.23);
        let loss = |t: &ConvTranspose2x2<f64>, x: &Tensor<f64>| -> f64 {
            t.forward(x).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let gx = t.backward(&x, &gy, true, true).unwrap();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&t, &xp) - loss(&t, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
        for i in 0..t.weight.numel() {
            let mut c = t.clone();
            c.weight.value[i] += eps;
            let lp = loss(&c, &x);
            c.weight.value[i] -= 2.0 * eps;
            let fd = (lp - loss(&c, &x)) / (2.0 * eps);
            assert!((fd - t.weight.grad[i]).abs() < 1e-6);
        }
    }
}
