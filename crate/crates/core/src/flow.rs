//! Flow fields and the three-channel motion encoding.
//!
//! Coordinates: row 0 is the top of the image, `u` is positive to the right and
//! `v` is positive downward. Units are pixels per frame.

use im2flow_nn::Tensor;
use thiserror::Error;

/// Magnitude floor below which a pixel counts as static.
pub const DEFAULT_EPS_MOTION: f32 = 1e-3;

/// Foreground-area floor used by [`motion_potential`].
pub const EPS_AREA: f64 = 0.01;

/// Below this norm the direction channels carry no usable direction.
const DIRECTION_NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("channel {channel} holds {actual} values, expected {expected}")]
    LengthMismatch { channel: &'static str, expected: usize, actual: usize },
    #[error("non-finite value {value} in channel {channel} at pixel (x={x}, y={y})")]
    NonFinite { channel: &'static str, x: usize, y: usize, value: f32 },
    #[error("negative magnitude {value} at pixel (x={x}, y={y})")]
    NegativeMagnitude { x: usize, y: usize, value: f32 },
    #[error("dimension mismatch: {expected_w}x{expected_h} vs {actual_w}x{actual_h}")]
    DimensionMismatch { expected_w: usize, expected_h: usize, actual_w: usize, actual_h: usize },
    #[error("cannot average an empty list of flow fields")]
    NoFields,
    #[error("motion threshold must be positive, got {0}")]
    BadThreshold(f32),
}

fn check_channel(
    channel: &'static str,
    data: &[f32],
    width: usize,
    height: usize,
) -> Result<(), FlowError> {
    if data.len() != width * height {
        return Err(FlowError::LengthMismatch { channel, expected: width * height, actual: data.len() });
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite { channel, x: i % width, y: i / width, value: data[i] });
    }
    Ok(())
}

fn check_dims(width: usize, height: usize) -> Result<(), FlowError> {
    if width == 0 || height == 0 {
        return Err(FlowError::EmptyDimensions { width, height });
    }
    Ok(())
}

/// Per-pixel displacement field. Always finite and non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self, FlowError> {
        check_dims(width, height)?;
        check_channel("u", &u, width, height)?;
        check_channel("v", &v, width, height)?;
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "flow field must be non-empty");
        Self { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    /// Field with the same `(u, v)` at every pixel.
    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Result<Self, FlowError> {
        Self::new(width, height, vec![u; width * height], vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.u.iter().zip(&self.v).map(|(u, v)| (*u as f64).hypot(*v as f64) as f32).collect()
    }

    pub fn same_dims(&self, other_w: usize, other_h: usize) -> Result<(), FlowError> {
        if self.width != other_w || self.height != other_h {
            return Err(FlowError::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                actual_w: other_w,
                actual_h: other_h,
            });
        }
        Ok(())
    }
}

/// Three-channel encoding `(sin theta, cos theta, magnitude)` = `(v/M, u/M, M)`.
///
/// Direction channels are not forced onto the unit circle here, so network
/// outputs can be wrapped too. Magnitude is non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFlow {
    width: usize,
    height: usize,
    f1: Vec<f32>,
    f2: Vec<f32>,
    f3: Vec<f32>,
}

impl EncodedFlow {
    pub fn new(
        width: usize,
        height: usize,
        f1: Vec<f32>,
        f2: Vec<f32>,
        f3: Vec<f32>,
    ) -> Result<Self, FlowError> {
        check_dims(width, height)?;
        check_channel("f1", &f1, width, height)?;
        check_channel("f2", &f2, width, height)?;
        check_channel("f3", &f3, width, height)?;
        if let Some(i) = f3.iter().position(|m| *m < 0.0) {
            return Err(FlowError::NegativeMagnitude { x: i % width, y: i / width, value: f3[i] });
        }
        Ok(Self { width, height, f1, f2, f3 })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn f1(&self) -> &[f32] {
        &self.f1
    }

    pub fn f2(&self) -> &[f32] {
        &self.f2
    }

    pub fn f3(&self) -> &[f32] {
        &self.f3
    }

    /// Channel-major `[1, 3, h, w]` layout used by the networks.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let mut data = Vec::with_capacity(3 * self.f1.len());
        data.extend_from_slice(&self.f1);
        data.extend_from_slice(&self.f2);
        data.extend_from_slice(&self.f3);
        Tensor::from_vec([1, 3, self.height, self.width], data)
    }

    /// Reads sample `index` of a `[n, 3, h, w]` batch.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self, FlowError> {
        assert_eq!(t.c(), 3, "encoded flow tensors have three channels");
        let p = t.plane_len();
        let s = t.sample(index);
        Self::new(t.w(), t.h(), s[..p].to_vec(), s[p..2 * p].to_vec(), s[2 * p..].to_vec())
    }

    /// Column mirror of the encoded map; `f2` changes sign.
    pub fn flip_horizontal(&self) -> Self {
        let mirror = |c: &[f32], neg: bool| -> Vec<f32> {
            let mut out = Vec::with_capacity(c.len());
            for row in c.chunks(self.width) {
                out.extend(row.iter().rev().map(|v| if neg { -*v } else { *v }));
            }
            out
        };
        Self {
            width: self.width,
            height: self.height,
            f1: mirror(&self.f1, false),
            f2: mirror(&self.f2, true),
            f3: mirror(&self.f3, false),
        }
    }
}

/// Validated static-pixel floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionThresholds {
    eps_motion: f32,
}

impl MotionThresholds {
    pub fn new(eps_motion: f32) -> Result<Self, FlowError> {
        if !(eps_motion > 0.0 && eps_motion.is_finite()) {
            return Err(FlowError::BadThreshold(eps_motion));
        }
        Ok(Self { eps_motion })
    }

    pub fn eps_motion(&self) -> f32 {
        self.eps_motion
    }
}

impl Default for MotionThresholds {
    fn default() -> Self {
        Self { eps_motion: DEFAULT_EPS_MOTION }
    }
}

/// Encodes `(u, v)` as `(v/M, u/M, M)`; pixels at or below the floor get zero direction.
pub fn encode_flow(field: &FlowField, thresholds: MotionThresholds) -> EncodedFlow {
    let n = field.len();
    let (mut f1, mut f2, mut f3) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let eps = thresholds.eps_motion as f64;
    for (&u, &v) in field.u.iter().zip(&field.v) {
        let (u, v) = (u as f64, v as f64);
        let m = u.hypot(v);
        if m > eps {
            f1.push((v / m) as f32);
            f2.push((u / m) as f32);
        } else {
            f1.push(0.0);
            f2.push(0.0);
        }
        f3.push(m as f32);
    }
    EncodedFlow { width: field.width, height: field.height, f1, f2, f3 }
}

/// Inverse of [`encode_flow`]. Direction channels are projected onto the unit
/// circle first; a near-zero direction decodes to zero flow.
pub fn decode_flow(enc: &EncodedFlow) -> FlowField {
    let n = enc.f1.len();
    let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (s, c, m) = (enc.f1[i] as f64, enc.f2[i] as f64, enc.f3[i] as f64);
        let norm = s.hypot(c);
        if norm > DIRECTION_NORM_FLOOR {
            u.push((c / norm * m) as f32);
            v.push((s / norm * m) as f32);
        } else {
            u.push(0.0);
            v.push(0.0);
        }
    }
    FlowField { width: enc.width, height: enc.height, u, v }
}

/// Per-pixel mean of same-sized fields.
pub fn average_flows(fields: &[FlowField]) -> Result<FlowField, FlowError> {
    let first = fields.first().ok_or(FlowError::NoFields)?;
    for f in &fields[1..] {
        first.same_dims(f.width, f.height)?;
    }
    let n = first.len();
    let (mut su, mut sv) = (vec![0.0f64; n], vec![0.0f64; n]);
    for f in fields {
        for i in 0..n {
            su[i] += f.u[i] as f64;
            sv[i] += f.v[i] as f64;
        }
    }
    let k = fields.len() as f64;
    Ok(FlowField {
        width: first.width,
        height: first.height,
        u: su.into_iter().map(|s| (s / k) as f32).collect(),
        v: sv.into_iter().map(|s| (s / k) as f32).collect(),
    })
}

/// Mirrors columns and negates `u`.
pub fn flip_horizontal(field: &FlowField) -> FlowField {
    let w = field.width;
    let mut u = Vec::with_capacity(field.len());
    let mut v = Vec::with_capacity(field.len());
    for (ru, rv) in field.u.chunks(w).zip(field.v.chunks(w)) {
        u.extend(ru.iter().rev().map(|x| -*x));
        v.extend(rv.iter().rev());
    }
    FlowField { width: w, height: field.height, u, v }
}

/// Boolean per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask length");
        Self { width, height, data }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![true; width * height])
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// 8-neighbourhood dilation by one pixel.
    pub fn dilate(&self) -> Self {
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = vec![false; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let hit = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (xx, yy) = (x + dx, y + dy);
                        xx >= 0 && yy >= 0 && xx < w && yy < h && self.data[(yy * w + xx) as usize]
                    })
                });
                out[(y * w + x) as usize] = hit;
            }
        }
        Self::new(self.width, self.height, out)
    }

    pub fn and(&self, other: &Mask) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Self::new(self.width, self.height, self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect())
    }
}

/// Mean magnitude over the image, normalised by the foreground fraction
/// (floored at [`EPS_AREA`]).
pub fn motion_potential(enc: &EncodedFlow, fg_mask: &Mask) -> Result<f64, FlowError> {
    if (enc.width, enc.height) != (fg_mask.width, fg_mask.height) {
        return Err(FlowError::DimensionMismatch {
            expected_w: enc.width,
            expected_h: enc.height,
            actual_w: fg_mask.width,
            actual_h: fg_mask.height,
        });
    }
    let total = enc.f3.len() as f64;
    let mean_mag = enc.f3.iter().map(|m| *m as f64).sum::<f64>() / total;
    let fg_fraction = fg_mask.count() as f64 / total;
    Ok(mean_mag / fg_fraction.max(EPS_AREA))
}
