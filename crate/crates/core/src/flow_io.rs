//! Flow persistence and visualization.
//!
//! `.flo` layout (little endian): the float `202021.25` (bytes "PIEH"), `i32`
//! width, `i32` height, then `height * width` interleaved `(u, v)` `f32` pairs
//! in row-major order.

use crate::flow::{EncodedFlow, FlowError, FlowField};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FLO_MAGIC: f32 = 202021.25;
const FLO_HEADER: usize = 12;

#[derive(Debug, Error)]
pub enum FlowIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected 202021.25 (\"PIEH\"), found {0}")]
    BadMagic(f32),
    #[error("truncated flow data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing bytes after flow payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("non-positive dimensions {width}x{height}")]
    BadDimensions { width: i32, height: i32 },
    #[error("invalid flow payload: {0}")]
    InvalidFlow(#[from] FlowError),
    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("metadata error on {path}: {message}")]
    Metadata { path: PathBuf, message: String },
    #[error("magnitude normalizer must be positive, got {0}")]
    BadNormalizer(f32),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowIoError + '_ {
    move |source| FlowIoError::Io { path: path.to_path_buf(), source }
}

/// Serializes a field to `.flo` bytes.
pub fn flo_bytes(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(FLO_HEADER + field.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width() as i32).to_le_bytes());
    out.extend_from_slice(&(field.height() as i32).to_le_bytes());
    for (u, v) in field.u().iter().zip(field.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `.flo` bytes.
pub fn parse_flo(bytes: &[u8]) -> Result<FlowField, FlowIoError> {
    if bytes.len() < FLO_HEADER {
        return Err(FlowIoError::Truncated { expected: FLO_HEADER, actual: bytes.len() });
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("four bytes") };
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(FlowIoError::BadMagic(magic));
    }
    let (width, height) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if width <= 0 || height <= 0 {
        return Err(FlowIoError::BadDimensions { width, height });
    }
    let n = width as usize * height as usize;
    let expected = FLO_HEADER + n * 8;
    if bytes.len() < expected {
        return Err(FlowIoError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(FlowIoError::TrailingBytes { expected, actual: bytes.len() });
    }
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for px in bytes[FLO_HEADER..].chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().expect("four bytes")));
        v.push(f32::from_le_bytes(px[4..].try_into().expect("four bytes")));
    }
    Ok(FlowField::new(width as usize, height as usize, u, v)?)
}

pub fn write_flo(field: &FlowField, path: &Path) -> Result<(), FlowIoError> {
    fs::write(path, flo_bytes(field)).map_err(io_err(path))
}

pub fn read_flo(path: &Path) -> Result<FlowField, FlowIoError> {
    parse_flo(&fs::read(path).map_err(io_err(path))?)
}

/// 8-bit flow image plus the magnitude normalizer needed to invert it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedFlowImage {
    pub image: RgbImage,
    pub m_max: f32,
}

#[derive(Serialize, Deserialize)]
struct QuantizedMeta {
    m_max: f32,
    width: u32,
    height: u32,
}

fn to_byte(x: f64) -> u8 {
    // f64::round is half-away-from-zero.
    x.clamp(0.0, 255.0).round() as u8
}

/// Direction channels map `[-1, 1]` to `[0, 255]`; magnitude maps `[0, m_max]`
/// to `[0, 255]`, clamped above `m_max`.
pub fn quantize(enc: &EncodedFlow, m_max: f32) -> Result<QuantizedFlowImage, FlowIoError> {
    if !(m_max > 0.0 && m_max.is_finite()) {
        return Err(FlowIoError::BadNormalizer(m_max));
    }
    let (w, h) = (enc.width() as u32, enc.height() as u32);
    let mut image = RgbImage::new(w, h);
    for (i, px) in image.pixels_mut().enumerate() {
        let dir = |c: f32| to_byte((c.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * 255.0);
        let mag = to_byte(enc.f3()[i].min(m_max) as f64 / m_max as f64 * 255.0);
        *px = Rgb([dir(enc.f1()[i]), dir(enc.f2()[i]), mag]);
    }
    Ok(QuantizedFlowImage { image, m_max })
}

pub fn dequantize(q: &QuantizedFlowImage) -> EncodedFlow {
    let n = (q.image.width() * q.image.height()) as usize;
    let (mut f1, mut f2, mut f3) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in q.image.pixels() {
        f1.push((px[0] as f64 / 255.0 * 2.0 - 1.0) as f32);
        f2.push((px[1] as f64 / 255.0 * 2.0 - 1.0) as f32);
        f3.push((px[2] as f64 / 255.0 * q.m_max as f64) as f32);
    }
    EncodedFlow::new(q.image.width() as usize, q.image.height() as usize, f1, f2, f3)
        .expect("dequantized channels are finite and non-negative")
}

/// Sidecar metadata path for a quantized image: `flow.png` -> `flow.png.toml`.
pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut s = image_path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub fn save_quantized(q: &QuantizedFlowImage, image_path: &Path) -> Result<(), FlowIoError> {
    q.image
        .save(image_path)
        .map_err(|source| FlowIoError::Image { path: image_path.to_path_buf(), source })?;
    let meta = QuantizedMeta { m_max: q.m_max, width: q.image.width(), height: q.image.height() };
    let side = sidecar_path(image_path);
    let text = toml::to_string(&meta)
        .map_err(|e| FlowIoError::Metadata { path: side.clone(), message: e.to_string() })?;
    fs::write(&side, text).map_err(io_err(&side))
}

pub fn load_quantized(image_path: &Path) -> Result<QuantizedFlowImage, FlowIoError> {
    let side = sidecar_path(image_path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let meta: QuantizedMeta =
        toml::from_str(&text).map_err(|e| FlowIoError::Metadata { path: side.clone(), message: e.to_string() })?;
    if !(meta.m_max > 0.0) {
        return Err(FlowIoError::BadNormalizer(meta.m_max));
    }
    let image = image::open(image_path)
        .map_err(|source| FlowIoError::Image { path: image_path.to_path_buf(), source })?
        .to_rgb8();
    if (image.width(), image.height()) != (meta.width, meta.height) {
        return Err(FlowIoError::Metadata {
            path: side,
            message: format!(
                "sidecar says {}x{}, image is {}x{}",
                meta.width,
                meta.height,
                image.width(),
                image.height()
            ),
        });
    }
    Ok(QuantizedFlowImage { image, m_max: meta.m_max })
}

/// HSV color wheel: hue follows `atan2(v, u)`, saturation is
/// `min(M / m_display, 1)`, value is 1. Zero flow is white.
pub fn flow_to_color(field: &FlowField, m_display: f32) -> RgbImage {
    assert!(m_display > 0.0, "display normalizer must be positive");
    let mut img = RgbImage::new(field.width() as u32, field.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let (u, v) = (field.u()[i] as f64, field.v()[i] as f64);
        let sat = (u.hypot(v) / m_display as f64).min(1.0);
        let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
        *px = hsv_to_rgb(hue, sat);
    }
    img
}

fn hsv_to_rgb(hue: f64, sat: f64) -> Rgb<u8> {
    let h = hue / 60.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    Rgb([to_byte(r * 255.0), to_byte(g * 255.0), to_byte(b * 255.0)])
}

/// Hue in degrees of an RGB color, `None` for greys.
pub fn rgb_hue(px: Rgb<u8>) -> Option<f64> {
    let [r, g, b] = px.0.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{encode_flow, MotionThresholds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimal_file() {
        let f = FlowField::zeros(1, 1);
        let b = flo_bytes(&f);
        // 12-byte header plus one (u, v) pair.
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..4], b"PIEH");
        assert_eq!(parse_flo(&b).unwrap(), f);
    }

    #[test]
    fn header_diagnostics() {
        let mut b = flo_bytes(&FlowField::zeros(2, 2));
        b[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(parse_flo(&b), Err(FlowIoError::BadMagic(m)) if m == 0.0));

        let mut b = flo_bytes(&FlowField::zeros(2, 2));
        b[4..8].copy_from_slice(&(-3i32).to_le_bytes());
        assert!(matches!(parse_flo(&b), Err(FlowIoError::BadDimensions { width: -3, height: 2 })));

        let b = flo_bytes(&FlowField::zeros(2, 2));
        assert!(matches!(parse_flo(&b[..b.len() - 1]), Err(FlowIoError::Truncated { .. })));
        assert!(matches!(parse_flo(&b[..7]), Err(FlowIoError::Truncated { expected: 12, actual: 7 })));
    }

    #[test]
    fn random_field_size_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = (0..32 * 24).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = (0..32 * 24).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f = FlowField::new(32, 24, u, v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.flo");
        write_flo(&f, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 12 + 32 * 24 * 8);
        let g = read_flo(&path).unwrap();
        assert!(f.u().iter().zip(g.u()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(f.v().iter().zip(g.v()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn quantize_endpoints_and_midpoint() {
        let e = EncodedFlow::new(2, 1, vec![-1.0, 1.0], vec![0.0, 0.0], vec![0.0, 1.5]).unwrap();
        let q = quantize(&e, 3.0).unwrap();
        assert_eq!(q.image.get_pixel(0, 0)[0], 0);
        assert_eq!(q.image.get_pixel(1, 0)[0], 255);
        assert_eq!(q.image.get_pixel(1, 0)[2], 128);
        assert!(quantize(&e, 0.0).is_err());
    }

    #[test]
    fn quantized_round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400;
        let m_max = 4.0f32;
        let f1: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f2: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f3: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
        let e = EncodedFlow::new(20, 20, f1, f2, f3).unwrap();
        let d = dequantize(&quantize(&e, m_max).unwrap());
        for i in 0..n {
            assert!((d.f1()[i] - e.f1()[i]).abs() as f64 <= 2.0 / 255.0 / 2.0 + 1e-6);
            assert!((d.f2()[i] - e.f2()[i]).abs() as f64 <= 2.0 / 255.0 / 2.0 + 1e-6);
            let clamped = e.f3()[i].min(m_max);
            assert!((d.f3()[i] - clamped).abs() as f64 <= m_max as f64 / 255.0 / 2.0 + 1e-6);
        }
    }

    #[test]
    fn quantized_files_carry_normalizer() {
        let f = FlowField::constant(3, 2, 1.0, -0.5).unwrap();
        let q = quantize(&encode_flow(&f, MotionThresholds::default()), 2.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.png");
        save_quantized(&q, &p).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(load_quantized(&p).unwrap(), q);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(4, 3), 1.0);
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn opposite_directions_are_antipodal() {
        let right = flow_to_color(&FlowField::constant(1, 1, 1.0, 0.0).unwrap(), 1.0);
        let left = flow_to_color(&FlowField::constant(1, 1, -1.0, 0.0).unwrap(), 1.0);
        let (hr, hl) = (rgb_hue(*right.get_pixel(0, 0)).unwrap(), rgb_hue(*left.get_pixel(0, 0)).unwrap());
        let d = (hr - hl).rem_euclid(360.0);
        assert!((d - 180.0).abs() < 1.0, "hues {hr} {hl}");
    }

    #[test]
    fn vortex_sweeps_every_hue_once() {
        let n = 33;
        let c = 16.0f32;
        let mut u = Vec::new();
        let mut v = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f32 - c, y as f32 - c);
                u.push(-dy);
                v.push(dx);
            }
        }
        let img = flow_to_color(&FlowField::new(n, n, u, v).unwrap(), 5.0);
        // Walk a circle of radius 12 and unwrap the hue.
        let steps = 360;
        let mut total = 0.0;
        let mut prev = None;
        for k in 0..=steps {
            let a = k as f64 / steps as f64 * std::f64::consts::TAU;
            let (x, y) = ((c as f64 + 12.0 * a.cos()).round(), (c as f64 + 12.0 * a.sin()).round());
            let h = rgb_hue(*img.get_pixel(x as u32, y as u32)).unwrap();
            if let Some(p) = prev {
                let mut d: f64 = h - p;
                if d > 180.0 {
                    d -= 360.0;
                } else if d < -180.0 {
                    d += 360.0;
                }
                assert!(d >= -1.0, "hue must not run backwards");
                total += d;
            }
            prev = Some(h);
        }
        assert!((total - 360.0).abs() < 2.0, "swept {total} degrees");
    }
}
