//! Flow evaluation: end-point error, direction similarity and orientation
//! similarity over all pixels, Canny edges, or foreground masks.
//!
//! DS and OS only look at pixels whose ground truth moves (`|gt| > eps_eval`);
//! a prediction that is itself static at such a pixel scores 0 there.

use std::collections::VecDeque;
use std::fmt::Write as _;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{FlowField, Mask};

pub const DEFAULT_EPS_EVAL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("size mismatch: {what} is {actual:?}, expected {expected:?}")]
    Dims { what: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("no evaluated pixels for {0}")]
    NoEvaluatedPixels(&'static str),
    #[error("canny thresholds must satisfy 0 < low < high, got ({low}, {high})")]
    Thresholds { low: f64, high: f64 },
    #[error("canny sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("{predictions} predictions for {items} images")]
    Count { items: usize, predictions: usize },
    #[error("mask kind {0:?} needs a foreground mask for every image")]
    MissingForeground(MaskKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    All,
    Canny,
    Fg,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::All, MaskKind::Canny, MaskKind::Fg];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::All => "all",
            MaskKind::Canny => "canny",
            MaskKind::Fg => "fg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the largest gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.4, low: 0.1, high: 0.25 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(MetricsError::Sigma(self.sigma));
        }
        if !(0.0 < self.low && self.low < self.high) {
            return Err(MetricsError::Thresholds { low: self.low, high: self.high });
        }
        Ok(())
    }
}

/// Per-pixel accumulators for one image under one mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PixelSums {
    pub epe_sum: f64,
    pub epe_count: usize,
    pub ds_sum: f64,
    pub os_sum: f64,
    pub moving_count: usize,
}

impl PixelSums {
    pub fn epe(&self) -> Option<f64> {
        (self.epe_count > 0).then(|| self.epe_sum / self.epe_count as f64)
    }

    pub fn ds(&self) -> Option<f64> {
        (self.moving_count > 0).then(|| self.ds_sum / self.moving_count as f64)
    }

    pub fn os(&self) -> Option<f64> {
        (self.moving_count > 0).then(|| self.os_sum / self.moving_count as f64)
    }
}

fn check_dims(pred: &FlowField, gt: &FlowField, mask: Option<&Mask>) -> Result<(), MetricsError> {
    let expected = (gt.width(), gt.height());
    let actual = (pred.width(), pred.height());
    if actual != expected {
        return Err(MetricsError::Dims { what: "prediction", expected, actual });
    }
    if let Some(m) = mask {
        let actual = (m.width(), m.height());
        if actual != expected {
            return Err(MetricsError::Dims { what: "mask", expected, actual });
        }
    }
    Ok(())
}

/// Accumulates all three metrics in one pass; `mask = None` means every pixel.
pub fn pixel_sums(pred: &FlowField, gt: &FlowField, mask: Option<&Mask>, eps_eval: f64) -> Result<PixelSums, MetricsError> {
    check_dims(pred, gt, mask)?;
    let mut s = PixelSums::default();
    let (pu, pv, gu, gv) = (pred.u(), pred.v(), gt.u(), gt.v());
    for i in 0..gu.len() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let (pu, pv, gu, gv) = (pu[i] as f64, pv[i] as f64, gu[i] as f64, gv[i] as f64);
        s.epe_sum += (pu - gu).hypot(pv - gv);
        s.epe_count += 1;
        let gn = gu.hypot(gv);
        if gn > eps_eval {
            s.moving_count += 1;
            let pn = pu.hypot(pv);
            if pn > eps_eval {
                let cos = ((pu * gu + pv * gv) / (pn * gn)).clamp(-1.0, 1.0);
                s.ds_sum += cos;
                s.os_sum += cos.abs();
            }
        }
    }
    Ok(s)
}

pub fn epe(pred: &FlowField, gt: &FlowField, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    pixel_sums(pred, gt, mask, DEFAULT_EPS_EVAL)?.epe().ok_or(MetricsError::NoEvaluatedPixels("EPE"))
}

pub fn direction_similarity(pred: &FlowField, gt: &FlowField, mask: Option<&Mask>, eps_eval: f64) -> Result<f64, MetricsError> {
    pixel_sums(pred, gt, mask, eps_eval)?.ds().ok_or(MetricsError::NoEvaluatedPixels("DS"))
}

pub fn orientation_similarity(pred: &FlowField, gt: &FlowField, mask: Option<&Mask>, eps_eval: f64) -> Result<f64, MetricsError> {
    pixel_sums(pred, gt, mask, eps_eval)?.os().ok_or(MetricsError::NoEvaluatedPixels("OS"))
}

/// Integer luma (`299 R + 587 G + 114 B`) shifted so its minimum is zero,
/// which makes the detector exactly invariant to constant intensity offsets.
fn luma(image: &RgbImage) -> Vec<f64> {
    let raw: Vec<u32> = image.pixels().map(|p| 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32).collect();
    let min = raw.iter().copied().min().unwrap_or(0);
    raw.into_iter().map(|v| (v - min) as f64 / 255_000.0).collect()
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * src[y * w + clamp(x as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x]).sum();
        }
    }
    out
}

/// Canny edges: Gaussian blur, central-difference gradients, non-maximum
/// suppression along the quantized gradient direction, hysteresis.
pub fn canny_mask(image: &RgbImage, params: &CannyParams) -> Result<Mask, MetricsError> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let g = gaussian_blur(&luma(image), w, h, params.sigma);
    let at = |x: isize, y: isize| g[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = (((angle + 22.5) / 45.0).floor() as u8) % 4;
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Ok(Mask::empty(w, h));
    }
    let m = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            // Asymmetric comparison keeps one pixel of a two-pixel plateau.
            if mag[i] > m(x - dx, y - dy) && mag[i] >= m(x + dx, y + dy) {
                thin[i] = mag[i];
            }
        }
    }
    let (low, high) = (params.low * max, params.high * max);
    let mut edge = vec![false; w * h];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, v) in thin.iter().enumerate() {
        if *v >= high {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= low {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(Mask::new(w, h, edge))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub masks: Vec<MaskKind>,
    pub canny: CannyParams,
    pub eps_eval: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { masks: MaskKind::ALL.to_vec(), canny: CannyParams::default(), eps_eval: DEFAULT_EPS_EVAL }
    }
}

/// One evaluated image: ground truth, the frame (for Canny), optional
/// foreground mask.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub image: &'a RgbImage,
    pub gt: &'a FlowField,
    pub fg: Option<&'a Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub mask: MaskKind,
    pub epe: Option<f64>,
    pub ds: Option<f64>,
    pub os: Option<f64>,
    /// Images with at least one evaluated pixel (EPE / DS-OS).
    pub epe_images: usize,
    pub direction_images: usize,
    pub pixels: usize,
    pub moving_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub mask: MaskKind,
    pub epe: Option<f64>,
    pub ds: Option<f64>,
    pub os: Option<f64>,
    pub pixels: usize,
    pub moving_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub eps_eval: f64,
    pub masks: Vec<MaskScores>,
    pub per_image: Vec<ImageRow>,
    pub failures: Vec<Failure>,
}

impl MetricsReport {
    pub fn scores(&self, mask: MaskKind) -> Option<&MaskScores> {
        self.masks.iter().find(|m| m.mask == mask)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for v in values {
        sum += v;
        n += 1;
    }
    ((n > 0).then(|| sum / n as f64), n)
}

/// Scores precomputed predictions against the items. Failed predictions are
/// listed and left out of every mean. Each mask's aggregate is the mean of
/// per-image values over images with at least one evaluated pixel.
pub fn evaluate(
    predictor: &str,
    items: &[EvalItem],
    predictions: &[Result<FlowField, String>],
    cfg: &EvalConfig,
) -> Result<MetricsReport, MetricsError> {
    if items.len() != predictions.len() {
        return Err(MetricsError::Count { items: items.len(), predictions: predictions.len() });
    }
    cfg.canny.validate()?;
    if cfg.masks.contains(&MaskKind::Fg) && items.iter().any(|it| it.fg.is_none()) {
        return Err(MetricsError::MissingForeground(MaskKind::Fg));
    }
    let mut per_image = Vec::new();
    let mut failures = Vec::new();
    for (item, pred) in items.iter().zip(predictions) {
        let pred = match pred {
            Ok(p) => p,
            Err(message) => {
                failures.push(Failure { id: item.id.to_string(), message: message.clone() });
                continue;
            }
        };
        for &kind in &cfg.masks {
            let canny;
            let mask = match kind {
                MaskKind::All => None,
                MaskKind::Canny => {
                    canny = canny_mask(item.image, &cfg.canny)?;
                    Some(&canny)
                }
                MaskKind::Fg => item.fg,
            };
            let sums = match pixel_sums(pred, item.gt, mask, cfg.eps_eval) {
                Ok(s) => s,
                Err(e) => {
                    failures.push(Failure { id: item.id.to_string(), message: e.to_string() });
                    break;
                }
            };
            per_image.push(ImageRow {
                id: item.id.to_string(),
                mask: kind,
                epe: sums.epe(),
                ds: sums.ds(),
                os: sums.os(),
                pixels: sums.epe_count,
                moving_pixels: sums.moving_count,
            });
        }
    }
    // Images with a failure under any mask are excluded from every mean.
    per_image.retain(|r| !failures.iter().any(|f| f.id == r.id));
    let masks = cfg
        .masks
        .iter()
        .map(|&kind| {
            let rows: Vec<&ImageRow> = per_image.iter().filter(|r| r.mask == kind).collect();
            let (epe, epe_images) = mean(rows.iter().filter_map(|r| r.epe));
            let (ds, direction_images) = mean(rows.iter().filter_map(|r| r.ds));
            let (os, _) = mean(rows.iter().filter_map(|r| r.os));
            MaskScores {
                mask: kind,
                epe,
                ds,
                os,
                epe_images,
                direction_images,
                pixels: rows.iter().map(|r| r.pixels).sum(),
                moving_pixels: rows.iter().map(|r| r.moving_pixels).sum(),
            }
        })
        .collect();
    Ok(MetricsReport { predictor: predictor.to_string(), eps_eval: cfg.eps_eval, masks, per_image, failures })
}

/// Plain-text table: one row per predictor, EPE / DS / OS per mask.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let kinds: Vec<MaskKind> = reports.first().map(|r| r.masks.iter().map(|m| m.mask).collect()).unwrap_or_default();
    let width = reports.iter().map(|r| r.predictor.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "predictor");
    for k in &kinds {
        let _ = write!(out, " | {:^26}", k.name());
    }
    out.push('\n');
    let _ = write!(out, "{:width$}", "");
    for _ in &kinds {
        let _ = write!(out, " | {:>8} {:>8} {:>8}", "EPE", "DS", "OS");
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    for r in reports {
        let _ = write!(out, "{:width$}", r.predictor);
        for k in &kinds {
            let s = r.scores(*k);
            let _ = write!(
                out,
                " | {:>8} {:>8} {:>8}",
                cell(s.and_then(|s| s.epe)),
                cell(s.and_then(|s| s.ds)),
                cell(s.and_then(|s| s.os))
            );
        }
        out.push('\n');
    }
    out
}
