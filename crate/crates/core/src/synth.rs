//! Moving-shape scenes with analytic ground-truth flow.
//!
//! Every class belongs to a pair whose two members differ only in the sign of
//! the motion, so with equal scene parameters they render identical frames at
//! `t = 0`. Frames are exposed over `[t - 0.5, t + 0.5]`, which keeps that
//! symmetry while making speed visible as blur.
//!
//! In generated datasets the second class of a pair is laid out as the exact
//! cyclic half-frame shift of the first (shape, static anchor and periodic
//! background all move together), so the only per-class cue in a still frame
//! is absolute position.

use crate::flow::{average_flows, FlowField, Mask};
use crate::flow_io::{self, FlowIoError};
use im2flow_nn::Tensor;
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Number of future frames (and one-step flows averaged into the target).
pub const HORIZON: usize = 5;
/// Supersampling grid per pixel side.
const SUPERSAMPLE: usize = 4;
/// Shutter sub-samples per frame.
const SHUTTER: usize = 8;
/// Position grid; keeps half-frame shifts exact in floating point.
const POSITION_GRID: f64 = 64.0;
const ANCHOR_ARM: f64 = 4.0;
const ANCHOR_HALF_WIDTH: f64 = 1.0;
const ANCHOR_GRAY: f64 = 0.15;
const MIN_IMAGE_SIZE: usize = 32;
const MAX_LAYOUT_ATTEMPTS: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scene: {reason}: {spec}")]
    Infeasible { reason: String, spec: Box<SceneSpec> },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Flow(#[from] FlowIoError),
    #[error("manifest error in {path} line {line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionClass {
    TranslateRight,
    TranslateLeft,
    Rise,
    Fall,
    RotateCw,
    RotateCcw,
    Expand,
    Contract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    /// Translation along axis 0 (x) or 1 (y).
    Translate(usize),
    Rotate,
    Scale,
}

impl ActionClass {
    /// All classes in label order. Labels `2k` and `2k + 1` form a pair.
    pub const ALL: [ActionClass; 8] = [
        ActionClass::TranslateRight,
        ActionClass::TranslateLeft,
        ActionClass::Rise,
        ActionClass::Fall,
        ActionClass::RotateCw,
        ActionClass::RotateCcw,
        ActionClass::Expand,
        ActionClass::Contract,
    ];

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("listed")
    }

    pub fn from_label(label: usize) -> Option<Self> {
        Self::ALL.get(label).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TranslateRight => "translate-right",
            Self::TranslateLeft => "translate-left",
            Self::Rise => "rise",
            Self::Fall => "fall",
            Self::RotateCw => "rotate-cw",
            Self::RotateCcw => "rotate-ccw",
            Self::Expand => "expand",
            Self::Contract => "contract",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub fn pair_index(self) -> usize {
        self.label() / 2
    }

    /// The appearance-identical partner class.
    pub fn partner(self) -> Self {
        Self::ALL[self.label() ^ 1]
    }

    pub fn motion(self) -> MotionKind {
        match self {
            Self::TranslateRight | Self::TranslateLeft => MotionKind::Translate(0),
            Self::Rise | Self::Fall => MotionKind::Translate(1),
            Self::RotateCw | Self::RotateCcw => MotionKind::Rotate,
            Self::Expand | Self::Contract => MotionKind::Scale,
        }
    }

    /// Sign of the motion: +1 for rightward, downward, clockwise, expanding.
    pub fn direction(self) -> f64 {
        match self {
            Self::TranslateRight | Self::Fall | Self::RotateCw | Self::Expand => 1.0,
            Self::TranslateLeft | Self::Rise | Self::RotateCcw | Self::Contract => -1.0,
        }
    }

    /// Class of the horizontally mirrored scene.
    pub fn mirrored(self) -> Self {
        match self {
            Self::TranslateRight => Self::TranslateLeft,
            Self::TranslateLeft => Self::TranslateRight,
            Self::RotateCw => Self::RotateCcw,
            Self::RotateCcw => Self::RotateCw,
            other => other,
        }
    }

    /// Axis along which a pair's layouts differ, and which half this class uses.
    fn layout(self) -> (usize, usize) {
        match self {
            Self::TranslateRight => (0, 0),
            Self::TranslateLeft => (0, 1),
            Self::Rise => (1, 1),
            Self::Fall => (1, 0),
            Self::RotateCw => (0, 0),
            Self::RotateCcw => (0, 1),
            Self::Expand => (1, 0),
            Self::Contract => (1, 1),
        }
    }

    fn shape(self) -> ShapeKind {
        match self.motion() {
            MotionKind::Translate(0) => ShapeKind::Disc,
            MotionKind::Translate(_) => ShapeKind::Square,
            MotionKind::Rotate => ShapeKind::Triangle,
            MotionKind::Scale => ShapeKind::Disc,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self.pair_index() {
            0 => [0.95, 0.2, 0.15],
            1 => [0.2, 0.9, 0.25],
            2 => [0.2, 0.35, 0.95],
            _ => [0.95, 0.85, 0.15],
        }
    }

    fn magnitude_range(self) -> (f64, f64) {
        match self.motion() {
            MotionKind::Translate(_) => (0.5, 4.0),
            MotionKind::Rotate => (0.05, 0.3),
            MotionKind::Scale => (0.05, 0.15),
        }
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One moving shape over a textured background.
///
/// `size` is the disc radius, the square half-side or the triangle
/// circumradius. `magnitude` is px/frame, rad/frame or relative scale/frame
/// depending on the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub class: ActionClass,
    pub shape: ShapeKind,
    pub size: f64,
    pub center: [f64; 2],
    pub orientation: f64,
    pub magnitude: f64,
    pub fill: [f64; 3],
    pub background_seed: u64,
    pub background_offset: [u32; 2],
    pub anchor: Option<[f64; 2]>,
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:?} size {:.3} at ({:.3}, {:.3}) magnitude {:.4} in {}x{}",
            self.class,
            self.shape,
            self.size,
            self.center[0],
            self.center[1],
            self.magnitude,
            self.image_size,
            self.image_size
        )
    }
}

/// Shape pose at a signed time.
struct Pose {
    offset: [f64; 2],
    angle: f64,
    scale: f64,
}

impl SceneSpec {
    fn infeasible(&self, reason: impl Into<String>) -> SynthError {
        SynthError::Infeasible { reason: reason.into(), spec: Box::new(self.clone()) }
    }

    /// Checks the spec: the shape lies fully inside the frame at `t = 0` and at
    /// least half of it stays inside through the horizon.
    pub fn validate(&self) -> Result<(), SynthError> {
        let s = self.image_size as f64;
        if self.image_size < MIN_IMAGE_SIZE || self.image_size % 16 != 0 {
            return Err(self.infeasible("image size must be a multiple of 16 and at least 32"));
        }
        let finite = self.size.is_finite()
            && self.magnitude.is_finite()
            && self.orientation.is_finite()
            && self.center.iter().all(|c| c.is_finite());
        if !finite || self.size <= 0.0 || self.magnitude < 0.0 {
            return Err(self.infeasible("size must be positive and magnitude non-negative"));
        }
        if self.fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(self.infeasible("fill components must lie in [0, 1]"));
        }
        let e = half_extent(self.shape, self.size, self.orientation);
        for a in 0..2 {
            if self.center[a] - e[a] < 0.0 || self.center[a] + e[a] > s {
                return Err(self.infeasible("shape not fully inside the frame at t = 0"));
            }
        }
        for t in 1..=HORIZON {
            let frac = self.fraction_in_frame(t as f64);
            if frac < 0.5 {
                return Err(self.infeasible(format!("only {:.0}% of the shape in frame at t = {t}", frac * 100.0)));
            }
        }
        Ok(())
    }

    fn pose(&self, t: f64) -> Pose {
        let s = self.class.direction() * t;
        let mut pose = Pose { offset: [0.0; 2], angle: self.orientation, scale: 1.0 };
        match self.class.motion() {
            MotionKind::Translate(axis) => pose.offset[axis] = self.magnitude * s,
            MotionKind::Rotate => pose.angle = self.orientation + self.magnitude * s,
            MotionKind::Scale => pose.scale = (1.0 + self.magnitude).powf(s),
        }
        pose
    }

    /// Whether the point `rel` (relative to the initial center) is inside the
    /// shape at the given pose.
    fn contains(&self, rel: [f64; 2], pose: &Pose) -> bool {
        let (dx, dy) = ((rel[0] - pose.offset[0]) / pose.scale, (rel[1] - pose.offset[1]) / pose.scale);
        let (sn, cs) = pose.angle.sin_cos();
        let (qx, qy) = (cs * dx + sn * dy, -sn * dx + cs * dy);
        shape_contains(self.shape, self.size, qx, qy)
    }

    fn fraction_in_frame(&self, t: f64) -> f64 {
        let pose = self.pose(t);
        let n = 48;
        let r = self.size * 1.5;
        let (mut inside, mut total) = (0usize, 0usize);
        let (sn, cs) = pose.angle.sin_cos();
        let s = self.image_size as f64;
        for j in 0..n {
            for i in 0..n {
                let qx = -r + 2.0 * r * (i as f64 + 0.5) / n as f64;
                let qy = -r + 2.0 * r * (j as f64 + 0.5) / n as f64;
                if !shape_contains(self.shape, self.size, qx, qy) {
                    continue;
                }
                total += 1;
                let x = self.center[0] + pose.offset[0] + pose.scale * (cs * qx - sn * qy);
                let y = self.center[1] + pose.offset[1] + pose.scale * (sn * qx + cs * qy);
                if (0.0..s).contains(&x) && (0.0..s).contains(&y) {
                    inside += 1;
                }
            }
        }
        inside as f64 / total.max(1) as f64
    }

    /// Axis-aligned pixel box (exclusive end) that can be touched by the shape
    /// over the exposure of the frame at `t`.
    fn footprint(&self, t: f64) -> [[usize; 2]; 2] {
        let radius = match self.shape {
            ShapeKind::Disc | ShapeKind::Triangle => self.size,
            ShapeKind::Square => self.size * 2f64.sqrt(),
        };
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for tau in [t - 0.5, t + 0.5] {
            let p = self.pose(tau);
            for a in 0..2 {
                let c = self.center[a] + p.offset[a];
                lo[a] = lo[a].min(c - radius * p.scale);
                hi[a] = hi[a].max(c + radius * p.scale);
            }
        }
        let s = self.image_size as f64;
        let clamp = |v: f64| v.clamp(0.0, s) as usize;
        [[clamp(lo[0].floor() - 1.0), clamp(hi[0].ceil() + 1.0)], [clamp(lo[1].floor() - 1.0), clamp(hi[1].ceil() + 1.0)]]
    }

    /// The horizontally mirrored scene (flow and mask only; the background
    /// texture is not mirrored).
    pub fn mirrored(&self) -> Self {
        let s = self.image_size as f64;
        let mut m = self.clone();
        m.class = self.class.mirrored();
        m.center[0] = s - self.center[0];
        m.orientation = PI - self.orientation;
        m.anchor = self.anchor.map(|a| [s - a[0], a[1]]);
        m
    }
}

fn shape_contains(shape: ShapeKind, size: f64, qx: f64, qy: f64) -> bool {
    match shape {
        ShapeKind::Disc => qx * qx + qy * qy <= size * size,
        ShapeKind::Square => qx.abs() <= size && qy.abs() <= size,
        ShapeKind::Triangle => {
            // Equilateral, first vertex on the local +x axis; the inradius is
            // half the circumradius.
            let inr = 0.5 * size;
            [PI, PI / 3.0, 5.0 * PI / 3.0].iter().all(|a| qx * a.cos() + qy * a.sin() <= inr)
        }
    }
}

fn half_extent(shape: ShapeKind, size: f64, angle: f64) -> [f64; 2] {
    match shape {
        ShapeKind::Disc => [size, size],
        ShapeKind::Square => {
            let k = angle.cos().abs() + angle.sin().abs();
            [size * k, size * k]
        }
        ShapeKind::Triangle => {
            let mut e = [0.0f64; 2];
            for k in 0..3 {
                let a = angle + TAU * k as f64 / 3.0;
                e[0] = e[0].max((size * a.cos()).abs());
                e[1] = e[1].max((size * a.sin()).abs());
            }
            e
        }
    }
}

/// Periodic two-octave value noise around mid gray.
fn background(size: usize, seed: u64, offset: [u32; 2]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut octave = |spacing: usize| {
        let n = size / spacing;
        let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (spacing, n, lattice)
    };
    let octaves = [(octave(8), 0.035), (octave(16), 0.015)];
    let mut out = vec![0.45; size * size];
    for y in 0..size {
        for x in 0..size {
            let sx = (x + size - offset[0] as usize % size) % size;
            let sy = (y + size - offset[1] as usize % size) % size;
            for ((spacing, n, lattice), amp) in &octaves {
                let (cx, fx) = (sx / spacing, (sx % spacing) as f64 / *spacing as f64);
                let (cy, fy) = (sy / spacing, (sy % spacing) as f64 / *spacing as f64);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (wx, wy) = (smooth(fx), smooth(fy));
                let at = |i: usize, j: usize| lattice[(j % n) * n + (i % n)];
                let top = at(cx, cy) * (1.0 - wx) + at(cx + 1, cy) * wx;
                let bottom = at(cx, cy + 1) * (1.0 - wx) + at(cx + 1, cy + 1) * wx;
                out[y * size + x] += amp * (top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sub-pixel sample offsets inside a unit pixel; dyadic so they are exact.
fn subsample_offsets() -> [f64; SUPERSAMPLE] {
    let mut o = [0.0; SUPERSAMPLE];
    for (k, v) in o.iter_mut().enumerate() {
        *v = (k as f64 + 0.5) / SUPERSAMPLE as f64;
    }
    o
}

fn anchor_coverage(anchor: [f64; 2], x: usize, y: usize) -> f64 {
    let offs = subsample_offsets();
    let mut hits = 0usize;
    for oy in offs {
        for ox in offs {
            let dx = (x as f64 + ox - anchor[0]).abs();
            let dy = (y as f64 + oy - anchor[1]).abs();
            let arm_x = dx <= ANCHOR_ARM && dy <= ANCHOR_HALF_WIDTH;
            let arm_y = dy <= ANCHOR_ARM && dx <= ANCHOR_HALF_WIDTH;
            if arm_x || arm_y {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Background plus static anchor, as linear RGB in `[0, 1]`.
fn render_static_linear(spec: &SceneSpec) -> Vec<[f64; 3]> {
    let s = spec.image_size;
    let bg = background(s, spec.background_seed, spec.background_offset);
    let mut out: Vec<[f64; 3]> = bg.iter().map(|g| [*g; 3]).collect();
    if let Some(anchor) = spec.anchor {
        let lo = |c: f64| ((c - ANCHOR_ARM - 1.0).floor().max(0.0) as usize).min(s);
        let hi = |c: f64| ((c + ANCHOR_ARM + 1.0).ceil().max(0.0) as usize).min(s);
        for y in lo(anchor[1])..hi(anchor[1]) {
            for x in lo(anchor[0])..hi(anchor[0]) {
                let cov = anchor_coverage(anchor, x, y);
                let px = &mut out[y * s + x];
                for c in px.iter_mut() {
                    *c += (ANCHOR_GRAY - *c) * cov;
                }
            }
        }
    }
    out
}

fn quantize_frame(size: usize, pixels: &[[f64; 3]]) -> RgbImage {
    let mut img = RgbImage::new(size as u32, size as u32);
    for (px, c) in img.pixels_mut().zip(pixels) {
        *px = Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
    }
    img
}

/// The scene without its moving shape.
pub fn render_static(spec: &SceneSpec) -> RgbImage {
    quantize_frame(spec.image_size, &render_static_linear(spec))
}

/// Renders the frame at time `t` with a symmetric shutter over
/// `[t - 0.5, t + 0.5]` and 4x4 supersampling.
pub fn render_frame(spec: &SceneSpec, t: f64) -> RgbImage {
    let s = spec.image_size;
    let mut pixels = render_static_linear(spec);
    let poses: Vec<Pose> =
        (0..SHUTTER).map(|k| spec.pose(t + (k as f64 + 0.5) / SHUTTER as f64 - 0.5)).collect();
    let offs = subsample_offsets();
    let [[x0, x1], [y0, y1]] = spec.footprint(t);
    let samples = (SHUTTER * SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            // Integer hit counts make the exposure exactly symmetric in time.
            let mut hits = 0usize;
            for oy in offs {
                for ox in offs {
                    let rel = [x as f64 + ox - spec.center[0], y as f64 + oy - spec.center[1]];
                    hits += poses.iter().filter(|p| spec.contains(rel, p)).count();
                }
            }
            if hits > 0 {
                let cov = hits as f64 / samples;
                let px = &mut pixels[y * s + x];
                for (c, f) in px.iter_mut().zip(spec.fill) {
                    *c += (f - *c) * cov;
                }
            }
        }
    }
    quantize_frame(s, &pixels)
}

/// Pixels whose centers lie inside the shape at integer time `t`.
pub fn shape_mask(spec: &SceneSpec, t: usize) -> Mask {
    let s = spec.image_size;
    let pose = spec.pose(t as f64);
    let mut data = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            let rel = [x as f64 + 0.5 - spec.center[0], y as f64 + 0.5 - spec.center[1]];
            data[y * s + x] = spec.contains(rel, &pose);
        }
    }
    Mask::new(s, s, data)
}

/// One-step flow from `t` to `t + 1` at pixel centers inside the shape at `t`;
/// zero on the background.
pub fn analytic_flow(spec: &SceneSpec, t: usize) -> FlowField {
    let s = spec.image_size;
    let mask = shape_mask(spec, t);
    let dir = spec.class.direction();
    let mut u = vec![0.0f32; s * s];
    let mut v = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            if !mask.data()[i] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5 - spec.center[0], y as f64 + 0.5 - spec.center[1]);
            let (du, dv) = match spec.class.motion() {
                MotionKind::Translate(0) => (dir * spec.magnitude, 0.0),
                MotionKind::Translate(_) => (0.0, dir * spec.magnitude),
                MotionKind::Rotate => {
                    let (sn, cs) = (dir * spec.magnitude).sin_cos();
                    (cs * px - sn * py - px, sn * px + cs * py - py)
                }
                MotionKind::Scale => {
                    let k = (1.0 + spec.magnitude).powf(dir) - 1.0;
                    (k * px, k * py)
                }
            };
            u[i] = du as f32;
            v[i] = dv as f32;
        }
    }
    FlowField::new(s, s, u, v).expect("analytic flow is finite")
}

/// Average of the one-step flows over the horizon.
pub fn target_flow(spec: &SceneSpec) -> FlowField {
    let steps: Vec<FlowField> = (0..HORIZON).map(|k| analytic_flow(spec, k)).collect();
    average_flows(&steps).expect("same dimensions")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub spec: SceneSpec,
    pub frame: RgbImage,
    /// Frames `t + 1 ..= t + HORIZON`; empty unless requested.
    pub future: Vec<RgbImage>,
    /// Five-step average flow, the training target.
    pub target: FlowField,
    /// Shape mask at `t = 0`.
    pub mask: Mask,
}

impl SyntheticSample {
    pub fn label(&self) -> usize {
        self.spec.class.label()
    }

    /// One-step analytic flows `t + k -> t + k + 1` for `k < HORIZON`.
    pub fn step_flows(&self) -> Vec<FlowField> {
        (0..HORIZON).map(|k| analytic_flow(&self.spec, k)).collect()
    }
}

pub fn generate_sample(spec: &SceneSpec, id: String, split: Split, index: usize, with_future: bool) -> SyntheticSample {
    let future = if with_future { (1..=HORIZON).map(|k| render_frame(spec, k as f64)).collect() } else { Vec::new() };
    SyntheticSample {
        id,
        split,
        index,
        frame: render_frame(spec, 0.0),
        future,
        target: target_flow(spec),
        mask: shape_mask(spec, 0),
        spec: spec.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub classes: Vec<ActionClass>,
    /// Also render the future frames of every sample (memory heavy).
    pub render_future: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 2000, n_val: 250, n_test: 250, image_size: 64, classes: ActionClass::ALL.to_vec(), render_future: false }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(SynthError::Config("every split needs at least one sample".into()));
        }
        if self.image_size < MIN_IMAGE_SIZE || self.image_size % 16 != 0 {
            return Err(SynthError::Config(format!(
                "image_size must be a multiple of 16 and at least {MIN_IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        if self.classes.is_empty() {
            return Err(SynthError::Config("class list is empty".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(SynthError::Config("class list has duplicates".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetConfig,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SyntheticSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Deterministic per-sample stream, independent of generation order.
pub fn sample_rng(seed: u64, stream: &str, index: usize) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(stream.as_bytes())
        .chain_update((index as u64).to_le_bytes())
        .finalize();
    ChaCha8Rng::from_seed(digest.into())
}

fn grid_draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Option<f64> {
    let (a, b) = ((lo * POSITION_GRID).ceil() as i64, (hi * POSITION_GRID).floor() as i64);
    (a <= b).then(|| rng.gen_range(a..=b) as f64 / POSITION_GRID)
}

/// Draws a feasible scene of the given class. The two classes of a pair consume
/// the random stream identically, so equal streams give shifted twins.
pub fn sample_scene(class: ActionClass, image_size: usize, rng: &mut ChaCha8Rng) -> Result<SceneSpec, SynthError> {
    let s = image_size as f64;
    let half = s / 2.0;
    let (axis, side) = class.layout();
    let shape = class.shape();
    let (mag_lo, mag_hi) = class.magnitude_range();
    let mut last = None;
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let size = match shape {
            ShapeKind::Triangle => rng.gen_range(7.0..=10.0),
            _ => rng.gen_range(5.0..=8.0),
        };
        let orientation = if shape == ShapeKind::Triangle { rng.gen_range(0.0..TAU) } else { 0.0 };
        let magnitude = rng.gen_range(mag_lo..=mag_hi);
        let intensity = rng.gen_range(0.75..=1.0);
        let background_seed: u64 = rng.gen();
        let offset = [rng.gen_range(0..image_size as u32), rng.gen_range(0..image_size as u32)];
        // Shape extent plus exposure smear; the blurred shape must stay in
        // its half so that the half-frame shift is exact.
        let mut e = half_extent(shape, size, orientation);
        match class.motion() {
            MotionKind::Translate(a) => e[a] += 0.5 * magnitude,
            MotionKind::Scale => {
                let grow = size * ((1.0 + magnitude).sqrt() - 1.0);
                e = [e[0] + grow, e[1] + grow];
            }
            MotionKind::Rotate => {}
        }
        let margin = ANCHOR_ARM + ANCHOR_HALF_WIDTH + 1.0;
        let along = grid_draw(rng, (e[axis] + 1.0).max(margin), half - (e[axis] + 1.0).max(margin));
        let across = grid_draw(rng, (e[1 - axis] + 1.0).max(margin), s - (e[1 - axis] + 1.0).max(margin));
        let (Some(along), Some(across)) = (along, across) else {
            return Err(SynthError::Config(format!("{class} shapes do not fit a {image_size}px frame")));
        };
        let mut center = [0.0; 2];
        center[axis] = along;
        center[1 - axis] = across;
        let mut anchor = center;
        anchor[axis] = along + half;
        let mut background_offset = offset;
        if side == 1 {
            center[axis] += half;
            anchor[axis] -= half;
            background_offset[axis] = (offset[axis] + image_size as u32 / 2) % image_size as u32;
        }
        let base = class.base_color();
        let spec = SceneSpec {
            image_size,
            class,
            shape,
            size,
            center,
            orientation,
            magnitude,
            fill: base.map(|c| c * intensity),
            background_seed,
            background_offset,
            anchor: Some(anchor),
        };
        match spec.validate() {
            Ok(()) => return Ok(spec),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn generate_split(seed: u64, config: &DatasetConfig, split: Split) -> Result<Vec<SyntheticSample>, SynthError> {
    config.validate()?;
    let k = config.classes.len();
    (0..config.count(split))
        .map(|i| {
            let class = config.classes[i % k];
            let mut rng = sample_rng(seed, split.name(), i);
            let spec = sample_scene(class, config.image_size, &mut rng)?;
            Ok(generate_sample(&spec, format!("{}/{i:06}", split.name()), split, i, config.render_future))
        })
        .collect()
}

pub fn generate_dataset(seed: u64, config: &DatasetConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    Ok(Dataset {
        seed,
        config: config.clone(),
        train: generate_split(seed, config, Split::Train)?,
        val: generate_split(seed, config, Split::Val)?,
        test: generate_split(seed, config, Split::Test)?,
    })
}

/// Pairs of scenes identical except for the motion magnitude (`slow`, `fast`),
/// drawn from the translation classes.
pub fn motion_scale_pairs(
    seed: u64,
    n_pairs: usize,
    image_size: usize,
    slow: f64,
    fast: f64,
) -> Result<Vec<(SyntheticSample, SyntheticSample)>, SynthError> {
    let classes = [ActionClass::TranslateRight, ActionClass::TranslateLeft, ActionClass::Rise, ActionClass::Fall];
    (0..n_pairs)
        .map(|i| {
            let mut rng = sample_rng(seed, "motion-pairs", i);
            let base = sample_scene(classes[i % classes.len()], image_size, &mut rng)?;
            let make = |m: f64, tag: &str| -> Result<SyntheticSample, SynthError> {
                let spec = SceneSpec { magnitude: m, ..base.clone() };
                spec.validate()?;
                Ok(generate_sample(&spec, format!("pairs/{i:04}-{tag}"), Split::Test, i, false))
            };
            Ok((make(slow, "slow")?, make(fast, "fast")?))
        })
        .collect()
}

/// Background-only frames: the zero-motion control set.
pub fn blank_frames(seed: u64, n: usize, image_size: usize) -> Vec<RgbImage> {
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, "blank", i);
            let spec = SceneSpec {
                image_size,
                class: ActionClass::TranslateRight,
                shape: ShapeKind::Disc,
                size: 1.0,
                center: [0.0; 2],
                orientation: 0.0,
                magnitude: 0.0,
                fill: [0.0; 3],
                background_seed: rng.gen(),
                background_offset: [rng.gen_range(0..image_size as u32), rng.gen_range(0..image_size as u32)],
                anchor: None,
            };
            render_static(&spec)
        })
        .collect()
}

/// Stacks frames into an `[n, 3, h, w]` tensor with values in `[0, 1]`.
pub fn frames_to_tensor(frames: &[&RgbImage]) -> Tensor<f32> {
    assert!(!frames.is_empty(), "no frames");
    let (w, h) = (frames[0].width() as usize, frames[0].height() as usize);
    let mut data = Vec::with_capacity(frames.len() * 3 * w * h);
    for f in frames {
        assert_eq!((f.width() as usize, f.height() as usize), (w, h), "frame sizes differ");
        for c in 0..3 {
            data.extend(f.pixels().map(|p| p[c] as f32 / 255.0));
        }
    }
    Tensor::from_vec([frames.len(), 3, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub index: usize,
    pub class: ActionClass,
    pub label: usize,
    pub image: String,
    pub flow: String,
    pub mask: String,
    pub spec: SceneSpec,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    config: DatasetConfig,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const META: &str = "dataset.json";
pub const CHECKSUMS: &str = "SHA256SUMS";

fn mask_image(mask: &Mask) -> GrayImage {
    let mut img = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (px, m) in img.pixels_mut().zip(mask.data()) {
        *px = Luma([if *m { 255 } else { 0 }]);
    }
    img
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<(), SynthError>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| SynthError::Image { path: path.to_path_buf(), source })
}

/// Writes the dataset as `<split>/<index>.png|.flo|_mask.png`, a JSON-lines
/// manifest, the generating config and a checksum file.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = DatasetMeta { seed: ds.seed, config: ds.config.clone() };
    let meta_path = dir.join(META);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable")).map_err(io_err(&meta_path))?;
    let mut manifest = String::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for s in ds.split(split) {
            let stem = format!("{}/{:06}", split.name(), s.index);
            let rec = ManifestRecord {
                id: s.id.clone(),
                split,
                index: s.index,
                class: s.spec.class,
                label: s.label(),
                image: format!("{stem}.png"),
                flow: format!("{stem}.flo"),
                mask: format!("{stem}_mask.png"),
                spec: s.spec.clone(),
            };
            save_png(&s.frame, &dir.join(&rec.image))?;
            flow_io::write_flo(&s.target, &dir.join(&rec.flow))?;
            save_png(&mask_image(&s.mask), &dir.join(&rec.mask))?;
            for (k, f) in s.future.iter().enumerate() {
                save_png(f, &dir.join(format!("{stem}_t{}.png", k + 1)))?;
            }
            manifest.push_str(&serde_json::to_string(&rec).expect("serializable"));
            manifest.push('\n');
        }
    }
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    write_checksums(dir)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), SynthError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn file_digests(dir: &Path) -> Result<Vec<(String, String)>, SynthError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut rows = Vec::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        if name == CHECKSUMS {
            continue;
        }
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        rows.push((name, hex::encode(Sha256::digest(&bytes))));
    }
    rows.sort();
    Ok(rows)
}

fn write_checksums(dir: &Path) -> Result<(), SynthError> {
    let mut f = String::new();
    for (name, digest) in file_digests(dir)? {
        f.push_str(&format!("{digest}  {name}\n"));
    }
    let path = dir.join(CHECKSUMS);
    fs::write(&path, f).map_err(io_err(&path))
}

/// Digest over every file in the tree (names and contents), excluding the
/// checksum file itself.
pub fn dataset_checksum(dir: &Path) -> Result<String, SynthError> {
    let mut h = Sha256::new();
    for (name, digest) in file_digests(dir)? {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| SynthError::Manifest { path: path.clone(), line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

fn load_rgb(path: &Path) -> Result<RgbImage, SynthError> {
    Ok(image::open(path).map_err(|source| SynthError::Image { path: path.to_path_buf(), source })?.to_rgb8())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| SynthError::Manifest { path: meta_path.clone(), line: 1, message: e.to_string() })?;
    let mut ds = Dataset { seed: meta.seed, config: meta.config, train: vec![], val: vec![], test: vec![] };
    for rec in read_manifest(dir)? {
        let frame = load_rgb(&dir.join(&rec.image))?;
        let target = flow_io::read_flo(&dir.join(&rec.flow))?;
        let mpath = dir.join(&rec.mask);
        let mimg = image::open(&mpath).map_err(|source| SynthError::Image { path: mpath.clone(), source })?.to_luma8();
        let mask = Mask::new(
            mimg.width() as usize,
            mimg.height() as usize,
            mimg.pixels().map(|p| p[0] > 127).collect(),
        );
        let stem = rec.image.trim_end_matches(".png");
        let future = (1..=HORIZON)
            .map(|k| dir.join(format!("{stem}_t{k}.png")))
            .take_while(|p| p.exists())
            .map(|p| load_rgb(&p))
            .collect::<Result<Vec<_>, _>>()?;
        let sample =
            SyntheticSample { id: rec.id, split: rec.split, index: rec.index, spec: rec.spec, frame, future, target, mask };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    Ok(ds)
}

/// Writes a manifest-style JSON-lines file.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SynthError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("serializable")).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(class: ActionClass, magnitude: f64) -> SceneSpec {
        SceneSpec {
            image_size: 64,
            class,
            shape: ShapeKind::Disc,
            size: 6.0,
            center: [32.0, 32.0],
            orientation: 0.3,
            magnitude,
            fill: [0.9, 0.2, 0.2],
            background_seed: 11,
            background_offset: [3, 5],
            anchor: Some([10.0, 32.0]),
        }
    }

    #[test]
    fn class_table() {
        for (i, c) in ActionClass::ALL.iter().enumerate() {
            assert_eq!(c.label(), i);
            assert_eq!(ActionClass::from_name(c.name()), Some(*c));
            assert_eq!(c.partner().partner(), *c);
            assert_eq!(c.partner().pair_index(), c.pair_index());
            assert_eq!(c.partner().direction(), -c.direction());
            assert_eq!(c.partner().motion(), c.motion());
        }
    }

    #[test]
    fn translate_right_flow_is_constant_on_shape() {
        let s = spec(ActionClass::TranslateRight, 2.0);
        let f = analytic_flow(&s, 0);
        let m = shape_mask(&s, 0);
        assert!(m.count() > 0);
        for i in 0..f.len() {
            let expect = if m.data()[i] { (2.0, 0.0) } else { (0.0, 0.0) };
            assert_eq!((f.u()[i], f.v()[i]), expect);
        }
    }

    #[test]
    fn rotation_fixes_the_centroid_and_turns_clockwise() {
        let mut s = spec(ActionClass::RotateCw, 0.2);
        s.shape = ShapeKind::Triangle;
        s.size = 9.0;
        s.center = [31.5, 31.5];
        let f = analytic_flow(&s, 0);
        assert_eq!(f.at(31, 31), (0.0, 0.0));
        // A point right of the center moves down in a clockwise turn.
        let (u, v) = f.at(34, 31);
        assert!(v > 0.0 && u.abs() < v, "({u}, {v})");
        let ccw = analytic_flow(&SceneSpec { class: ActionClass::RotateCcw, ..s }, 0);
        assert!(ccw.at(34, 31).1 < 0.0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = spec(ActionClass::Expand, 0.1);
        assert_eq!(render_frame(&s, 0.0), render_frame(&s, 0.0));
    }

    #[test]
    fn pair_partners_render_identically_at_t0() {
        for c in ActionClass::ALL.iter().step_by(2) {
            let mut a = spec(*c, match c.motion() {
                MotionKind::Translate(_) => 3.3,
                MotionKind::Rotate => 0.27,
                MotionKind::Scale => 0.13,
            });
            if c.motion() == MotionKind::Rotate {
                a.shape = ShapeKind::Triangle;
            }
            let b = SceneSpec { class: c.partner(), ..a.clone() };
            assert_eq!(render_frame(&a, 0.0), render_frame(&b, 0.0), "{c}");
            assert_ne!(render_frame(&a, 1.0), render_frame(&b, 1.0), "{c}");
        }
    }

    #[test]
    fn blur_reveals_speed() {
        let slow = spec(ActionClass::TranslateRight, 0.5);
        let fast = spec(ActionClass::TranslateRight, 4.0);
        assert_ne!(render_frame(&slow, 0.0), render_frame(&fast, 0.0));
    }

    fn weighted_centroid(img: &RgbImage, bg: &RgbImage) -> [f64; 2] {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            let q = bg.get_pixel(x, y);
            let w: f64 = (0..3).map(|c| (p[c] as f64 - q[c] as f64).abs()).sum();
            sx += w * (x as f64 + 0.5);
            sy += w * (y as f64 + 0.5);
            sw += w;
        }
        [sx / sw, sy / sw]
    }

    #[test]
    fn centroid_moves_by_the_analytic_translation() {
        for (class, speed) in [(ActionClass::TranslateRight, 1.7), (ActionClass::Fall, 2.9), (ActionClass::Rise, 0.6)] {
            let mut s = spec(class, speed);
            s.center = [24.0, 20.0];
            s.anchor = None;
            let bg = render_static(&s);
            let c0 = weighted_centroid(&render_frame(&s, 0.0), &bg);
            let c1 = weighted_centroid(&render_frame(&s, 1.0), &bg);
            let f = analytic_flow(&s, 0);
            let m = shape_mask(&s, 0);
            let i = m.data().iter().position(|b| *b).unwrap();
            let (u, v) = (f.u()[i] as f64, f.v()[i] as f64);
            assert!((c1[0] - c0[0] - u).abs() < 0.2, "{class}: dx {} vs {u}", c1[0] - c0[0]);
            assert!((c1[1] - c0[1] - v).abs() < 0.2, "{class}: dy {} vs {v}", c1[1] - c0[1]);
        }
    }

    /// Foreground layer of a frame: per-channel difference from the static
    /// scene, so block matching sees the shape and nothing else.
    fn layer(img: &RgbImage, bg: &RgbImage) -> Vec<[f64; 3]> {
        img.pixels().zip(bg.pixels()).map(|(p, q)| [0, 1, 2].map(|c| p[c] as f64 - q[c] as f64)).collect()
    }

    fn bilinear(img: &[[f64; 3]], size: usize, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |xx: f64, yy: f64| {
            if xx < 0.0 || yy < 0.0 || xx >= size as f64 || yy >= size as f64 {
                0.0
            } else {
                img[yy as usize * size + xx as usize][c]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
        let bot = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Brightness-constancy block matching of the block around the shape,
    /// integer search followed by a 0.05 px refinement grid.
    fn block_match(a: &[[f64; 3]], b: &[[f64; 3]], size: usize, block: &Mask) -> [f64; 2] {
        let pts: Vec<(usize, usize)> =
            (0..size).flat_map(|y| (0..size).map(move |x| (x, y))).filter(|(x, y)| block.get(*x, *y)).collect();
        let ssd = |dx: f64, dy: f64| -> f64 {
            pts.iter()
                .map(|(x, y)| {
                    let p = a[y * size + x];
                    (0..3).map(|c| (bilinear(b, size, *x as f64 + dx, *y as f64 + dy, c) - p[c]).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for iy in -6..=6 {
            for ix in -6..=6 {
                let e = ssd(ix as f64, iy as f64);
                if e < best.0 {
                    best = (e, ix as f64, iy as f64);
                }
            }
        }
        let (cx, cy) = (best.1, best.2);
        for iy in -20..=20 {
            for ix in -20..=20 {
                let (dx, dy) = (cx + ix as f64 * 0.05, cy + iy as f64 * 0.05);
                let e = ssd(dx, dy);
                if e < best.0 {
                    best = (e, dx, dy);
                }
            }
        }
        [best.1, best.2]
    }

    #[test]
    fn block_matching_agrees_with_analytic_flow() {
        for (class, speed) in [(ActionClass::TranslateLeft, 2.35), (ActionClass::Rise, 1.1), (ActionClass::Fall, 3.8)] {
            let s = spec(class, speed);
            let bg = render_static(&s);
            let a = layer(&render_frame(&s, 0.0), &bg);
            let b = layer(&render_frame(&s, 1.0), &bg);
            let mut block = shape_mask(&s, 0);
            for _ in 0..3 {
                block = block.dilate();
            }
            let d = block_match(&a, &b, 64, &block);
            let f = analytic_flow(&s, 0);
            let (u, v) = f.at(32, 32);
            assert!((d[0] - u as f64).abs() < 0.3 && (d[1] - v as f64).abs() < 0.3, "{class}: {d:?} vs ({u}, {v})");
        }
    }

    #[test]
    fn flow_lives_on_the_mask() {
        let mut rng = sample_rng(1, "mask", 0);
        for c in ActionClass::ALL {
            let s = sample_scene(c, 64, &mut rng).unwrap();
            for t in 0..HORIZON {
                let f = analytic_flow(&s, t);
                let m = shape_mask(&s, t).dilate();
                for i in 0..f.len() {
                    if f.u()[i] != 0.0 || f.v()[i] != 0.0 {
                        assert!(m.data()[i], "{c} t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn mirrored_scene_flow_is_flipped_flow() {
        let mut rng = sample_rng(2, "mirror", 0);
        for c in ActionClass::ALL {
            let s = sample_scene(c, 64, &mut rng).unwrap();
            let a = crate::flow::flip_horizontal(&analytic_flow(&s, 0));
            let b = analytic_flow(&s.mirrored(), 0);
            for i in 0..a.len() {
                assert!((a.u()[i] - b.u()[i]).abs() < 1e-5 && (a.v()[i] - b.v()[i]).abs() < 1e-5, "{c} at {i}");
            }
        }
    }

    #[test]
    fn pair_layouts_are_half_frame_shifts() {
        for c in ActionClass::ALL.iter().step_by(2) {
            let a = sample_scene(*c, 64, &mut sample_rng(5, "shift", c.label())).unwrap();
            let b = sample_scene(c.partner(), 64, &mut sample_rng(5, "shift", c.label())).unwrap();
            let (axis, _) = c.layout();
            let (fa, fb) = (render_frame(&a, 0.0), render_frame(&b, 0.0));
            for (x, y, p) in fa.enumerate_pixels() {
                let (mut xs, mut ys) = (x, y);
                if axis == 0 {
                    xs = (x + 32) % 64;
                } else {
                    ys = (y + 32) % 64;
                }
                assert_eq!(p, fb.get_pixel(xs, ys), "{c} at ({x}, {y})");
            }
        }
    }

    #[test]
    fn mirrored_dataset_layouts_match_partner_layouts() {
        // Flipping a translate-right or rotate-cw scene gives a scene in the
        // half used by its mirrored class.
        for c in [ActionClass::TranslateRight, ActionClass::RotateCw, ActionClass::Rise, ActionClass::Expand] {
            let s = sample_scene(c, 64, &mut sample_rng(9, "flip", 0)).unwrap();
            let m = s.mirrored();
            let (axis, side) = m.class.layout();
            let half = (m.center[axis] / 32.0).floor() as usize;
            assert_eq!(half, side, "{c}");
        }
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let mut s = spec(ActionClass::TranslateRight, 4.0);
        s.center = [60.0, 32.0];
        assert!(matches!(s.validate(), Err(SynthError::Infeasible { .. })));
        let mut s = spec(ActionClass::Expand, 0.15);
        s.size = 30.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn balanced_reproducible_splits() {
        let cfg = DatasetConfig { n_train: 80, n_val: 16, n_test: 16, ..Default::default() };
        let a = generate_split(3, &cfg, Split::Train).unwrap();
        let mut counts = [0usize; 8];
        for s in &a {
            counts[s.label()] += 1;
        }
        assert_eq!(counts, [10; 8]);
        assert_eq!(a, generate_split(3, &cfg, Split::Train).unwrap());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = DatasetConfig { n_train: 8, n_val: 8, n_test: 8, render_future: true, ..Default::default() };
        let ds = generate_dataset(4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let sum = dataset_checksum(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&generate_dataset(4, &cfg).unwrap(), dir2.path()).unwrap();
        assert_eq!(dataset_checksum(dir2.path()).unwrap(), sum);
    }

    #[test]
    fn config_errors() {
        let bad = DatasetConfig { image_size: 40, ..Default::default() };
        assert!(matches!(bad.validate(), Err(SynthError::Config(_))));
        let bad = DatasetConfig { n_val: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn blank_frames_have_no_shape() {
        let f = blank_frames(1, 2, 64);
        assert_eq!(f.len(), 2);
        assert_ne!(f[0], f[1]);
        assert!(f[0].pixels().all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
