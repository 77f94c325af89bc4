//! Segmentation losses over soft predictions: soft IoU, Dice, and the
//! scale- and location-sensitive (SLS) family, plus the multi-scale
//! composite used to train the multi-head detector.
//!
//! Every loss is written once against a [`Tape`] (the `*_on` functions) so
//! it is differentiable; the plain functions are thin value-level wrappers.
//!
//! Set cardinalities are relaxed to sums over probabilities:
//! `|A ∩ B| = Σ p·g`, `|A ∪ B| = Σp + Σg − Σp·g`, `|A| = Σp`.
//! Pixel coordinates are 1-based with `x` the column and `y` the row, so a
//! centroid always has `x, y ≥ 1` and its polar angle lies in `(0, π/2)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Mass below which a prediction is treated as empty.
pub const EMPTY_MASS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction {pred:?} and ground truth {gt:?} differ in shape")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("mask has no mass")]
    EmptyMask,
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("scale weight is undefined when both scales are zero")]
    BothScalesZero,
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("unknown {what} `{value}`")]
    UnknownKind { what: &'static str, value: String },
    #[error("expected {expected} prediction maps of matching size: {detail}")]
    ScaleMismatch { expected: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Post-sigmoid prediction, `H x W` probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Tensor);

impl SoftMask {
    pub fn new(values: Tensor) -> Result<Self> {
        check_2d(&values)?;
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::InvalidMask(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(tensor_from_rows(rows)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Binary ground truth, `H x W` labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask(Tensor);

impl GroundTruthMask {
    pub fn new(values: Tensor) -> Result<Self> {
        check_2d(&values)?;
        if let Some(v) = values.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(LossError::InvalidMask(format!("label {v} is not binary")));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(tensor_from_rows(rows)?)
    }

    /// Mask with ones at the given 1-based `(row, col)` positions.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Result<Self> {
        let mut t = Tensor::zeros(&[height, width]);
        for &(r, c) in pixels {
            if r == 0 || c == 0 || r > height || c > width {
                return Err(LossError::InvalidMask(format!("pixel ({r}, {c}) outside {height}x{width}")));
            }
            t.data_mut()[(r - 1) * width + (c - 1)] = 1.0;
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.spatial().expect("2-d mask")
    }

    pub fn pixel_count(&self) -> f64 {
        self.0.sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count() == 0.0
    }

    /// Max-pool downsampling; a window containing any target pixel is kept.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self(self.0.max_pool2d(factor)?))
    }
}

fn tensor_from_rows(rows: &[&[f64]]) -> Result<Tensor> {
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(LossError::InvalidMask("ragged rows".into()));
    }
    Ok(Tensor::new(vec![rows.len(), w], rows.concat())?)
}

fn check_2d(t: &Tensor) -> Result<()> {
    match t.shape() {
        [h, w] if *h > 0 && *w > 0 => Ok(()),
        s => Err(LossError::InvalidMask(format!("expected a non-empty H x W mask, got {s:?}"))),
    }
}

/// Probability-weighted mean pixel position, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub d: f64,
    pub theta: f64,
}

pub fn to_polar(c: Centroid) -> PolarPoint {
    PolarPoint {
        d: (c.x * c.x + c.y * c.y).sqrt(),
        theta: (c.y / c.x).atan(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub scale_term: f64,
    pub location_term: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationKind {
    /// Ratio of radial distances plus squared angle difference.
    #[default]
    Polar,
    /// Manhattan centroid distance over the image diagonal.
    L1,
    /// Euclidean centroid distance over the image diagonal.
    L2,
}

impl LocationKind {
    /// Value used when the prediction carries no mass: the supremum of the
    /// term (`2` for polar; the normalized distances are bounded by `√2`
    /// and `1`).
    pub fn empty_prediction_value(self) -> f64 {
        match self {
            LocationKind::Polar => 2.0,
            LocationKind::L1 => 2f64.sqrt(),
            LocationKind::L2 => 1.0,
        }
    }
}

impl FromStr for LocationKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "polar" => Ok(Self::Polar),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            _ => Err(LossError::UnknownKind {
                what: "location loss",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for LocationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocationKind::Polar => "polar",
            LocationKind::L1 => "l1",
            LocationKind::L2 => "l2",
        })
    }
}

/// Variance of the two scales inside the scale weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    /// `(a − b)² / 4`
    #[default]
    Population,
    /// `(a − b)² / 2`
    Sample,
}

impl VarianceKind {
    fn factor(self) -> f64 {
        match self {
            VarianceKind::Population => 0.25,
            VarianceKind::Sample => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlsOptions {
    pub location: LocationKind,
    pub variance: VarianceKind,
}

/// Per-map training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Sls,
    Iou,
    Dice,
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sls" => Ok(Self::Sls),
            "iou" => Ok(Self::Iou),
            "dice" => Ok(Self::Dice),
            _ => Err(LossError::UnknownKind {
                what: "loss",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Sls => "sls",
            LossKind::Iou => "iou",
            LossKind::Dice => "dice",
        })
    }
}

// ---------------------------------------------------------------------------
// Tape-level building blocks

fn check_pair(tape: &Tape, pred: Var, gt: &GroundTruthMask) -> Result<(usize, usize)> {
    let p = tape.value(pred);
    let (h, w) = gt.dims();
    if p.spatial() != Some((h, w)) || p.numel() != h * w {
        return Err(LossError::ShapeMismatch {
            pred: p.shape().to_vec(),
            gt: gt.tensor().shape().to_vec(),
        });
    }
    Ok((h, w))
}

fn gt_like(tape: &mut Tape, pred: Var, gt: &GroundTruthMask) -> Result<Var> {
    let shaped = gt.tensor().clone().reshape(tape.shape(pred))?;
    Ok(tape.constant(shaped))
}

fn value(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

/// Soft intersection `Σ p·g` and prediction mass `Σ p`.
fn soft_counts(tape: &mut Tape, pred: Var, gt: &GroundTruthMask) -> Result<(Var, Var)> {
    check_pair(tape, pred, gt)?;
    let g = gt_like(tape, pred, gt)?;
    let pg = tape.mul(pred, g)?;
    let inter = tape.sum_all(pg)?;
    let mass = tape.sum_all(pred)?;
    Ok((inter, mass))
}

/// Soft IoU `I / U`, or `None` when the union is empty.
fn soft_iou_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask) -> Result<Option<Var>> {
    let (inter, mass) = soft_counts(tape, pred, gt)?;
    let u = tape.sub(mass, inter)?;
    let union = tape.shift(u, gt.pixel_count())?;
    if value(tape, union) <= 0.0 {
        return Ok(None);
    }
    Ok(Some(tape.div(inter, union)?))
}

/// `1 − I/U`; zero when both masks are empty.
pub fn soft_iou_loss_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask) -> Result<Var> {
    match soft_iou_on(tape, pred, gt)? {
        Some(iou) => Ok(tape.rsub(1.0, iou)?),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// `1 − 2I / (Σp + Σg)`; zero when both masks are empty.
pub fn dice_loss_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask) -> Result<Var> {
    let (inter, mass) = soft_counts(tape, pred, gt)?;
    let denom = tape.shift(mass, gt.pixel_count())?;
    if value(tape, denom) <= 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let twice = tape.scale(inter, 2.0)?;
    let ratio = tape.div(twice, denom)?;
    Ok(tape.rsub(1.0, ratio)?)
}

/// `w = (min(a, b) + Var(a, b)) / (max(a, b) + Var(a, b))`.
fn scale_weight_on(tape: &mut Tape, a: Var, b: Var, variance: VarianceKind) -> Result<Var> {
    let lo = tape.minimum(a, b)?;
    let hi = tape.maximum(a, b)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let var = tape.scale(sq, variance.factor())?;
    let num = tape.add(lo, var)?;
    let den = tape.add(hi, var)?;
    Ok(tape.div(num, den)?)
}

/// Differentiable terms of the scale-sensitive loss.
pub struct ScaleTerms {
    pub loss: Var,
    pub weight: Var,
}

/// `L_S = 1 − w · IoU` with scales normalized to the image area.
///
/// With an empty ground truth the weight is undefined; the loss falls back
/// to the predicted area fraction and the reported weight is 1.
pub fn scale_sensitive_loss_on(
    tape: &mut Tape,
    pred: Var,
    gt: &GroundTruthMask,
    variance: VarianceKind,
) -> Result<ScaleTerms> {
    let (h, w) = check_pair(tape, pred, gt)?;
    let area = (h * w) as f64;
    if gt.is_empty() {
        let mass = tape.sum_all(pred)?;
        let loss = tape.scale(mass, 1.0 / area)?;
        let weight = tape.constant(Tensor::scalar(1.0));
        return Ok(ScaleTerms { loss, weight });
    }
    let iou = soft_iou_on(tape, pred, gt)?.expect("union is positive with a non-empty ground truth");
    let mass = tape.sum_all(pred)?;
    let a = tape.scale(mass, 1.0 / area)?;
    let b = tape.constant(Tensor::scalar(gt.pixel_count() / area));
    let weight = scale_weight_on(tape, a, b, variance)?;
    let wiou = tape.mul(weight, iou)?;
    let loss = tape.rsub(1.0, wiou)?;
    Ok(ScaleTerms { loss, weight })
}

/// Coordinate grids (1-based column, 1-based row) shaped like `pred`.
fn coordinate_grids(tape: &mut Tape, pred: Var) -> (Var, Var) {
    let shape = tape.shape(pred).to_vec();
    let (h, w) = tape.value(pred).spatial().expect("2-d prediction");
    let cols = Tensor::from_fn(&shape, |i| ((i % (h * w)) % w + 1) as f64);
    let rows = Tensor::from_fn(&shape, |i| ((i % (h * w)) / w + 1) as f64);
    (tape.constant(cols), tape.constant(rows))
}

/// Soft centroid `(x, y)` and mass of a prediction.
pub fn soft_centroid_on(tape: &mut Tape, pred: Var) -> Result<(Var, Var, Var)> {
    let mass = tape.sum_all(pred)?;
    if value(tape, mass) < EMPTY_MASS {
        return Err(LossError::EmptyMask);
    }
    let (cols, rows) = coordinate_grids(tape, pred);
    let px = tape.mul(pred, cols)?;
    let sx = tape.sum_all(px)?;
    let py = tape.mul(pred, rows)?;
    let sy = tape.sum_all(py)?;
    let x = tape.div(sx, mass)?;
    let y = tape.div(sy, mass)?;
    Ok((x, y, mass))
}

/// Location penalty between centroids, written on the tape.
fn location_from_centroid_on(
    tape: &mut Tape,
    x: Var,
    y: Var,
    target: Centroid,
    kind: LocationKind,
    dims: (usize, usize),
) -> Result<Var> {
    let diagonal = ((dims.0 * dims.0 + dims.1 * dims.1) as f64).sqrt();
    match kind {
        LocationKind::Polar => {
            let tp = to_polar(target);
            let xx = tape.square(x)?;
            let yy = tape.square(y)?;
            let rr = tape.add(xx, yy)?;
            let d = tape.sqrt(rr)?;
            let ratio = tape.div(y, x)?;
            let theta = tape.atan(ratio)?;
            let dg = tape.constant(Tensor::scalar(tp.d));
            let lo = tape.minimum(d, dg)?;
            let hi = tape.maximum(d, dg)?;
            let q = tape.div(lo, hi)?;
            let radial = tape.rsub(1.0, q)?;
            let dt = tape.shift(theta, -tp.theta)?;
            let dt2 = tape.square(dt)?;
            let angular = tape.scale(dt2, 4.0 / (PI * PI))?;
            Ok(tape.add(radial, angular)?)
        }
        LocationKind::L2 => {
            let dx = tape.shift(x, -target.x)?;
            let dy = tape.shift(y, -target.y)?;
            let dx2 = tape.square(dx)?;
            let dy2 = tape.square(dy)?;
            let s = tape.add(dx2, dy2)?;
            let dist = tape.sqrt(s)?;
            Ok(tape.scale(dist, 1.0 / diagonal)?)
        }
        LocationKind::L1 => {
            let mut parts = Vec::with_capacity(2);
            for (v, t) in [(x, target.x), (y, target.y)] {
                let d = tape.shift(v, -t)?;
                let nd = tape.neg(d)?;
                parts.push(tape.maximum(d, nd)?);
            }
            let s = tape.add(parts[0], parts[1])?;
            Ok(tape.scale(s, 1.0 / diagonal)?)
        }
    }
}

/// Location-sensitive penalty between soft prediction and ground truth.
/// A massless prediction yields the constant [`LocationKind::empty_prediction_value`].
pub fn location_loss_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask, kind: LocationKind) -> Result<Var> {
    let dims = check_pair(tape, pred, gt)?;
    let target = soft_centroid(gt.tensor())?;
    match soft_centroid_on(tape, pred) {
        Ok((x, y, _)) => location_from_centroid_on(tape, x, y, target, kind, dims),
        Err(LossError::EmptyMask) => Ok(tape.constant(Tensor::scalar(kind.empty_prediction_value()))),
        Err(e) => Err(e),
    }
}

/// Differentiable terms of the SLS loss.
#[derive(Debug, Clone, Copy)]
pub struct SlsVars {
    pub total: Var,
    pub scale: Var,
    pub location: Var,
    pub weight: Var,
}

impl SlsVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: value(tape, self.total),
            scale_term: value(tape, self.scale),
            location_term: value(tape, self.location),
            weight: value(tape, self.weight),
        }
    }
}

/// `L_SLS = L_S + L_L`. An empty ground truth contributes no location term.
pub fn sls_loss_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask, opts: SlsOptions) -> Result<SlsVars> {
    let ScaleTerms { loss: scale, weight } = scale_sensitive_loss_on(tape, pred, gt, opts.variance)?;
    let location = if gt.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        location_loss_on(tape, pred, gt, opts.location)?
    };
    let total = tape.add(scale, location)?;
    Ok(SlsVars {
        total,
        scale,
        location,
        weight,
    })
}

/// One objective evaluated on one prediction map.
pub fn objective_on(tape: &mut Tape, pred: Var, gt: &GroundTruthMask, kind: LossKind, opts: SlsOptions) -> Result<SlsVars> {
    let zero = || Tensor::scalar(0.0);
    match kind {
        LossKind::Sls => sls_loss_on(tape, pred, gt, opts),
        LossKind::Iou | LossKind::Dice => {
            let total = if kind == LossKind::Iou {
                soft_iou_loss_on(tape, pred, gt)?
            } else {
                dice_loss_on(tape, pred, gt)?
            };
            let location = tape.constant(zero());
            let weight = tape.constant(Tensor::scalar(1.0));
            Ok(SlsVars {
                total,
                scale: total,
                location,
                weight,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-scale supervision

/// Number of scales of the multi-scale head.
pub const NUM_SCALES: usize = 4;

/// Which predictions are supervised: the fused map always, plus the
/// `heads` finest per-scale maps (dropping the coarsest first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ScaleSet {
    heads: usize,
}

impl TryFrom<usize> for ScaleSet {
    type Error = LossError;

    fn try_from(heads: usize) -> Result<Self> {
        Self::new(heads)
    }
}

impl From<ScaleSet> for usize {
    fn from(s: ScaleSet) -> usize {
        s.heads
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self::all()
    }
}

impl ScaleSet {
    pub fn new(heads: usize) -> Result<Self> {
        if heads > NUM_SCALES {
            return Err(LossError::ScaleMismatch {
                expected: NUM_SCALES,
                detail: format!("cannot supervise {heads} per-scale heads"),
            });
        }
        Ok(Self { heads })
    }

    pub fn all() -> Self {
        Self { heads: NUM_SCALES }
    }

    /// Only the fused prediction.
    pub fn fused_only() -> Self {
        Self { heads: 0 }
    }

    pub fn heads(self) -> usize {
        self.heads
    }

    /// Whether per-scale prediction `scale` (1 = coarsest, 4 = full size) is supervised.
    pub fn supervises(self, scale: usize) -> bool {
        (1..=NUM_SCALES).contains(&scale) && scale > NUM_SCALES - self.heads
    }

    /// Labels of supervised maps, e.g. `["p3", "p4", "p"]`.
    pub fn labels(self) -> Vec<String> {
        let mut v: Vec<String> = (1..=NUM_SCALES)
            .filter(|&i| self.supervises(i))
            .map(|i| format!("p{i}"))
            .collect();
        v.push("p".into());
        v
    }
}

impl fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels().join(","))
    }
}

/// Downsampling factor of per-scale prediction `scale` (1-based): `2^(4 − scale)`.
pub fn scale_factor(scale: usize) -> usize {
    1 << (NUM_SCALES - scale)
}

/// Prediction maps on a tape: `heads[i]` is `p_{i+1}` at `H/2^(3−i)`, and `fused` is `p`.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleVars {
    pub heads: [Var; NUM_SCALES],
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct MultiScaleLoss {
    pub total: Var,
    /// `(label, terms)` for every supervised map, coarsest first, fused last.
    pub terms: Vec<(String, SlsVars)>,
}

/// Mean of the per-map objectives over supervised maps, each compared to
/// the max-pooled ground truth at its resolution. With every scale
/// supervised this is `(1/5)(Σ_i L(p_i, ↓(gt, 2^(4−i))) + L(p, gt))`.
pub fn multiscale_loss_on(
    tape: &mut Tape,
    preds: &MultiScaleVars,
    gt: &GroundTruthMask,
    kind: LossKind,
    opts: SlsOptions,
    scales: ScaleSet,
) -> Result<MultiScaleLoss> {
    let mut terms = Vec::with_capacity(NUM_SCALES + 1);
    for scale in 1..=NUM_SCALES {
        if !scales.supervises(scale) {
            continue;
        }
        let factor = scale_factor(scale);
        let (h, w) = gt.dims();
        let pred = preds.heads[scale - 1];
        if tape.value(pred).spatial() != Some((h / factor, w / factor)) {
            return Err(LossError::ScaleMismatch {
                expected: NUM_SCALES + 1,
                detail: format!("p{scale} has shape {:?}, expected {}x{}", tape.shape(pred), h / factor, w / factor),
            });
        }
        let small = gt.downsample(factor)?;
        terms.push((format!("p{scale}"), objective_on(tape, pred, &small, kind, opts)?));
    }
    terms.push(("p".to_string(), objective_on(tape, preds.fused, gt, kind, opts)?));

    let mut total = terms[0].1.total;
    for (_, t) in &terms[1..] {
        total = tape.add(total, t.total)?;
    }
    let total = tape.scale(total, 1.0 / terms.len() as f64)?;
    Ok(MultiScaleLoss { total, terms })
}

// ---------------------------------------------------------------------------
// Value-level API

fn with_pred<T>(pred: &SoftMask, f: impl FnOnce(&mut Tape, Var) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.tensor().clone());
    f(&mut tape, p)
}

pub fn soft_iou_loss(pred: &SoftMask, gt: &GroundTruthMask) -> Result<f64> {
    with_pred(pred, |t, p| {
        let l = soft_iou_loss_on(t, p, gt)?;
        Ok(value(t, l))
    })
}

pub fn dice_loss(pred: &SoftMask, gt: &GroundTruthMask) -> Result<f64> {
    with_pred(pred, |t, p| {
        let l = dice_loss_on(t, p, gt)?;
        Ok(value(t, l))
    })
}

/// Scale weight for normalized scales `a` (prediction) and `b` (ground truth).
pub fn scale_weight(a: f64, b: f64) -> Result<f64> {
    scale_weight_with(a, b, VarianceKind::Population)
}

pub fn scale_weight_with(a: f64, b: f64, variance: VarianceKind) -> Result<f64> {
    if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(LossError::InvalidMask(format!("scales must be finite and non-negative, got {a}, {b}")));
    }
    if a == 0.0 && b == 0.0 {
        return Err(LossError::BothScalesZero);
    }
    let mut tape = Tape::new();
    let va = tape.constant(Tensor::scalar(a));
    let vb = tape.constant(Tensor::scalar(b));
    let w = scale_weight_on(&mut tape, va, vb, variance)?;
    Ok(value(&tape, w))
}

pub fn scale_sensitive_loss(pred: &SoftMask, gt: &GroundTruthMask) -> Result<f64> {
    with_pred(pred, |t, p| {
        let terms = scale_sensitive_loss_on(t, p, gt, VarianceKind::Population)?;
        Ok(value(t, terms.loss))
    })
}

/// Weighted mean of 1-based pixel coordinates.
pub fn soft_centroid(mask: &Tensor) -> Result<Centroid> {
    let mut tape = Tape::new();
    let m = tape.constant(mask.clone());
    let (x, y, _) = soft_centroid_on(&mut tape, m)?;
    Ok(Centroid {
        x: value(&tape, x),
        y: value(&tape, y),
    })
}

/// Polar location-sensitive loss; requires a non-empty ground truth.
pub fn location_sensitive_loss(pred: &SoftMask, gt: &GroundTruthMask) -> Result<f64> {
    location_loss_variant(pred, gt, LocationKind::Polar)
}

pub fn location_loss_variant(pred: &SoftMask, gt: &GroundTruthMask, kind: LocationKind) -> Result<f64> {
    if gt.is_empty() {
        return Err(LossError::EmptyGroundTruth);
    }
    with_pred(pred, |t, p| {
        let l = location_loss_on(t, p, gt, kind)?;
        Ok(value(t, l))
    })
}

/// Location penalty between two known centroids on an `H x W` image.
pub fn location_loss_between(pred: Centroid, target: Centroid, kind: LocationKind, dims: (usize, usize)) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(pred.x));
    let y = tape.constant(Tensor::scalar(pred.y));
    let l = location_from_centroid_on(&mut tape, x, y, target, kind, dims)?;
    Ok(value(&tape, l))
}

pub fn sls_loss(pred: &SoftMask, gt: &GroundTruthMask) -> Result<LossBreakdown> {
    sls_loss_with(pred, gt, SlsOptions::default())
}

pub fn sls_loss_with(pred: &SoftMask, gt: &GroundTruthMask, opts: SlsOptions) -> Result<LossBreakdown> {
    with_pred(pred, |t, p| Ok(sls_loss_on(t, p, gt, opts)?.breakdown(t)))
}

/// Multi-scale SLS over value-level outputs `[p1, p2, p3, p4, p]`.
pub fn multiscale_sls(preds: &[SoftMask], gt: &GroundTruthMask) -> Result<f64> {
    if preds.len() != NUM_SCALES + 1 {
        return Err(LossError::ScaleMismatch {
            expected: NUM_SCALES + 1,
            detail: format!("got {} maps", preds.len()),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = preds.iter().map(|p| tape.constant(p.tensor().clone())).collect();
    let ms = MultiScaleVars {
        heads: [vars[0], vars[1], vars[2], vars[3]],
        fused: vars[4],
    };
    let loss = multiscale_loss_on(&mut tape, &ms, gt, LossKind::Sls, SlsOptions::default(), ScaleSet::all())?;
    Ok(value(&tape, loss.total))
}
