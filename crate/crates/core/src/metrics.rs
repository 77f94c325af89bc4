//! Pixel- and target-level evaluation: IoU, probability of detection (Pd),
//! false-alarm rate (Fa), and a per-target-size breakdown.
//!
//! Targets are 8-connected components (4-connectivity selectable). A ground
//! truth target counts as detected when a predicted component's centroid lies
//! within `max_distance` pixels of its centroid; pairs are matched greedily,
//! nearest first, one to one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Centroid, GroundTruthMask, SoftMask};
use crate::tensor::Tensor;

pub const EVAL_REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("image {index}: prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch {
        index: usize,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no ground-truth targets in the evaluated set; Pd is undefined")]
    NoTargets,
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MetricsError::InvalidMask(format!("{} values for {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(MetricsError::InvalidMask("values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Mask with ones at 0-based `(row, col)` positions.
    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Self::zeros(height, width);
        for &(r, c) in pixels {
            m.data[r * width + c] = 1;
        }
        m
    }

    pub fn from_ground_truth(gt: &GroundTruthMask) -> Self {
        let (height, width) = gt.dims();
        Self {
            height,
            width,
            data: gt.tensor().data().iter().map(|&v| u8::from(v != 0.0)).collect(),
        }
    }

    pub fn to_ground_truth(&self) -> GroundTruthMask {
        let t = Tensor::new(vec![self.height, self.width], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("matching length");
        GroundTruthMask::new(t).expect("binary values")
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Pixel is foreground iff `p ≥ threshold`.
pub fn binarize(pred: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let (height, width) = pred.tensor().spatial().expect("2-d mask");
    Ok(BinaryMask {
        height,
        width,
        data: pred.tensor().data().iter().map(|&p| u8::from(p >= threshold)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub label: u32,
    pub pixel_count: usize,
    /// Mean 1-based pixel position (`x` = column).
    pub centroid: Centroid,
}

/// Label map (0 = background, components `1..=K` in raster order of their
/// first pixel) plus per-component statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Two-pass union-find labeling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabeling {
    let (h, w) = mask.dims();
    let mut set = DisjointSet {
        parent: (0..h * w).collect(),
    };
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let i = r * w + c;
            if c > 0 && mask.get(r, c - 1) {
                set.union(i, i - 1);
            }
            if r > 0 {
                if mask.get(r - 1, c) {
                    set.union(i, i - w);
                }
                if connectivity == Connectivity::Eight {
                    if c > 0 && mask.get(r - 1, c - 1) {
                        set.union(i, i - w - 1);
                    }
                    if c + 1 < w && mask.get(r - 1, c + 1) {
                        set.union(i, i - w + 1);
                    }
                }
            }
        }
    }

    let mut root_label = vec![0u32; h * w];
    let mut labels = vec![0u32; h * w];
    let mut sums: Vec<(usize, f64, f64)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let root = set.find(r * w + c);
            if root_label[root] == 0 {
                sums.push((0, 0.0, 0.0));
                root_label[root] = sums.len() as u32;
            }
            let label = root_label[root];
            labels[r * w + c] = label;
            let s = &mut sums[label as usize - 1];
            s.0 += 1;
            s.1 += (c + 1) as f64;
            s.2 += (r + 1) as f64;
        }
    }
    let components = sums
        .into_iter()
        .enumerate()
        .map(|(i, (n, sx, sy))| Component {
            label: i as u32 + 1,
            pixel_count: n,
            centroid: Centroid {
                x: sx / n as f64,
                y: sy / n as f64,
            },
        })
        .collect();
    ComponentLabeling {
        height: h,
        width: w,
        labels,
        components,
    }
}

/// Target size class by pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleBucket {
    /// (0, 10]
    Small,
    /// (10, 40]
    Medium,
    /// (40, ∞)
    Large,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 3] = [ScaleBucket::Small, ScaleBucket::Medium, ScaleBucket::Large];

    pub fn of(pixel_count: usize) -> Option<Self> {
        match pixel_count {
            0 => None,
            1..=10 => Some(Self::Small),
            11..=40 => Some(Self::Medium),
            _ => Some(Self::Large),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn contains(self, pixel_count: usize) -> bool {
        Self::of(pixel_count) == Some(self)
    }

    pub fn range(self) -> &'static str {
        match self {
            ScaleBucket::Small => "(0,10]",
            ScaleBucket::Medium => "(10,40]",
            ScaleBucket::Large => "(40,inf)",
        }
    }
}

impl fmt::Display for ScaleBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.range())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchRule {
    pub max_distance: f64,
    pub connectivity: Connectivity,
}

impl Default for MatchRule {
    fn default() -> Self {
        Self {
            max_distance: 3.0,
            connectivity: Connectivity::Eight,
        }
    }
}

/// How false-alarm pixels are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaMode {
    /// Every predicted pixel whose label is background.
    #[default]
    RawPixels,
    /// As above, but ignoring pixels of predicted components matched to a target.
    ExcludeMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMatch {
    pub image: usize,
    pub gt_label: u32,
    pub pred_label: u32,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRef {
    pub image: usize,
    pub label: u32,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub gt: ComponentLabeling,
    pub pred: ComponentLabeling,
    /// `(gt index, pred index, distance)` into the component lists.
    pub matches: Vec<(usize, usize, f64)>,
}

impl ImageTargets {
    fn gt_matched(&self) -> Vec<bool> {
        let mut v = vec![false; self.gt.components.len()];
        for &(g, _, _) in &self.matches {
            v[g] = true;
        }
        v
    }

    fn pred_matched(&self) -> Vec<bool> {
        let mut v = vec![false; self.pred.components.len()];
        for &(_, p, _) in &self.matches {
            v[p] = true;
        }
        v
    }
}

fn check_pairs(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(MetricsError::ShapeMismatch {
                index,
                pred: p.dims(),
                gt: g.dims(),
            });
        }
    }
    Ok(())
}

/// Greedy nearest-first one-to-one matching of components in one image.
pub fn match_targets(pred: &BinaryMask, gt: &BinaryMask, rule: MatchRule) -> ImageTargets {
    let gl = connected_components(gt, rule.connectivity);
    let pl = connected_components(pred, rule.connectivity);
    let mut candidates = Vec::new();
    for (gi, g) in gl.components.iter().enumerate() {
        for (pi, p) in pl.components.iter().enumerate() {
            let d = (g.centroid.x - p.centroid.x).hypot(g.centroid.y - p.centroid.y);
            if d <= rule.max_distance {
                candidates.push((d, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gl.components.len()];
    let mut pred_used = vec![false; pl.components.len()];
    let mut matches = Vec::new();
    for (d, gi, pi) in candidates {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matches.push((gi, pi, d));
        }
    }
    ImageTargets {
        gt: gl,
        pred: pl,
        matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    /// `Σ|∩| / Σ|∪|` over all images (1 when every union is empty).
    pub iou: f64,
    /// Mean of per-image IoU over images with a non-empty union.
    pub per_image_mean: f64,
    pub intersection: usize,
    pub union: usize,
}

fn inter_union(p: &BinaryMask, g: &BinaryMask) -> (usize, usize) {
    p.data.iter().zip(&g.data).fold((0, 0), |(i, u), (&a, &b)| {
        (i + usize::from(a & b == 1), u + usize::from(a | b == 1))
    })
}

pub fn pixel_iou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<IouStats> {
    check_pairs(preds, gts)?;
    let (mut inter, mut union) = (0, 0);
    let mut per_image = Vec::new();
    for (p, g) in preds.iter().zip(gts) {
        let (i, u) = inter_union(p, g);
        inter += i;
        union += u;
        if u > 0 {
            per_image.push(i as f64 / u as f64);
        }
    }
    let ratio = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(IouStats {
        iou: ratio(inter, union),
        per_image_mean: if per_image.is_empty() {
            1.0
        } else {
            per_image.iter().sum::<f64>() / per_image.len() as f64
        },
        intersection: inter,
        union,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub pd: f64,
    pub n_pred: usize,
    pub n_all: usize,
    pub images: Vec<ImageTargets>,
}

impl Detection {
    pub fn matched(&self) -> Vec<TargetMatch> {
        self.images
            .iter()
            .enumerate()
            .flat_map(|(image, t)| {
                t.matches.iter().map(move |&(g, p, d)| TargetMatch {
                    image,
                    gt_label: t.gt.components[g].label,
                    pred_label: t.pred.components[p].label,
                    distance: d,
                })
            })
            .collect()
    }

    pub fn missed(&self) -> Vec<TargetRef> {
        let mut v = Vec::new();
        for (image, t) in self.images.iter().enumerate() {
            for (c, hit) in t.gt.components.iter().zip(t.gt_matched()) {
                if !hit {
                    v.push(TargetRef {
                        image,
                        label: c.label,
                        pixel_count: c.pixel_count,
                    });
                }
            }
        }
        v
    }

    pub fn false_alarms(&self) -> Vec<TargetRef> {
        let mut v = Vec::new();
        for (image, t) in self.images.iter().enumerate() {
            for (c, hit) in t.pred.components.iter().zip(t.pred_matched()) {
                if !hit {
                    v.push(TargetRef {
                        image,
                        label: c.label,
                        pixel_count: c.pixel_count,
                    });
                }
            }
        }
        v
    }
}

/// `Pd = N_pred / N_all` under `rule`.
pub fn prob_detection(preds: &[BinaryMask], gts: &[BinaryMask], rule: MatchRule) -> Result<Detection> {
    check_pairs(preds, gts)?;
    let images: Vec<ImageTargets> = preds.iter().zip(gts).map(|(p, g)| match_targets(p, g, rule)).collect();
    let n_all: usize = images.iter().map(|t| t.gt.components.len()).sum();
    if n_all == 0 {
        return Err(MetricsError::NoTargets);
    }
    let n_pred: usize = images.iter().map(|t| t.matches.len()).sum();
    Ok(Detection {
        pd: n_pred as f64 / n_all as f64,
        n_pred,
        n_all,
        images,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalseAlarms {
    pub fa: f64,
    pub p_false: usize,
    pub p_all: usize,
}

/// `Fa = P_false / P_all` counting every predicted pixel with label 0.
pub fn false_alarm_rate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<FalseAlarms> {
    check_pairs(preds, gts)?;
    let mut p_false = 0;
    let mut p_all = 0;
    for (p, g) in preds.iter().zip(gts) {
        p_false += p.data.iter().zip(&g.data).filter(|(&a, &b)| a == 1 && b == 0).count();
        p_all += p.data.len();
    }
    Ok(FalseAlarms {
        fa: if p_all == 0 { 0.0 } else { p_false as f64 / p_all as f64 },
        p_false,
        p_all,
    })
}

fn false_alarms_in(p: &BinaryMask, g: &BinaryMask, targets: &ImageTargets, mode: FaMode) -> usize {
    let excluded: Vec<u32> = match mode {
        FaMode::RawPixels => Vec::new(),
        FaMode::ExcludeMatched => targets.matches.iter().map(|&(_, pi, _)| targets.pred.components[pi].label).collect(),
    };
    p.data
        .iter()
        .zip(&g.data)
        .zip(&targets.pred.labels)
        .filter(|((&a, &b), l)| a == 1 && b == 0 && !excluded.contains(l))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: ScaleBucket,
    pub range: String,
    /// False when no ground-truth target falls in the bucket; metrics are then absent.
    pub present: bool,
    pub n_targets: usize,
    pub n_matched: usize,
    pub n_images: usize,
    pub iou: Option<f64>,
    pub pd: Option<f64>,
    pub fa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub n_images: usize,
    pub intersection: usize,
    pub union: usize,
    pub p_false: usize,
    pub p_all: usize,
    pub n_pred: usize,
    pub n_all: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub threshold: f64,
    pub match_rule: MatchRule,
    pub fa_mode: FaMode,
    pub iou: f64,
    pub iou_per_image_mean: f64,
    pub pd: f64,
    pub fa: f64,
    pub counts: EvalCounts,
    pub buckets: Vec<BucketReport>,
    pub matched: Vec<TargetMatch>,
    pub missed: Vec<TargetRef>,
    pub false_alarms: Vec<TargetRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Recorded in the report; masks are already binary here.
    pub threshold: f64,
    pub rule: MatchRule,
    pub fa_mode: FaMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            rule: MatchRule::default(),
            fa_mode: FaMode::RawPixels,
        }
    }
}

/// Full report with the per-size breakdown. Bucket Pd counts ground-truth
/// targets of that size; bucket IoU and Fa are computed over the images that
/// contain at least one target of that size.
pub fn bucketed_eval(preds: &[BinaryMask], gts: &[BinaryMask], opts: EvalOptions) -> Result<EvalReport> {
    let detection = prob_detection(preds, gts, opts.rule)?;
    let iou = pixel_iou(preds, gts)?;
    let fa_per_image: Vec<usize> = preds
        .iter()
        .zip(gts)
        .zip(&detection.images)
        .map(|((p, g), t)| false_alarms_in(p, g, t, opts.fa_mode))
        .collect();
    let p_all: usize = preds.iter().map(|p| p.data.len()).sum();
    let p_false: usize = fa_per_image.iter().sum();

    let buckets = ScaleBucket::ALL
        .iter()
        .map(|&bucket| {
            let (mut n_targets, mut n_matched) = (0, 0);
            let (mut inter, mut union, mut fa_px, mut px, mut n_images) = (0, 0, 0, 0, 0);
            for (i, t) in detection.images.iter().enumerate() {
                let hits = t.gt_matched();
                let mut in_image = false;
                for (c, hit) in t.gt.components.iter().zip(hits) {
                    if bucket.contains(c.pixel_count) {
                        in_image = true;
                        n_targets += 1;
                        n_matched += usize::from(hit);
                    }
                }
                if in_image {
                    let (a, b) = inter_union(&preds[i], &gts[i]);
                    inter += a;
                    union += b;
                    fa_px += fa_per_image[i];
                    px += preds[i].data.len();
                    n_images += 1;
                }
            }
            let present = n_targets > 0;
            BucketReport {
                bucket,
                range: bucket.range().to_string(),
                present,
                n_targets,
                n_matched,
                n_images,
                iou: present.then(|| inter as f64 / union as f64),
                pd: present.then(|| n_matched as f64 / n_targets as f64),
                fa: present.then(|| fa_px as f64 / px as f64),
            }
        })
        .collect();

    Ok(EvalReport {
        format_version: EVAL_REPORT_VERSION,
        threshold: opts.threshold,
        match_rule: opts.rule,
        fa_mode: opts.fa_mode,
        iou: iou.iou,
        iou_per_image_mean: iou.per_image_mean,
        pd: detection.pd,
        fa: if p_all == 0 { 0.0 } else { p_false as f64 / p_all as f64 },
        counts: EvalCounts {
            n_images: preds.len(),
            intersection: iou.intersection,
            union: iou.union,
            p_false,
            p_all,
            n_pred: detection.n_pred,
            n_all: detection.n_all,
        },
        buckets,
        matched: detection.matched(),
        missed: detection.missed(),
        false_alarms: detection.false_alarms(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn bucket_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = String::from("bucket,present,n_targets,n_matched,n_images,iou,pd,fa\n");
        for b in &self.buckets {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.range,
                b.present,
                b.n_targets,
                b.n_matched,
                b.n_images,
                opt(b.iou),
                opt(b.pd),
                opt(b.fa)
            ));
        }
        s
    }
}
