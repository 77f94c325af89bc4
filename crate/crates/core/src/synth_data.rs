//! Synthetic infrared-like scenes and dataset storage.
//!
//! A scene is a smooth noisy background with a few broad clutter blobs plus
//! small bright Gaussian targets. A pixel belongs to a target's mask when the
//! target's own contribution there is at least `mask_fraction` of its peak.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! images/<id>.pgm   8-bit P5 image
//! masks/<id>.pgm    8-bit P5 mask, 0 or 255
//! manifest.json     DatasetManifest
//! ```
//!
//! An ingested external dataset has only `manifest.json`; its entries point at
//! the original files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::GroundTruthMask;
use crate::metrics::{BinaryMask, ScaleBucket};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
/// Mask and external-image binarization level on the 0..=255 scale.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("scene {index}: could not place target {target} after {attempts} attempts")]
    Overcrowded {
        index: u64,
        target: usize,
        attempts: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("no image/mask pairs found")]
    NoPairs,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset hash mismatch: manifest has {expected}, files give {actual}")]
    HashMismatch { expected: String, actual: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// `(H, W)`.
    pub size: (usize, usize),
    /// Inclusive range of targets per image.
    pub targets_per_image: (usize, usize),
    /// Gaussian sigma range (px) used for each bucket, small to large. The
    /// realized mask size is checked against the bucket after placement.
    pub target_sigma: [(f64, f64); 3],
    /// Target peak amplitude added on top of the background.
    pub target_peak: (f64, f64),
    /// Relative frequency of the three size buckets.
    pub scale_mix: [f64; 3],
    pub background_level: f64,
    pub noise_std: f64,
    /// Sigma of the Gaussian blur applied to the white noise before rescaling.
    pub noise_smoothing: f64,
    pub clutter_count: (usize, usize),
    pub clutter_sigma: (f64, f64),
    /// Clutter amplitudes are drawn from `[-a, a]`.
    pub clutter_amplitude: f64,
    /// Lowest allowed peak in units of `noise_std`.
    pub contrast_margin: f64,
    pub mask_fraction: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: (64, 64),
            targets_per_image: (1, 3),
            target_sigma: [(0.5, 1.0), (1.2, 2.1), (2.3, 3.4)],
            target_peak: (0.3, 0.7),
            scale_mix: [1.0 / 3.0; 3],
            background_level: 0.2,
            noise_std: 0.02,
            noise_smoothing: 1.0,
            clutter_count: (2, 4),
            clutter_sigma: (6.0, 14.0),
            clutter_amplitude: 0.12,
            contrast_margin: 3.0,
            mask_fraction: 0.25,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Dim targets just above the contrast margin on a noisier background.
    pub fn low_contrast() -> Self {
        Self {
            target_peak: (0.09, 0.15),
            noise_std: 0.03,
            clutter_amplitude: 0.15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        let (h, w) = self.size;
        if h < 8 || w < 8 {
            return bad(format!("size {h}x{w} is below 8x8"));
        }
        let ranges = [
            ("targets_per_image", self.targets_per_image.0 as f64, self.targets_per_image.1 as f64),
            ("target_peak", self.target_peak.0, self.target_peak.1),
            ("clutter_count", self.clutter_count.0 as f64, self.clutter_count.1 as f64),
            ("clutter_sigma", self.clutter_sigma.0, self.clutter_sigma.1),
        ];
        for (name, lo, hi) in ranges {
            if !(lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        for (i, &(lo, hi)) in self.target_sigma.iter().enumerate() {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("target_sigma[{i}] range ({lo}, {hi}) is empty or non-positive"));
            }
        }
        if self.clutter_sigma.0 <= 0.0 || self.noise_smoothing < 0.0 {
            return bad("sigmas must be positive".into());
        }
        if self.scale_mix.iter().any(|&p| !(p >= 0.0)) || self.scale_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("scale_mix {:?} needs non-negative weights with a positive sum", self.scale_mix));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad(format!("mask_fraction {} must lie in (0, 1)", self.mask_fraction));
        }
        if !(self.noise_std >= 0.0 && self.clutter_amplitude >= 0.0) {
            return bad("noise_std and clutter_amplitude must be non-negative".into());
        }
        if self.target_peak.0 < self.contrast_margin * self.noise_std || self.target_peak.0 <= 0.0 {
            return bad(format!(
                "lowest peak {} is below the contrast margin {} x noise {}",
                self.target_peak.0, self.contrast_margin, self.noise_std
            ));
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the JSON serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    /// 1-based centre, matching component centroids.
    pub center_row: f64,
    pub center_col: f64,
    pub sigma: f64,
    pub peak: f64,
    pub pixel_count: usize,
    pub bucket: ScaleBucket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub targets: Vec<TargetInfo>,
}

impl Sample {
    pub fn image_pgm(&self) -> Vec<u8> {
        let (h, w) = self.mask.dims();
        let px = self.image.data().iter().map(|&v| quantize(v)).collect::<Vec<_>>();
        encode_pgm(h, w, &px)
    }

    pub fn mask_pgm(&self) -> Vec<u8> {
        let (h, w) = self.mask.dims();
        let px = self.mask.data().iter().map(|&v| v * 255).collect::<Vec<_>>();
        encode_pgm(h, w, &px)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Independent generator per `(seed, index)`.
fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamped borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * field[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn background(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = config.size;
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let smooth = blur(&white, h, w, config.noise_smoothing);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let std = (smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / smooth.len() as f64).sqrt();
    let mut field: Vec<f64> = smooth
        .iter()
        .map(|v| config.background_level + config.noise_std * (v - mean) / std.max(1e-12))
        .collect();
    let n_clutter = rng.random_range(config.clutter_count.0..=config.clutter_count.1);
    for _ in 0..n_clutter {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let s = uniform(rng, config.clutter_sigma);
        let a = uniform(rng, (-config.clutter_amplitude, config.clutter_amplitude));
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                field[y * w + x] += a * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    for v in &mut field {
        *v = v.clamp(0.0, 1.0);
    }
    field
}

struct Placed {
    cy: f64,
    cx: f64,
    radius: f64,
    info: TargetInfo,
    pixels: Vec<usize>,
}

/// Mean of the background over a square window around `(cy, cx)`.
fn local_mean(bg: &[f64], h: usize, w: usize, cy: f64, cx: f64, half: usize) -> f64 {
    let (cy, cx) = (cy.round() as usize, cx.round() as usize);
    let (y0, y1) = (cy.saturating_sub(half), (cy + half).min(h - 1));
    let (x0, x1) = (cx.saturating_sub(half), (cx + half).min(w - 1));
    let mut s = 0.0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            s += bg[y * w + x];
        }
    }
    s / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64
}

/// Half-width of the window used for the label soundness check.
pub const LOCAL_MEAN_HALF_WIDTH: usize = 3;

fn try_place(config: &SceneConfig, rng: &mut ChaCha8Rng, bucket: ScaleBucket, bg: &[f64], placed: &[Placed]) -> Option<Placed> {
    let (h, w) = config.size;
    let sigma = uniform(rng, config.target_sigma[bucket.index()]);
    let peak = uniform(rng, config.target_peak);
    // contribution ≥ f·peak  ⇔  d ≤ σ·sqrt(2 ln(1/f))
    let radius = sigma * (2.0 * (1.0 / config.mask_fraction).ln()).sqrt();
    let margin = radius + 1.0;
    if 2.0 * margin >= (h.min(w) - 1) as f64 {
        return None;
    }
    let cy = rng.random_range(margin..(h - 1) as f64 - margin);
    let cx = rng.random_range(margin..(w - 1) as f64 - margin);
    // 1.5 px gap keeps masks from touching under 8-connectivity
    if placed.iter().any(|p| (p.cy - cy).hypot(p.cx - cx) <= p.radius + radius + 1.5) {
        return None;
    }
    let mut pixels = Vec::new();
    let r2 = radius * radius;
    for y in (cy - radius).floor().max(0.0) as usize..=((cy + radius).ceil() as usize).min(h - 1) {
        for x in (cx - radius).floor().max(0.0) as usize..=((cx + radius).ceil() as usize).min(w - 1) {
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r2 {
                pixels.push(y * w + x);
            }
        }
    }
    if !bucket.contains(pixels.len()) {
        return None;
    }
    let mean = local_mean(bg, h, w, cy, cx, radius.ceil() as usize + LOCAL_MEAN_HALF_WIDTH);
    let floor = config.mask_fraction * peak;
    if pixels.iter().any(|&i| bg[i] + floor <= mean) {
        return None;
    }
    let (sy, sx) = pixels.iter().fold((0.0, 0.0), |(sy, sx), &i| (sy + (i / w) as f64, sx + (i % w) as f64));
    let n = pixels.len() as f64;
    Some(Placed {
        cy,
        cx,
        radius,
        info: TargetInfo {
            center_row: sy / n + 1.0,
            center_col: sx / n + 1.0,
            sigma,
            peak,
            pixel_count: pixels.len(),
            bucket,
        },
        pixels,
    })
}

/// Deterministic in `(config.seed, index)`.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let (h, w) = config.size;
    let mut rng = scene_rng(config.seed, index);
    let bg = background(config, &mut rng);
    let n_targets = rng.random_range(config.targets_per_image.0..=config.targets_per_image.1);
    let buckets = WeightedIndex::new(config.scale_mix).map_err(|e| DataError::InvalidConfig(e.to_string()))?;

    let mut placed: Vec<Placed> = Vec::with_capacity(n_targets);
    for target in 0..n_targets {
        let bucket = ScaleBucket::ALL[buckets.sample(&mut rng)];
        let p = (0..config.max_retries)
            .find_map(|_| try_place(config, &mut rng, bucket, &bg, &placed))
            .ok_or(DataError::Overcrowded {
                index,
                target,
                attempts: config.max_retries,
            })?;
        placed.push(p);
    }

    let mut image = bg;
    let mut mask = vec![0u8; h * w];
    for p in &placed {
        let s = p.info.sigma;
        let reach = (4.0 * s).ceil();
        let y0 = (p.cy - reach).max(0.0) as usize;
        let x0 = (p.cx - reach).max(0.0) as usize;
        for y in y0..=((p.cy + reach) as usize).min(h - 1) {
            for x in x0..=((p.cx + reach) as usize).min(w - 1) {
                let d2 = (y as f64 - p.cy).powi(2) + (x as f64 - p.cx).powi(2);
                image[y * w + x] += p.info.peak * (-d2 / (2.0 * s * s)).exp();
            }
        }
        for &i in &p.pixels {
            mask[i] = 1;
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(vec![h, w], image).expect("sized field"),
        mask: BinaryMask::new(h, w, mask).expect("binary mask"),
        targets: placed.into_iter().map(|p| p.info).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Train/test assignment for ingested data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// 4 train : 1 test.
    #[default]
    FourToOne,
    /// Half and half.
    Equal,
}

impl SplitPolicy {
    fn n_train(self, n: usize) -> usize {
        match self {
            SplitPolicy::FourToOne => (n * 4).div_ceil(5),
            SplitPolicy::Equal => n.div_ceil(2),
        }
    }
}

impl std::str::FromStr for SplitPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "4:1" | "four_to_one" => Ok(Self::FourToOne),
            "1:1" | "equal" => Ok(Self::Equal),
            _ => Err(format!("unknown split policy {s:?} (expected 4:1 or equal)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic { config: SceneConfig },
    External {
        image_dir: PathBuf,
        mask_dir: PathBuf,
        policy: SplitPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    /// Relative paths resolve against the dataset directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Empty for external data.
    pub targets: Vec<TargetInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: DatasetSource,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 over every sample's id, image bytes and mask bytes, in order.
    pub dataset_hash: String,
    pub samples: Vec<SampleEntry>,
    /// Human-readable notes about skipped inputs.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported version {}", m.format_version)));
        }
        Ok(m)
    }
}

struct HashBuilder(Sha256);

impl HashBuilder {
    fn add(&mut self, id: &str, image: &[u8], mask: &[u8]) {
        for part in [id.as_bytes(), image, mask] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
    }

    fn finish(self) -> String {
        hex(&self.0.finalize())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes `n_train + n_test` scenes (indices `0..n_train` are train) and the
/// manifest into `out_dir`.
pub fn generate_dataset(config: &SceneConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(DataError::InvalidConfig("n_train and n_test must be positive".into()));
    }
    let total = n_train + n_test;
    let samples = (0..total as u64)
        .into_par_iter()
        .map(|i| generate_scene(config, i))
        .collect::<Result<Vec<_>>>()?;

    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;
    let mut hash = HashBuilder(Sha256::new());
    let mut entries = Vec::with_capacity(total);
    for (i, s) in samples.into_iter().enumerate() {
        let id = format!("{i:06}");
        let (img, mask) = (s.image_pgm(), s.mask_pgm());
        let rel_img = PathBuf::from("images").join(format!("{id}.pgm"));
        let rel_mask = PathBuf::from("masks").join(format!("{id}.pgm"));
        write_file(&out_dir.join(&rel_img), &img)?;
        write_file(&out_dir.join(&rel_mask), &mask)?;
        hash.add(&id, &img, &mask);
        entries.push(SampleEntry {
            id,
            split: if i < n_train { Split::Train } else { Split::Test },
            image: rel_img,
            mask: rel_mask,
            targets: s.targets,
        });
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        source: DatasetSource::Synthetic { config: config.clone() },
        seed: config.seed,
        config_hash: config.hash(),
        dataset_hash: hash.finish(),
        samples: entries,
        warnings: Vec::new(),
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "pnm", "ppm"];

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    Ok((gray.height() as usize, gray.width() as usize, gray.into_raw()))
}

/// Pairs `image_dir/<stem>.*` with `mask_dir/<stem>.*`. Unpaired files and
/// size mismatches are skipped and listed in `warnings`. The split is drawn
/// from a `seed`-shuffled order of the sorted stems.
pub fn ingest_external(image_dir: &Path, mask_dir: &Path, policy: SplitPolicy, seed: u64) -> Result<DatasetManifest> {
    let images = list_by_stem(image_dir)?;
    let masks = list_by_stem(mask_dir)?;
    let mut warnings = Vec::new();
    for stem in masks.keys().filter(|s| !images.contains_key(*s)) {
        warnings.push(format!("mask {stem} has no image"));
    }
    let mut pairs = Vec::new();
    for (stem, img_path) in &images {
        let Some(mask_path) = masks.get(stem) else {
            warnings.push(format!("image {stem} has no mask"));
            continue;
        };
        let (ih, iw, _) = read_gray(img_path)?;
        let (mh, mw, _) = read_gray(mask_path)?;
        if (ih, iw) != (mh, mw) {
            warnings.push(format!("{stem}: image {ih}x{iw} but mask {mh}x{mw}"));
            continue;
        }
        pairs.push((stem.clone(), img_path.clone(), mask_path.clone()));
    }
    if pairs.is_empty() {
        return Err(DataError::NoPairs);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = policy.n_train(pairs.len());
    let mut split = vec![Split::Test; pairs.len()];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut hash = HashBuilder(Sha256::new());
    let mut samples = Vec::with_capacity(pairs.len());
    for ((id, image, mask), split) in pairs.into_iter().zip(split) {
        let ib = fs::read(&image).map_err(io_err(&image))?;
        let mb = fs::read(&mask).map_err(io_err(&mask))?;
        hash.add(&id, &ib, &mb);
        samples.push(SampleEntry {
            id,
            split,
            image,
            mask,
            targets: Vec::new(),
        });
    }
    let source = DatasetSource::External {
        image_dir: image_dir.to_path_buf(),
        mask_dir: mask_dir.to_path_buf(),
        policy,
    };
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        config_hash: hex(&Sha256::digest(serde_json::to_vec(&source).expect("source serializes"))),
        source,
        seed,
        dataset_hash: hash.finish(),
        samples,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub image: Tensor,
    pub mask: GroundTruthMask,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    /// Reads the manifest and every sample, verifying the dataset hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let mut hash = HashBuilder(Sha256::new());
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let (ip, mp) = (dir.join(&e.image), dir.join(&e.mask));
            let ib = fs::read(&ip).map_err(io_err(&ip))?;
            let mb = fs::read(&mp).map_err(io_err(&mp))?;
            hash.add(&e.id, &ib, &mb);
            let (h, w, img) = read_gray(&ip)?;
            let (mh, mw, mask) = read_gray(&mp)?;
            if (h, w) != (mh, mw) {
                return Err(DataError::Image {
                    path: mp,
                    reason: format!("mask is {mh}x{mw}, image is {h}x{w}"),
                });
            }
            let image = Tensor::new(vec![h, w], img.iter().map(|&v| f64::from(v) / 255.0).collect()).expect("sized");
            samples.push(LoadedSample {
                id: e.id.clone(),
                split: e.split,
                image,
                mask: binarize_mask(h, w, &mask),
            });
        }
        let actual = hash.finish();
        if actual != manifest.dataset_hash {
            return Err(DataError::HashMismatch {
                expected: manifest.dataset_hash.clone(),
                actual,
            });
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LoadedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Common `(H, W)` of all samples, or `None` when sizes differ.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        let mut dims = self.samples.iter().map(|s| s.mask.dims());
        let first = dims.next()?;
        dims.all(|d| d == first).then_some(first)
    }
}

/// `v ≥ 128 → 1`.
pub fn binarize_mask(height: usize, width: usize, pixels: &[u8]) -> GroundTruthMask {
    let t = Tensor::new(
        vec![height, width],
        pixels.iter().map(|&v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect(),
    )
    .expect("sized");
    GroundTruthMask::new(t).expect("binary")
}
