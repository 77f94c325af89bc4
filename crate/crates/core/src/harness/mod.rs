//! Training, evaluation, ablation and report emission.

mod ablate;
mod gradcheck;
mod report;

pub use ablate::{ablate, preset_rows, AblationEntry, AblationPreset, AblationRow, AblationTable, RunStatus, RunSummary, Spread};
pub use gradcheck::{grad_check_suite, GradCheckEntry, GradCheckReport, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
pub use report::{emit_report, location_grid, loss_curves, weight_grid};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{multiscale_loss_on, LossError, LossKind, LocationKind, ScaleSet, SlsOptions, SoftMask, VarianceKind};
use crate::metrics::{binarize, bucketed_eval, BinaryMask, EvalOptions, EvalReport, MetricsError};
use crate::mshnet::{self, ModelError, MshNet, UNetConfig};
use crate::synth_data::{DataError, Dataset, LoadedSample, Split};
use crate::tensor::{Tape, Tensor, TensorError};

pub const RUN_RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("training diverged in epoch {epoch} ({} epochs completed)", history.len())]
    Diverged { epoch: usize, history: Vec<EpochLoss> },
    #[error("model expects {model:?} images but the dataset has {data:?}")]
    SizeMismatch {
        model: (usize, usize),
        data: Option<(usize, usize)>,
    },
    #[error("dataset has no {0:?} samples")]
    EmptySplit(Split),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaGrad {
    pub lr: f64,
    pub eps: f64,
    pub initial_accumulator: f64,
}

impl Default for AdaGrad {
    fn default() -> Self {
        Self {
            lr: 0.05,
            eps: 1e-10,
            initial_accumulator: 0.0,
        }
    }
}

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaGradState {
    accum: BTreeMap<String, Vec<f64>>,
}

impl AdaGradState {
    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accum.get(name).map(Vec::as_slice)
    }
}

/// `acc += g²; x −= lr·g / (√acc + eps)`. Coordinates with a zero gradient
/// are left untouched. A non-finite gradient aborts before anything changes.
pub fn adagrad_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdaGradState,
    opt: &AdaGrad,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| HarnessError::InvalidConfig(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adagrad_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
        if !g.is_finite() {
            return Err(HarnessError::NonFiniteGradient { param: name.clone() });
        }
    }
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let acc = state
            .accum
            .entry(name.clone())
            .or_insert_with(|| vec![opt.initial_accumulator; g.numel()]);
        for ((x, a), &gi) in p.data_mut().iter_mut().zip(acc.iter_mut()).zip(g.data()) {
            if gi == 0.0 {
                continue;
            }
            *a += gi * gi;
            *x -= opt.lr * gi / (a.sqrt() + opt.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdaGrad,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub location: LocationKind,
    pub variance: VarianceKind,
    /// Number of per-scale heads supervised besides the fused map (0..=4).
    pub scales: ScaleSet,
    /// Epochs at the start trained with the plain IoU loss.
    pub warmup_epochs: usize,
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
    /// `seed` is replaced by the run seed.
    pub model: UNetConfig,
    /// Compute per-sample gradients of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdaGrad::default(),
            batch_size: 4,
            epochs: 30,
            loss: LossKind::Sls,
            location: LocationKind::Polar,
            variance: VarianceKind::Population,
            scales: ScaleSet::all(),
            warmup_epochs: 0,
            seeds: vec![0, 1, 2],
            eval: EvalOptions::default(),
            model: UNetConfig::default(),
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad("optimizer.lr must be positive");
        }
        if !(self.optimizer.eps >= 0.0 && self.optimizer.initial_accumulator >= 0.0) {
            return bad("optimizer.eps and optimizer.initial_accumulator must be non-negative");
        }
        if self.loss != LossKind::Sls && self.location != LocationKind::Polar {
            return bad("a location variant other than polar only applies to the sls loss");
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return bad("eval.threshold must lie in (0, 1)");
        }
        if !(self.eval.rule.max_distance >= 0.0) {
            return bad("eval.rule.max_distance must be non-negative");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn sls_options(&self) -> SlsOptions {
        SlsOptions {
            location: self.location,
            variance: self.variance,
        }
    }

    /// Loss used in `epoch` (0-based), honouring the warm-up.
    pub fn loss_for_epoch(&self, epoch: usize) -> LossKind {
        if epoch < self.warmup_epochs {
            LossKind::Iou
        } else {
            self.loss
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLoss {
    /// `p1`..`p4` or `p`.
    pub label: String,
    pub total: f64,
    pub scale_term: f64,
    pub location_term: f64,
    pub weight: f64,
}

/// Mean training objective over one pass, with per-map means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub terms: Vec<TermLoss>,
}

struct SampleOutcome {
    loss: f64,
    terms: Vec<TermLoss>,
    grads: Option<BTreeMap<String, Tensor>>,
}

#[derive(Debug, Clone, Copy)]
struct Objective {
    kind: LossKind,
    opts: SlsOptions,
    scales: ScaleSet,
}

fn run_sample(net: &MshNet, sample: &LoadedSample, obj: Objective, with_grads: bool) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, with_grads);
    let preds = net.forward(&mut tape, &bound, &sample.image)?;
    let ms = multiscale_loss_on(&mut tape, &preds, &sample.mask, obj.kind, obj.opts, obj.scales)?;
    let terms = ms
        .terms
        .iter()
        .map(|(label, v)| {
            let b = v.breakdown(&tape);
            TermLoss {
                label: label.clone(),
                total: b.total,
                scale_term: b.scale_term,
                location_term: b.location_term,
                weight: b.weight,
            }
        })
        .collect();
    let loss = tape.value(ms.total).item();
    let grads = if with_grads {
        let mut g = tape.backward(ms.total)?;
        Some(
            bound
                .iter()
                .map(|(name, &v)| (name.clone(), g.take(v).expect("trainable parameter has a gradient")))
                .collect(),
        )
    } else {
        None
    };
    Ok(SampleOutcome { loss, terms, grads })
}

fn run_batch(net: &MshNet, batch: &[&LoadedSample], obj: Objective, with_grads: bool, parallel: bool) -> Result<Vec<SampleOutcome>> {
    if parallel {
        batch.par_iter().map(|s| run_sample(net, s, obj, with_grads)).collect()
    } else {
        batch.iter().map(|s| run_sample(net, s, obj, with_grads)).collect()
    }
}

/// Running means of losses, in sample order.
#[derive(Default)]
struct LossMeter {
    n: usize,
    loss: f64,
    terms: Vec<TermLoss>,
}

impl LossMeter {
    fn add(&mut self, o: &SampleOutcome) {
        if self.terms.is_empty() {
            self.terms = o
                .terms
                .iter()
                .map(|t| TermLoss {
                    label: t.label.clone(),
                    total: 0.0,
                    scale_term: 0.0,
                    location_term: 0.0,
                    weight: 0.0,
                })
                .collect();
        }
        self.n += 1;
        self.loss += o.loss;
        for (acc, t) in self.terms.iter_mut().zip(&o.terms) {
            acc.total += t.total;
            acc.scale_term += t.scale_term;
            acc.location_term += t.location_term;
            acc.weight += t.weight;
        }
    }

    fn finish(self, epoch: usize) -> EpochLoss {
        let n = self.n.max(1) as f64;
        EpochLoss {
            epoch,
            loss: self.loss / n,
            terms: self
                .terms
                .into_iter()
                .map(|t| TermLoss {
                    total: t.total / n,
                    scale_term: t.scale_term / n,
                    location_term: t.location_term / n,
                    weight: t.weight / n,
                    ..t
                })
                .collect(),
        }
    }
}

fn objective(config: &TrainConfig, kind: LossKind) -> Objective {
    Objective {
        kind,
        opts: config.sls_options(),
        scales: config.scales,
    }
}

/// Forward-only pass of the objective over `samples`.
fn measure_loss(net: &MshNet, samples: &[&LoadedSample], obj: Objective, parallel: bool, epoch: usize) -> Result<EpochLoss> {
    let mut meter = LossMeter::default();
    for o in run_batch(net, samples, obj, false, parallel)? {
        meter.add(&o);
    }
    Ok(meter.finish(epoch))
}

/// Permutation of `0..n` for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub dataset_hash: String,
    pub n_train: usize,
    pub n_test: usize,
}

impl DatasetRef {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            path: dataset.root.display().to_string(),
            dataset_hash: dataset.manifest.dataset_hash.clone(),
            n_train: dataset.manifest.count(Split::Train),
            n_test: dataset.manifest.count(Split::Test),
        }
    }
}

/// Everything about one training run except its wall time, which is kept in
/// a separate file so that identical runs produce identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub label: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub dataset: DatasetRef,
    /// Objective over the training set before the first update.
    pub initial_loss: EpochLoss,
    /// Running mean of the objective during each epoch; one entry per epoch.
    pub history: Vec<EpochLoss>,
    /// Objective over the training set after the last update.
    pub final_loss: EpochLoss,
    /// Test-split evaluation of the final model.
    pub eval: EvalReport,
    /// Checkpoint file name, relative to the record.
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    pub net: MshNet,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
}

impl TrainedRun {
    /// Writes `<stem>.ckpt`, `<stem>.json` (the record) and
    /// `<stem>.timing.json` into `dir`.
    pub fn persist(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_atomic(&dir.join(&self.record.checkpoint), &mshnet::encode_checkpoint(&self.net))?;
        let record_path = dir.join(format!("{stem}.json"));
        write_atomic(&record_path, self.record.to_json().as_bytes())?;
        let timing = serde_json::to_string_pretty(&RunTiming {
            wall_seconds: self.wall_seconds,
        })
        .expect("timing serializes");
        write_atomic(&dir.join(format!("{stem}.timing.json")), timing.as_bytes())?;
        Ok(record_path)
    }
}

fn check_size(net_size: (usize, usize), dataset: &Dataset) -> Result<()> {
    let data = dataset.image_size();
    if data != Some(net_size) {
        return Err(HarnessError::SizeMismatch { model: net_size, data });
    }
    Ok(())
}

/// Trains one model. `label` names the run; the checkpoint is recorded as
/// `<label>.ckpt`.
pub fn train(config: &TrainConfig, dataset: &Dataset, seed: u64, label: &str) -> Result<TrainedRun> {
    config.validate()?;
    check_size(config.model.input_size, dataset)?;
    let started = Instant::now();
    let train_set: Vec<&LoadedSample> = dataset.split(Split::Train).collect();
    let test_set: Vec<&LoadedSample> = dataset.split(Split::Test).collect();
    if train_set.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Train));
    }
    if test_set.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Test));
    }

    let mut net = MshNet::build(UNetConfig {
        seed,
        ..config.model.clone()
    })?;
    let mut state = AdaGradState::default();
    let final_obj = objective(config, config.loss);
    let initial_loss = measure_loss(&net, &train_set, objective(config, config.loss_for_epoch(0)), config.parallel, 0)?;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let obj = objective(config, config.loss_for_epoch(epoch));
        let order = epoch_order(seed, epoch, train_set.len());
        let mut meter = LossMeter::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let outcomes = run_batch(&net, &batch, obj, true, config.parallel)?;
            let mut sum: Option<BTreeMap<String, Tensor>> = None;
            for o in outcomes {
                if !o.loss.is_finite() {
                    return Err(HarnessError::Diverged { epoch, history });
                }
                meter.add(&o);
                let g = o.grads.expect("requested gradients");
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => {
                        for (name, t) in g {
                            let a = acc.get_mut(&name).expect("same parameters");
                            for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adagrad_step(net.params_mut(), &grads, &mut state, &config.optimizer)?;
        }
        let record = meter.finish(epoch + 1);
        if !record.loss.is_finite() {
            return Err(HarnessError::Diverged { epoch, history });
        }
        history.push(record);
    }

    let final_loss = measure_loss(&net, &train_set, final_obj, config.parallel, config.epochs)?;
    let eval = evaluate_samples(&net, &test_set, config.eval)?;
    let bytes = mshnet::encode_checkpoint(&net);
    let record = RunRecord {
        format_version: RUN_RECORD_VERSION,
        label: label.to_string(),
        config: config.clone(),
        seed,
        dataset: DatasetRef::of(dataset),
        initial_loss,
        history,
        final_loss,
        eval,
        checkpoint: format!("{label}.ckpt"),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    Ok(TrainedRun {
        record,
        net,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Anything that maps a sample to a probability map.
pub trait Predictor: Sync {
    fn predict(&self, sample: &LoadedSample) -> Result<SoftMask>;

    /// Required input size, if any.
    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }
}

impl Predictor for MshNet {
    fn predict(&self, sample: &LoadedSample) -> Result<SoftMask> {
        Ok(MshNet::predict(self, &sample.image)?.fused)
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        Some(self.config().input_size)
    }
}

/// Returns the ground truth itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &LoadedSample) -> Result<SoftMask> {
        Ok(SoftMask::new(sample.mask.tensor().clone())?)
    }
}

/// Same probability everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, sample: &LoadedSample) -> Result<SoftMask> {
        let (h, w) = sample.mask.dims();
        Ok(SoftMask::new(Tensor::full(&[h, w], self.0))?)
    }
}

pub fn predict_all(predictor: &dyn Predictor, samples: &[&LoadedSample]) -> Result<Vec<SoftMask>> {
    if let Some(size) = predictor.input_size() {
        if let Some(s) = samples.iter().find(|s| s.mask.dims() != size) {
            return Err(HarnessError::SizeMismatch {
                model: size,
                data: Some(s.mask.dims()),
            });
        }
    }
    samples.par_iter().map(|s| predictor.predict(s)).collect()
}

pub fn evaluate_predictions(preds: &[SoftMask], samples: &[&LoadedSample], opts: EvalOptions) -> Result<EvalReport> {
    let bin = preds
        .iter()
        .map(|p| binarize(p, opts.threshold))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let gts: Vec<BinaryMask> = samples.iter().map(|s| BinaryMask::from_ground_truth(&s.mask)).collect();
    Ok(bucketed_eval(&bin, &gts, opts)?)
}

pub fn evaluate_samples(predictor: &dyn Predictor, samples: &[&LoadedSample], opts: EvalOptions) -> Result<EvalReport> {
    let preds = predict_all(predictor, samples)?;
    evaluate_predictions(&preds, samples, opts)
}

/// Test-split evaluation of `predictor`.
pub fn evaluate(predictor: &dyn Predictor, dataset: &Dataset, opts: EvalOptions) -> Result<EvalReport> {
    let test: Vec<&LoadedSample> = dataset.split(Split::Test).collect();
    if test.is_empty() {
        return Err(HarnessError::EmptySplit(Split::Test));
    }
    evaluate_samples(predictor, &test, opts)
}

/// Loads a checkpoint and evaluates it on the test split.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset, opts: EvalOptions) -> Result<EvalReport> {
    let net = mshnet::load_checkpoint(path)?;
    check_size(net.config().input_size, dataset)?;
    evaluate(&net, dataset, opts)
}

/// One report per threshold, sharing a single forward pass.
pub fn threshold_sweep(
    predictor: &dyn Predictor,
    samples: &[&LoadedSample],
    thresholds: &[f64],
    opts: EvalOptions,
) -> Result<Vec<EvalReport>> {
    let preds = predict_all(predictor, samples)?;
    thresholds
        .iter()
        .map(|&threshold| evaluate_predictions(&preds, samples, EvalOptions { threshold, ..opts }))
        .collect()
}
