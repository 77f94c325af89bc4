//! Randomized gradient checks of every loss and of the full network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{
    dice_loss_on, location_loss_on, multiscale_loss_on, scale_sensitive_loss_on, sls_loss_on, soft_iou_loss_on,
    GroundTruthMask, LocationKind, LossError, LossKind, MultiScaleVars, ScaleSet, SlsOptions, VarianceKind,
};
use crate::mshnet::{BoundParams, ModelError, MshNet, UNetConfig};
use crate::tensor::{grad_check_sampled, GradCheckError, Tape, Tensor, TensorError, Var};

pub const GRAD_CHECK_STEP: f64 = 1e-6;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Largest `|analytic − numeric| / max(1, |numeric|)` over all instances.
    pub max_rel_error: f64,
    pub worst_instance: usize,
    pub failures: Vec<String>,
}

impl GradCheckEntry {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error < tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed(self.tolerance))
    }
}

fn loss_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "loss",
            reason: other.to_string(),
        },
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        ModelError::Loss(l) => loss_err(l),
        other => TensorError::InvalidArgument {
            op: "model",
            reason: other.to_string(),
        },
    }
}

/// Probabilities bounded away from 0 and 1.
fn random_pred(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |_| rng.random_range(0.02..0.98))
}

/// A disc of random centre and radius; never empty.
fn random_gt(rng: &mut ChaCha8Rng, h: usize, w: usize) -> GroundTruthMask {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    let r: f64 = rng.random_range(0.5..(h.min(w) as f64 / 4.0));
    let mut t = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if (y as f64 - cy).hypot(x as f64 - cx) <= r {
                t.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    if t.sum() == 0.0 {
        let (y, x) = ((cy as usize).min(h - 1), (cx as usize).min(w - 1));
        t.data_mut()[y * w + x] = 1.0;
    }
    GroundTruthMask::new(t).expect("binary")
}

fn all_coords(xs: &[Tensor]) -> Vec<(usize, usize)> {
    xs.iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect()
}

type CaseFn = dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<(usize, usize)>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>);

fn run_entry(name: &str, trials: usize, seed: u64, case: &CaseFn) -> GradCheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entry = GradCheckEntry {
        name: name.to_string(),
        instances: trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst_instance: 0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let (xs, coords, f) = case(&mut rng);
        entry.coordinates += coords.len();
        match grad_check_sampled(|t, v| f(t, v), &xs, GRAD_CHECK_STEP, &coords) {
            Ok(err) => {
                if err > entry.max_rel_error {
                    entry.max_rel_error = err;
                    entry.worst_instance = trial;
                }
            }
            Err(e @ (GradCheckError::NonFinite { .. } | GradCheckError::Tensor(_))) => {
                entry.failures.push(format!("instance {trial}: {e}"));
            }
        }
    }
    entry
}

fn single_map_case<F>(f: F) -> Box<CaseFn>
where
    F: Fn(&mut Tape, Var, &GroundTruthMask) -> Result<Var, LossError> + Clone + 'static,
{
    Box::new(move |rng| {
        let (h, w) = (rng.random_range(4..=12), rng.random_range(4..=12));
        let x = random_pred(rng, h, w);
        let gt = random_gt(rng, h, w);
        let coords = all_coords(std::slice::from_ref(&x));
        let f = f.clone();
        (vec![x], coords, Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], &gt).map_err(loss_err)))
    })
}

fn multiscale_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<(usize, usize)>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>) {
    let n = 16;
    let xs: Vec<Tensor> = [2, 4, 8, 16, 16].iter().map(|&s| random_pred(rng, s, s)).collect();
    let gt = random_gt(rng, n, n);
    let coords = all_coords(&xs);
    let f = move |t: &mut Tape, v: &[Var]| {
        let preds = MultiScaleVars {
            heads: [v[0], v[1], v[2], v[3]],
            fused: v[4],
        };
        let ms = multiscale_loss_on(t, &preds, &gt, LossKind::Sls, SlsOptions::default(), ScaleSet::all()).map_err(loss_err)?;
        Ok(ms.total)
    };
    (xs, coords, Box::new(f))
}

/// Network of the end-to-end check: 16 x 16 input, two base channels.
pub fn grad_check_model(seed: u64) -> UNetConfig {
    UNetConfig {
        input_size: (16, 16),
        base_channels: 2,
        channel_multipliers: [1, 2, 2, 4],
        seed,
        instance_norm: true,
        output_prior: 0.01,
    }
}

fn mshnet_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<(usize, usize)>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>) {
    let net = MshNet::build(grad_check_model(rng.random())).expect("valid config");
    let names: Vec<String> = net.params().keys().cloned().collect();
    // Zero biases put units whose inputs are all dead exactly on the ReLU
    // kink; random biases move the check to a differentiable point.
    let xs: Vec<Tensor> = net
        .params()
        .iter()
        .map(|(name, t)| {
            if name.ends_with(".bias") {
                Tensor::from_fn(t.shape(), |_| rng.random_range(-0.1..0.1))
            } else {
                t.clone()
            }
        })
        .collect();
    let image = Tensor::from_fn(&[16, 16], |_| rng.random_range(0.0..1.0));
    let gt = random_gt(rng, 16, 16);
    let coords: Vec<(usize, usize)> = xs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| {
            let n = x.numel();
            [rng.random_range(0..n), rng.random_range(0..n)].map(|i| (t, i))
        })
        .collect();
    let f = move |t: &mut Tape, v: &[Var]| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(v.iter().copied()).collect::<BTreeMap<_, _>>());
        let preds = net.forward(t, &bound, &image).map_err(model_err)?;
        let ms = multiscale_loss_on(t, &preds, &gt, LossKind::Sls, SlsOptions::default(), ScaleSet::all()).map_err(loss_err)?;
        Ok(ms.total)
    };
    (xs, coords, Box::new(f))
}

/// Central-difference checks on `trials` random instances of each loss and
/// of the end-to-end multi-scale SLS objective through the network (two
/// sampled coordinates per parameter tensor).
pub fn grad_check_suite(trials: usize, seed: u64) -> GradCheckReport {
    let cases: Vec<(&str, Box<CaseFn>)> = vec![
        ("soft_iou_loss", single_map_case(soft_iou_loss_on)),
        ("dice_loss", single_map_case(dice_loss_on)),
        (
            "scale_sensitive_loss",
            single_map_case(|t: &mut Tape, p, g: &GroundTruthMask| Ok(scale_sensitive_loss_on(t, p, g, VarianceKind::Population)?.loss)),
        ),
        (
            "location_loss_polar",
            single_map_case(|t: &mut Tape, p, g: &GroundTruthMask| location_loss_on(t, p, g, LocationKind::Polar)),
        ),
        (
            "location_loss_l1",
            single_map_case(|t: &mut Tape, p, g: &GroundTruthMask| location_loss_on(t, p, g, LocationKind::L1)),
        ),
        (
            "location_loss_l2",
            single_map_case(|t: &mut Tape, p, g: &GroundTruthMask| location_loss_on(t, p, g, LocationKind::L2)),
        ),
        (
            "sls_loss",
            single_map_case(|t: &mut Tape, p, g: &GroundTruthMask| Ok(sls_loss_on(t, p, g, SlsOptions::default())?.total)),
        ),
        ("multiscale_sls", Box::new(multiscale_case)),
        ("mshnet_end_to_end", Box::new(mshnet_case)),
    ];
    let entries = cases
        .iter()
        .enumerate()
        .map(|(i, (name, case))| run_entry(name, trials, seed.wrapping_add(i as u64), case.as_ref()))
        .collect();
    GradCheckReport {
        seed,
        step: GRAD_CHECK_STEP,
        tolerance: GRAD_CHECK_TOLERANCE,
        entries,
    }
}
