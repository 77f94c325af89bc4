use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, train, write_atomic, HarnessError, Result, TrainConfig};
use crate::losses::{LocationKind, LossKind, ScaleSet, NUM_SCALES};
use crate::synth_data::Dataset;

pub const ABLATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationPreset {
    /// IoU, Dice and SLS losses on the full multi-scale head.
    Losses,
    /// Fused map only, then one to four per-scale heads added finest first.
    Scales,
    /// SLS with the L2, L1 and polar location terms.
    Location,
}

impl FromStr for AblationPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "losses" => Ok(Self::Losses),
            "scales" => Ok(Self::Scales),
            "location" => Ok(Self::Location),
            _ => Err(format!("unknown ablation preset {s:?} (expected losses, scales or location)")),
        }
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationPreset::Losses => "losses",
            AblationPreset::Scales => "scales",
            AblationPreset::Location => "location",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationEntry {
    pub label: String,
    pub config: TrainConfig,
}

/// Rows of a preset, derived from `base`.
pub fn preset_rows(preset: AblationPreset, base: &TrainConfig) -> Vec<AblationEntry> {
    match preset {
        AblationPreset::Losses => [LossKind::Iou, LossKind::Dice, LossKind::Sls]
            .into_iter()
            .map(|loss| AblationEntry {
                label: loss.to_string(),
                config: TrainConfig {
                    loss,
                    location: LocationKind::Polar,
                    scales: ScaleSet::all(),
                    ..base.clone()
                },
            })
            .collect(),
        AblationPreset::Scales => (0..=NUM_SCALES)
            .map(|heads| {
                let scales = ScaleSet::new(heads).expect("at most four heads");
                AblationEntry {
                    label: format!("{}:{}", heads.max(1), scales.labels().join("+")),
                    config: TrainConfig { scales, ..base.clone() },
                }
            })
            .collect(),
        AblationPreset::Location => [LocationKind::L2, LocationKind::L1, LocationKind::Polar]
            .into_iter()
            .map(|location| AblationEntry {
                label: format!("sls-{location}"),
                config: TrainConfig {
                    loss: LossKind::Sls,
                    location,
                    ..base.clone()
                },
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self {
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Ok {
        /// Record file name inside the runs directory.
        record: String,
        record_sha256: String,
        iou: f64,
        pd: f64,
        fa: f64,
        initial_loss: f64,
        final_loss: f64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub loss: LossKind,
    pub location: LocationKind,
    pub supervised: String,
    pub runs: Vec<RunSummary>,
    pub iou: Option<Spread>,
    pub pd: Option<Spread>,
    pub fa: Option<Spread>,
}

impl AblationRow {
    fn metric(&self, f: impl Fn(&RunStatus) -> Option<f64>) -> Vec<f64> {
        self.runs.iter().filter_map(|r| f(&r.status)).collect()
    }

    pub fn n_ok(&self) -> usize {
        self.runs.iter().filter(|r| matches!(r.status, RunStatus::Ok { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format_version: u32,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn file_stem(label: &str, seed: u64) -> String {
    let clean: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("{clean}-seed{seed}")
}

/// Trains every `(entry, seed)` pair and tabulates test metrics. Runs are
/// independent and may execute concurrently; a failed run is recorded as
/// such and the others proceed. With `out_dir`, every run is persisted under
/// `out_dir/runs/` and the table is written as `table.json` and `table.csv`.
pub fn ablate(entries: &[AblationEntry], dataset: &Dataset, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationTable> {
    if entries.len() < 2 {
        return Err(HarnessError::InvalidConfig("an ablation needs at least two configurations".into()));
    }
    if seeds.is_empty() {
        return Err(HarnessError::InvalidConfig("an ablation needs at least one seed".into()));
    }
    let runs_dir = out_dir.map(|d| d.join("runs"));
    if let Some(d) = &runs_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let jobs: Vec<(usize, u64)> = (0..entries.len()).flat_map(|e| seeds.iter().map(move |&s| (e, s))).collect();
    let outcomes: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(e, seed)| {
            let entry = &entries[e];
            let stem = file_stem(&entry.label, seed);
            let status = train(&entry.config, dataset, seed, &stem).and_then(|run| {
                if let Some(d) = &runs_dir {
                    run.persist(d, &stem)?;
                }
                let r = &run.record;
                Ok(RunStatus::Ok {
                    record: format!("{stem}.json"),
                    record_sha256: r.hash(),
                    iou: r.eval.iou,
                    pd: r.eval.pd,
                    fa: r.eval.fa,
                    initial_loss: r.initial_loss.loss,
                    final_loss: r.final_loss.loss,
                })
            });
            RunSummary {
                seed,
                status: status.unwrap_or_else(|e| RunStatus::Failed { error: e.to_string() }),
            }
        })
        .collect();

    let mut outcomes = outcomes.into_iter();
    let rows = entries
        .iter()
        .map(|entry| {
            let runs: Vec<RunSummary> = outcomes.by_ref().take(seeds.len()).collect();
            let mut row = AblationRow {
                label: entry.label.clone(),
                loss: entry.config.loss,
                location: entry.config.location,
                supervised: entry.config.scales.labels().join("+"),
                runs,
                iou: None,
                pd: None,
                fa: None,
            };
            let pick = |f: fn(&RunStatus) -> Option<f64>| Spread::of(&row.metric(f));
            let (iou, pd, fa) = (
                pick(|s| match s {
                    RunStatus::Ok { iou, .. } => Some(*iou),
                    RunStatus::Failed { .. } => None,
                }),
                pick(|s| match s {
                    RunStatus::Ok { pd, .. } => Some(*pd),
                    RunStatus::Failed { .. } => None,
                }),
                pick(|s| match s {
                    RunStatus::Ok { fa, .. } => Some(*fa),
                    RunStatus::Failed { .. } => None,
                }),
            );
            row.iou = iou;
            row.pd = pd;
            row.fa = fa;
            row
        })
        .collect();

    let table = AblationTable {
        format_version: ABLATION_VERSION,
        dataset_hash: dataset.manifest.dataset_hash.clone(),
        seeds: seeds.to_vec(),
        rows,
    };
    if let Some(d) = out_dir {
        write_atomic(&d.join("table.json"), table.to_json().as_bytes())?;
        write_atomic(&d.join("table.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// One line per row: min/median/max of IoU, Pd and Fa over successful seeds.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,loss,location,supervised,n_ok,n_failed,\
             iou_min,iou_median,iou_max,pd_min,pd_median,pd_max,fa_min,fa_median,fa_max\n",
        );
        let cells = |sp: &Option<Spread>| match sp {
            Some(x) => format!("{},{},{}", x.min, x.median, x.max),
            None => ",,".to_string(),
        };
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.loss,
                r.location,
                r.supervised,
                r.n_ok(),
                r.runs.len() - r.n_ok(),
                cells(&r.iou),
                cells(&r.pd),
                cells(&r.fa)
            ));
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}
