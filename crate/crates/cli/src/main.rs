//! `mshnet`: generate data, train, evaluate, run ablations, check gradients
//! and emit report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mshnet_core::harness::{
    self, ablate, emit_report, evaluate_checkpoint, grad_check_suite, preset_rows, write_atomic, AblationPreset,
    AblationTable, RunRecord, TrainConfig,
};
use mshnet_core::losses::{LocationKind, LossKind, ScaleSet};
use mshnet_core::metrics::FaMode;
use mshnet_core::synth_data::{generate_dataset, ingest_external, Dataset, SceneConfig, SplitPolicy};

#[derive(Parser)]
#[command(name = "mshnet", version, about = "Scale- and location-sensitive IRSTD training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or index an external one.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and run record.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Train a preset matrix of configurations over several seeds.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheckArgs),
    /// Write loss curves, comparison tables and plot grids.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length (square images).
    #[arg(long)]
    size: Option<usize>,
    /// Start from the dim-target preset instead of the default scene.
    #[arg(long)]
    low_contrast: bool,
    /// Index `<images> <masks>` directories instead of generating scenes.
    #[arg(long, num_args = 2, value_names = ["IMAGES", "MASKS"])]
    external: Option<Vec<PathBuf>>,
    /// Split policy for external data: `4:1` or `equal`.
    #[arg(long, default_value = "4:1")]
    split: SplitPolicy,
}

/// Training flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args)]
struct TrainOverrides {
    /// Training configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    location: Option<LocationKind>,
    /// Per-scale heads supervised besides the fused map (0-4).
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.loss {
            c.loss = v;
        }
        if let Some(v) = self.location {
            c.location = v;
        }
        if let Some(v) = self.scales {
            c.scales = ScaleSet::new(v)?;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.optimizer.lr = v;
        }
        if let Some(v) = self.base_channels {
            c.model.base_channels = v;
        }
        if let Some(v) = self.warmup_epochs {
            c.warmup_epochs = v;
        }
        if let Some(v) = self.threshold {
            c.eval.threshold = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and run record.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File stem of the outputs; defaults to `<loss>-seed<seed>`.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Count false alarms excluding pixels of matched predictions.
    #[arg(long)]
    exclude_matched: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-bucket table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// `losses`, `scales` or `location`.
    #[arg(long)]
    preset: AblationPreset,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; overrides the config file.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// First of three consecutive seeds, when `--seeds` is absent.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances per function.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directories holding run records (`*.json`) and optionally `table.json`.
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; reports are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if let Some(dirs) = &a.external {
        // Manifest paths are resolved against the dataset directory, so they
        // must be absolute here.
        let abs = |p: &PathBuf| fs::canonicalize(p).with_context(|| format!("reading {}", p.display()));
        let manifest = ingest_external(&abs(&dirs[0])?, &abs(&dirs[1])?, a.split, a.seed.unwrap_or(0))?;
        for w in &manifest.warnings {
            eprintln!("warning: {w}");
        }
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        manifest.write(&a.out)?;
        println!(
            "indexed {} pairs ({} skipped) into {}",
            manifest.samples.len(),
            manifest.warnings.len(),
            a.out.display()
        );
        return Ok(());
    }
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SceneConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None if a.low_contrast => SceneConfig::low_contrast(),
        None => SceneConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = a.size {
        config.size = (n, n);
    }
    let manifest = generate_dataset(&config, a.train, a.test, &a.out)?;
    println!(
        "wrote {} samples to {} (dataset {})",
        manifest.samples.len(),
        a.out.display(),
        &manifest.dataset_hash[..16]
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// The network input size always follows the data.
fn fit_to(config: &mut TrainConfig, dataset: &Dataset) -> Result<()> {
    if let Some(size) = dataset.image_size() {
        config.model.input_size = size;
    }
    config.validate()?;
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut config = a.train.resolve()?;
    let dataset = load_dataset(&a.data)?;
    fit_to(&mut config, &dataset)?;
    let label = a.label.clone().unwrap_or_else(|| format!("{}-seed{}", config.loss, a.seed));
    let run = harness::train(&config, &dataset, a.seed, &label)?;
    let path = run.persist(&a.out, &label)?;
    let e = &run.record.eval;
    println!(
        "loss {:.4} -> {:.4}  iou {:.4}  pd {:.4}  fa {:.3e}  ({:.1}s)",
        run.record.initial_loss.loss, run.record.final_loss.loss, e.iou, e.pd, e.fa, run.wall_seconds
    );
    println!("record {}", path.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let mut opts = mshnet_core::metrics::EvalOptions {
        threshold: a.threshold,
        ..Default::default()
    };
    if a.exclude_matched {
        opts.fa_mode = FaMode::ExcludeMatched;
    }
    let report = evaluate_checkpoint(&a.checkpoint, &dataset, opts)?;
    match &a.out {
        Some(p) => write_atomic(p, report.to_json().as_bytes())?,
        None => println!("{}", report.to_json()),
    }
    if let Some(p) = &a.csv {
        write_atomic(p, report.bucket_csv().as_bytes())?;
    }
    eprintln!("iou {:.4}  pd {:.4}  fa {:.3e}", report.iou, report.pd, report.fa);
    Ok(())
}

fn run_ablation(a: &AblateArgs) -> Result<()> {
    let mut base = a.train.resolve()?;
    let seeds = match (&a.seeds, a.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s, s + 1, s + 2],
        (None, None) => base.seeds.clone(),
    };
    let dataset = load_dataset(&a.data)?;
    fit_to(&mut base, &dataset)?;
    let rows = preset_rows(a.preset, &base);
    let table = ablate(&rows, &dataset, &seeds, Some(&a.out))?;
    print!("{}", table.to_csv());
    let failed: usize = table.rows.iter().map(|r| r.runs.len() - r.n_ok()).sum();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see {}", a.out.join("table.json").display());
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> Result<bool> {
    let report = grad_check_suite(a.trials, a.seed);
    for e in &report.entries {
        println!(
            "{:<22} instances {:>3}  coords {:>6}  max rel err {:.3e}{}",
            e.name,
            e.instances,
            e.coordinates,
            e.max_rel_error,
            if e.failures.is_empty() { String::new() } else { format!("  ({} failed)", e.failures.len()) }
        );
    }
    println!("max rel err {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    if let Some(p) = &a.out {
        let json = serde_json::to_string_pretty(&report)?;
        write_atomic(p, json.as_bytes())?;
    }
    Ok(report.passed())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    let mut table: Option<AblationTable> = None;
    for dir in &a.runs {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        for p in paths {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name == "table.json" {
                let text = fs::read_to_string(&p)?;
                table = Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
            } else if name.ends_with(".json") && !name.ends_with(".timing.json") {
                records.push(RunRecord::read(&p)?);
            }
        }
        let nested = dir.join("runs");
        if nested.is_dir() {
            let mut paths: Vec<PathBuf> = fs::read_dir(&nested)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            paths.sort();
            for p in paths {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if name.ends_with(".json") && !name.ends_with(".timing.json") {
                    records.push(RunRecord::read(&p)?);
                }
            }
        }
    }
    if records.is_empty() && table.is_none() {
        bail!("no run records found");
    }
    let written = emit_report(&records, table.as_ref(), &a.out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Ablate(a) => run_ablation(a).map(|_| true),
        Command::GradCheck(a) => grad_check(a),
        Command::Report(a) => report(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
