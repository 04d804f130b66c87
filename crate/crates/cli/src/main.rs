//! `lpcam` command-line entry point.
//!
//! Each subcommand resolves its configuration (flags over the `--config`
//! TOML file over the preset), runs one pipeline stage on a dedicated worker
//! pool and writes a `provenance.json` next to its outputs.

mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use lpcam::clustering::Metric;
use lpcam::config::{resolve, ConfigOverrides, PipelineConfig, Preset};
use lpcam::dataset::{validate_dataset, Dataset};
use lpcam::lpcam::{batch_generate, read_archive, worker_pool, LpcamMode, MapKind, MapRequest};
use lpcam::pipeline::{build_bank, cache_from_env, evaluate_seeds, seeds_from_maps};
use lpcam::prototypes::PrototypeBank;
use lpcam::seedmask::{read_seeds, write_seeds};
use lpcam::sweep::{run_sweep, write_csv, SweepGrid};
use lpcam::synth::{synthesize, write_synth, Scenario};
use lpcam::types::ClassifierWeights;

use provenance::Provenance;

/// Exit code for errors that stop a command before it finishes.
const EXIT_FATAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "lpcam", version, about = "Local prototype class activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest and every file it references.
    Validate(ValidateArgs),
    /// Cluster local features and write the prototype bank.
    Cluster(ClusterArgs),
    /// Generate CAM or LPCAM maps for every image.
    Genmap(GenmapArgs),
    /// Threshold a map archive into seed masks.
    Seed(SeedArgs),
    /// Score seed masks against ground truth.
    Eval(EvalArgs),
    /// Evaluate a grid of hyperparameters.
    Sweep(SweepArgs),
    /// Write a procedurally generated dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Voc,
    Coco,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    FgOnly,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Cam,
    Lpcam,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Voc => Preset::Voc,
            PresetArg::Coco => Preset::Coco,
        }
    }
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

impl From<ModeArg> for LpcamMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => LpcamMode::Full,
            ModeArg::FgOnly => LpcamMode::FgOnly,
        }
    }
}

impl From<KindArg> for MapKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Cam => MapKind::Cam,
            KindArg::Lpcam => MapKind::Lpcam,
        }
    }
}

#[derive(Debug, Args)]
struct WorkerArgs {
    /// Worker threads; defaults to the number of logical CPUs.
    #[arg(long)]
    workers: Option<usize>,
}

impl WorkerArgs {
    fn count(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    }
}

/// Hyperparameter flags. Unset flags fall back to the config file, then to
/// the preset.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Hyperparameter preset used as the base configuration.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// TOML file with configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clusters per bag.
    #[arg(long = "k", value_name = "K")]
    k: Option<usize>,
    /// CAM threshold splitting foreground from context.
    #[arg(long)]
    tau: Option<f64>,
    /// Minimum class score for a class prototype.
    #[arg(long)]
    mu_f: Option<f64>,
    /// Maximum class score for a context prototype.
    #[arg(long)]
    mu_b: Option<f64>,
    /// Activation below which a pixel becomes background.
    #[arg(long)]
    bg_threshold: Option<f64>,
    /// Maximum images sampled per class; 0 removes the cap.
    #[arg(long)]
    sample_cap: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    /// Seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// LPCAM aggregation.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

impl ConfigArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            preset: self.preset.map(Into::into),
            k: self.k,
            tau: self.tau,
            mu_f: self.mu_f,
            mu_b: self.mu_b,
            bg_threshold: self.bg_threshold,
            sample_cap: self.sample_cap,
            metric: self.metric.map(Into::into),
            max_iters: self.max_iters,
            tol: self.tol,
            restarts: self.restarts,
            seed: self.seed,
            mode: self.mode.map(Into::into),
        }
    }

    fn resolve(&self) -> Result<PipelineConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ConfigOverrides::default(),
        };
        Ok(resolve(&file, &self.overrides())?)
    }
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Classifier weights NPY (N x C).
    #[arg(long)]
    weights: PathBuf,
    /// Bank directory to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Debug, Args)]
struct GenmapArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Prototype bank directory; required for LPCAM maps.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lpcam")]
    kind: KindArg,
    /// Archive directory to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Debug, Args)]
struct SeedArgs {
    /// Map archive directory written by `genmap`.
    #[arg(long)]
    maps: PathBuf,
    /// Seed directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write PGM previews.
    #[arg(long)]
    pgm: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Seed directory written by `seed`.
    #[arg(long)]
    seeds: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for `metrics.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Grid file, TOML or JSON by extension.
    #[arg(long)]
    grid: PathBuf,
    /// Directory for `sweep.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with scenario parameters.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

fn read_weights(path: &Path) -> Result<ClassifierWeights> {
    ClassifierWeights::read_npy(path).with_context(|| format!("loading weights {}", path.display()))
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Dataset::open(path).with_context(|| format!("opening manifest {}", path.display()))
}

#[derive(Serialize)]
struct ValidationOutput<'a> {
    provenance: &'a Provenance,
    report: &'a lpcam::dataset::ValidationReport,
}

fn cmd_validate(args: &ValidateArgs) -> Result<ExitCode> {
    let report = match validate_dataset(&args.manifest) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_FATAL));
        }
    };
    for record in report.records.iter().filter(|r| !r.is_ok()) {
        for e in &record.errors {
            println!("{}: {e}", record.image_id);
        }
    }
    println!(
        "{} records: {} ok, {} with errors (N={}, C={})",
        report.records.len(),
        report.ok_count(),
        report.error_count(),
        report.num_classes,
        report.channels
    );
    if let Some(out) = &args.out {
        let provenance = Provenance::new("validate", 1).input("manifest", &args.manifest);
        let text = serde_json::to_string_pretty(&ValidationOutput {
            provenance: &provenance,
            report: &report,
        })?;
        std::fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(if report.error_count() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_cluster(args: &ClusterArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let workers = args.workers.count();
    let dataset = open_dataset(&args.manifest)?;
    let weights = read_weights(&args.weights)?;
    let cache = cache_from_env();
    let bank = worker_pool(workers)?.install(|| build_bank(&dataset, &weights, &config, cache.as_ref()))?;
    bank.save(&args.out)?;
    Provenance::new("cluster", workers)
        .input("manifest", &args.manifest)
        .input("weights", &args.weights)
        .config(&config)?
        .write(&args.out)?;
    info!("wrote prototypes for {} classes to {}", bank.classes.len(), args.out.display());
    Ok(())
}

fn cmd_genmap(args: &GenmapArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let workers = args.workers.count();
    let dataset = open_dataset(&args.manifest)?;
    let weights = read_weights(&args.weights)?;
    let kind: MapKind = args.kind.into();
    let bank = match (&args.bank, kind) {
        (Some(dir), _) => Some(
            PrototypeBank::load(dir).with_context(|| format!("loading bank {}", dir.display()))?,
        ),
        (None, MapKind::Lpcam) => bail!("--bank is required for --kind lpcam"),
        (None, MapKind::Cam) => None,
    };
    let request = MapRequest {
        weights: &weights,
        bank: bank.as_ref(),
        kind,
        mode: config.mode,
    };
    let index = batch_generate(&dataset, &request, workers, &args.out)?;
    let mut provenance = Provenance::new("genmap", workers)
        .input("manifest", &args.manifest)
        .input("weights", &args.weights);
    if let Some(dir) = &args.bank {
        provenance = provenance.input("bank", dir);
    }
    provenance
        .config(&serde_json::json!({ "kind": kind, "pipeline": config }))?
        .write(&args.out)?;
    info!("wrote maps for {} images to {}", index.images.len(), args.out.display());
    Ok(())
}

fn cmd_seed(args: &SeedArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let workers = args.workers.count();
    let (_, images) = read_archive(&args.maps).with_context(|| format!("reading {}", args.maps.display()))?;
    let seeds = worker_pool(workers)?.install(|| seeds_from_maps(&images, config.bg_threshold))?;
    write_seeds(&args.out, &seeds, config.bg_threshold, args.pgm)?;
    Provenance::new("seed", workers)
        .input("maps", &args.maps)
        .config(&serde_json::json!({ "pgm": args.pgm, "pipeline": config }))?
        .write(&args.out)?;
    info!("wrote {} seed masks to {}", seeds.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let workers = args.workers.count();
    let dataset = open_dataset(&args.manifest)?;
    let seeds = read_seeds(&args.seeds).with_context(|| format!("reading {}", args.seeds.display()))?;
    let report = worker_pool(workers)?.install(|| evaluate_seeds(&dataset, &seeds))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Provenance::new("eval", workers)
        .input("manifest", &args.manifest)
        .input("seeds", &args.seeds)
        .write(&args.out)?;
    println!("{report}");
    Ok(())
}

fn read_grid(path: &Path) -> Result<SweepGrid> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let grid = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(grid)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let workers = args.workers.count();
    let grid = read_grid(&args.grid)?;
    let dataset = open_dataset(&args.manifest)?;
    let weights = read_weights(&args.weights)?;
    let cache = cache_from_env();
    let outcome = worker_pool(workers)?
        .install(|| run_sweep(&dataset, &weights, &config, &grid, workers, cache.as_ref()))?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("sweep.csv");
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(std::io::BufWriter::new(file), &outcome.rows)?;
    Provenance::new("sweep", workers)
        .input("manifest", &args.manifest)
        .input("weights", &args.weights)
        .input("grid", &args.grid)
        .config(&serde_json::json!({ "base": config, "grid": grid }))?
        .write(&args.out)?;
    info!(
        "wrote {} rows to {} after {} clustering passes",
        outcome.rows.len(),
        path.display(),
        outcome.clustering_passes
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut scenario: Scenario = match &args.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Scenario::default(),
    };
    if let Some(v) = args.num_images {
        scenario.num_images = v;
    }
    if let Some(v) = args.num_classes {
        scenario.num_classes = v;
    }
    if let Some(v) = args.channels {
        scenario.channels = v;
    }
    if let Some(v) = args.height {
        scenario.height = v;
    }
    if let Some(v) = args.width {
        scenario.width = v;
    }
    if let Some(v) = args.noise {
        scenario.noise = v;
    }
    let data = synthesize(&scenario, args.seed)?;
    let manifest = write_synth(&args.out, &data)?;
    let mut provenance = Provenance::new("synth", 1);
    if let Some(path) = &args.scenario {
        provenance = provenance.input("scenario", path);
    }
    provenance
        .config(&serde_json::json!({ "seed": args.seed, "scenario": scenario }))?
        .write(&args.out)?;
    info!("wrote {} images; manifest at {}", scenario.num_images, manifest.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Validate(a) => return cmd_validate(a),
        Command::Cluster(a) => cmd_cluster(a)?,
        Command::Genmap(a) => cmd_genmap(a)?,
        Command::Seed(a) => cmd_seed(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
        Command::Synth(a) => cmd_synth(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
