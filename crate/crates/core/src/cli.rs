//! Command-line entry point: `agnet <synth|train|extract|eval|gradcheck>`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_config, parse_assignment, Config, SEED_KEYS};
use crate::data::{generate_synthetic, load_images, load_manifest, save_manifest, split_train_test, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::io::{load_features, save_features, save_report};
use crate::evaluation::{evaluate_detailed, extract_features_from, vehicleid_protocol, veri_protocol, EvalOptions, Protocol};
use crate::gradcheck::run_all;
use crate::model::checkpoint::Checkpoint;
use crate::model::Model;
use crate::training::{fit_from, FitOutputs, Trainer};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Name of the resolved-config echo written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved";

pub const OUT_ENV: &str = "AGNET_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, ValueEnum)]
pub enum Command {
    /// Render a synthetic dataset (PNG images plus manifest.csv).
    Synth,
    /// Train on data.manifest.
    Train,
    /// Write fused features of data.manifest images.
    Extract,
    /// Rank and score feature files.
    Eval,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Extract => "extract",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "agnet", version, about = "Attribute-guided vehicle re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run directory (must be new or empty). Defaults to a fresh
    /// `<command>-NNN` under $AGNET_OUT, or under `runs`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Sets every seed key (model, synth, train, eval, gradcheck).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Overrides one config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<(String, String)>,
}

impl RunConfig {
    /// Defaults, file, `--seed`, then `--set` overrides in order.
    pub fn resolve(&self) -> Result<Config> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        if let Some(seed) = self.seed {
            overrides.extend(SEED_KEYS.iter().map(|k| (k.to_string(), seed.to_string())));
        }
        overrides.extend(self.overrides.iter().cloned());
        load_config(self.config_path.as_deref(), &overrides)
    }
}

fn parse_args<I, T>(argv: I) -> std::result::Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let mut overrides = Vec::with_capacity(cli.set.len());
    for s in &cli.set {
        let pair = parse_assignment(s).map_err(|e| clap::Error::raw(clap::error::ErrorKind::ValueValidation, format!("--set: {e}\n")))?;
        overrides.push(pair);
    }
    Ok(RunConfig {
        command: cli.command,
        config_path: cli.config,
        out: cli.out,
        seed: cli.seed,
        overrides,
    })
}

/// Runs one command and returns the process exit code: 0 on success, 2 for
/// usage errors, 1 for configuration and runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let rc = match parse_args(argv) {
        Ok(rc) => rc,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&rc) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolves the config, creates the run directory, echoes the resolved
/// config into it and dispatches. Returns the run directory.
pub fn execute(rc: &RunConfig) -> Result<PathBuf> {
    let cfg = rc.resolve()?;
    let dir = prepare_run_dir(rc.out.as_deref(), rc.command.name())?;
    fs::write(dir.join(RESOLVED_CONFIG), cfg.to_text())?;
    match rc.command {
        Command::Synth => synth(&cfg, &dir),
        Command::Train => train(&cfg, &dir),
        Command::Extract => extract(&cfg, &dir),
        Command::Eval => eval(&cfg, &dir),
        Command::Gradcheck => gradcheck(&cfg, &dir),
    }?;
    Ok(dir)
}

/// `out` itself when given (it must be new or empty), else the first unused
/// `<command>-NNN` under `$AGNET_OUT` or `runs`.
pub fn prepare_run_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    if let Some(dir) = out {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Config(format!("--out {} is not empty", dir.display())));
        }
        fs::create_dir_all(dir)?;
        return Ok(dir.to_path_buf());
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&root)?;
    for n in 1.. {
        let dir = root.join(format!("{command}-{n:03}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory numbering is unbounded")
}

fn synth(cfg: &Config, dir: &Path) -> Result<()> {
    let spec = cfg.synthetic()?;
    let data = generate_synthetic(&spec)?;
    data.write(dir)?;
    let fraction: f64 = cfg.parse("synth.train_fraction")?;
    if fraction > 0.0 {
        let (train, test) = split_train_test(&data.dataset, fraction, spec.seed)?;
        save_manifest(&dir.join("train.csv"), train.records())?;
        save_manifest(&dir.join("test.csv"), test.records())?;
    }
    println!("wrote {} images of {} identities", data.dataset.len(), spec.num_identities);
    Ok(())
}

struct LoadedData {
    dataset: Dataset,
    root: PathBuf,
}

fn load_data(cfg: &Config) -> Result<LoadedData> {
    let manifest = cfg.require_path("data.manifest")?;
    let dataset = load_manifest(&manifest)?;
    let root = cfg
        .path("data.root")
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
    Ok(LoadedData { dataset, root })
}

fn label_spaces(ds: &Dataset) -> Option<(usize, usize, usize)> {
    Some((ds.num_identities, ds.num_colors, ds.num_types))
}

fn train(cfg: &Config, dir: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let train_cfg = cfg.train()?;
    let trainer = match cfg.path("train.resume") {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            log::info!("resuming from {} after epoch {}", p.display(), ckpt.epoch);
            Trainer::resume(&ckpt, train_cfg)?
        }
        None => Trainer::new(Model::new(cfg.model(label_spaces(&data.dataset))?)?, train_cfg)?,
    };
    let side = trainer.model.config().image_side();
    let images = load_images(&data.dataset, &data.root, side)?;
    let outputs = FitOutputs {
        checkpoint_dir: Some(dir.to_path_buf()),
        log_path: Some(dir.join("train_log.csv")),
    };
    let result = fit_from(trainer, &data.dataset, &images, &outputs)?;
    if let Some(last) = result.log.last() {
        println!("trained {} steps, final loss {:.6}", last.step, last.loss_total);
    }
    Ok(())
}

fn extract(cfg: &Config, dir: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let model = match cfg.path("extract.checkpoint") {
        Some(p) => Checkpoint::load(&p)?.to_model(None)?,
        None => {
            log::warn!("extract.checkpoint is empty; using an untrained model");
            Model::new(cfg.model(label_spaces(&data.dataset))?)?
        }
    };
    let images = load_images(&data.dataset, &data.root, model.config().image_side())?;
    let features = extract_features_from(&model, &images, data.dataset.records(), &cfg.fusion()?, cfg.feature_source()?)?;
    save_features(&dir.join("features.agnf"), &features)?;
    println!("wrote {} x {} features", features.len(), features.dim());
    Ok(())
}

fn eval(cfg: &Config, dir: &Path) -> Result<()> {
    let protocol = cfg.protocol()?;
    let options = EvalOptions {
        protocol,
        max_rank: cfg.parse_opt("eval.max_rank")?,
        normalize: cfg.parse("eval.normalize")?,
        seed: cfg.parse("eval.seed")?,
    };
    let (queries, gallery) = match (cfg.path("eval.query_features"), cfg.path("eval.gallery_features")) {
        (Some(q), Some(g)) => (load_features(&q)?, load_features(&g)?),
        (None, None) => {
            let pool = load_features(&cfg.require_path("eval.features")?)?;
            let split = match protocol {
                Protocol::VeRi => veri_protocol(&pool.meta, options.seed)?,
                Protocol::VehicleId => vehicleid_protocol(&pool.meta, cfg.parse("eval.gallery_size")?, options.seed)?,
            };
            (pool.select(&split.queries)?, pool.select(&split.gallery)?)
        }
        _ => {
            return Err(Error::Config(
                "eval.query_features and eval.gallery_features must be set together".into(),
            ))
        }
    };
    let (report, outcomes) = evaluate_detailed(&queries, &gallery, &options)?;
    save_report(dir, &report, &queries, &outcomes)?;
    println!(
        "{}: {} queries, {} gallery, mAP {:.4}, rank-1 {:.4}, rank-5 {:.4}",
        report.protocol,
        report.num_queries,
        report.num_gallery,
        report.map,
        report.rank(1),
        report.rank(5)
    );
    Ok(())
}

fn gradcheck(cfg: &Config, dir: &Path) -> Result<()> {
    let settings = cfg.gradcheck()?;
    let reports = run_all(&settings)?;
    let mut csv = fs::File::create(dir.join("gradcheck.csv"))?;
    writeln!(csv, "op,instances,max_relative_error")?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_relative_error < GRADCHECK_TOLERANCE;
        println!(
            "{:<26} instances={:<3} max_rel_err={:.3e} {}",
            r.op,
            r.instances,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        );
        writeln!(csv, "{},{},{:e}", r.op, r.instances, r.max_relative_error)?;
        if !ok {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("{} above {GRADCHECK_TOLERANCE:e}", failed.join(", "))))
    }
}
