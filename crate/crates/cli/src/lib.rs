//! Command implementations behind the `lcat` binary.
//!
//! Every failure is reported as one line, `error[CODE]: message`, where
//! `CODE` is one of the `E_*` constants below.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lcat_core::checkpoint::Checkpoint;
use lcat_core::data::{split_counts, Manifest};
use lcat_core::eval::{pgd_step_sweep, sweep_csv};
use lcat_core::rng::RngState;
use lcat_core::schedule::phase_pattern;
use lcat_core::train::{init_state, run_epoch, EpochRecord};
use lcat_core::{evaluate, load_fsb, save_fsb, DatasetStore, Error, Phase, RunConfig, SyntheticSpec};

pub const E_USAGE: &str = "E_USAGE";
pub const E_CONFIG: &str = "E_CONFIG";
pub const E_IO: &str = "E_IO";
pub const E_DATA: &str = "E_DATA";
pub const E_NUMERIC: &str = "E_NUMERIC";
pub const E_CHECKPOINT: &str = "E_CHECKPOINT";
pub const E_EXISTS: &str = "E_EXISTS";
pub const E_LOCKED: &str = "E_LOCKED";
pub const E_INCOMPLETE: &str = "E_INCOMPLETE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.message.replace(['\n', '\r'], " ");
        write!(f, "error[{}]: {}", self.code, one_line)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidShape { .. }
            | Error::ShapeMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Json(_) => E_CONFIG,
            Error::Io(_) => E_IO,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::BadSplitCode { .. }
            | Error::PixelOutOfRange { .. }
            | Error::TrailingBytes(_)
            | Error::InsufficientData(_) => E_DATA,
            Error::Checkpoint(_) => E_CHECKPOINT,
            Error::NonFinite(_) | Error::Singular { .. } | Error::NonScalarLoss(_) => E_NUMERIC,
        };
        CliError::new(code, e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(E_IO, format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "lcat",
    version,
    about = "Cross adversarial meta-training for few-shot classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic few-shot dataset file.
    GenData(GenDataArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Clean and robust accuracy of a trained model.
    Eval(EvalArgs),
    /// Robust accuracy across PGD step budgets.
    Sweep(SweepArgs),
    /// Compare adversarial compute of two finished runs.
    Audit(AuditArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "LCAT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub images_per_class: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    /// Episode width the test split must support.
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// JSON run configuration; defaults to the desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Method preset: nat, at, aq, scat, lcat, lcat_trades, aq_trades.
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset file (overrides data.path).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, env = "LCAT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub attack_eps: Option<f64>,
    #[arg(long)]
    pub attack_steps: Option<usize>,
    #[arg(long)]
    pub meta_batches: Option<usize>,
    /// Also checkpoint after every schedule cycle.
    #[arg(long)]
    pub cycle_checkpoints: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    /// Run directory or checkpoint file.
    pub target: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, env = "LCAT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub attack_eps: Option<f64>,
    #[arg(long)]
    pub attack_steps: Option<usize>,
    /// Report path; defaults to `report.json` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SweepArgs {
    /// Run directory or checkpoint file.
    pub target: PathBuf,
    /// Comma-separated PGD step budgets.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub steps: Vec<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, env = "LCAT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub attack_eps: Option<f64>,
    /// CSV path; defaults to `sweep.csv` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct AuditArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
const LOCK_FILE: &str = ".lock";

/// A run directory held under its lockfile for the lifetime of the value.
#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    /// Prepare `root` for a new run. An existing run is refused unless
    /// `force`, in which case its files are removed.
    pub fn create(root: &Path, force: bool) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let dir = Self::lock(root)?;
        let owned = [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, REPORT_FILE, SWEEP_FILE];
        let mut existing: Vec<PathBuf> = owned.iter().map(|f| root.join(f)).filter(|p| p.exists()).collect();
        existing.extend(dir.cycle_checkpoints()?);
        if !existing.is_empty() {
            if !force {
                return Err(CliError::new(
                    E_EXISTS,
                    format!("{} already holds a run; pass --force to overwrite", root.display()),
                ));
            }
            for p in existing {
                fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
            }
        }
        Ok(dir)
    }

    /// Lock an existing run directory.
    pub fn open(root: &Path) -> CliResult<Self> {
        if !root.is_dir() {
            return Err(CliError::new(
                E_IO,
                format!("{} is not a run directory", root.display()),
            ));
        }
        Self::lock(root)
    }

    fn lock(root: &Path) -> CliResult<Self> {
        let lock = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunDirectory {
                    root: root.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                E_LOCKED,
                format!(
                    "{} is in use by another command (remove {} if stale)",
                    root.display(),
                    lock.display()
                ),
            )),
            Err(e) => Err(io_err(&lock, e)),
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    fn cycle_checkpoints(&self) -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| io_err(&self.root, e))? {
            let p = entry.map_err(|e| io_err(&self.root, e))?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("checkpoint-e") && name.ends_with(".bin") {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }
}

impl Drop for RunDirectory {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK_FILE));
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_dataset(path: Option<&Path>) -> CliResult<DatasetStore> {
    let path = path.ok_or_else(|| CliError::new(E_USAGE, "no dataset: pass --data or set data.path in the config"))?;
    if !path.exists() {
        return Err(CliError::new(E_IO, format!("dataset {} not found", path.display())));
    }
    Ok(load_fsb(path)?)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<String> {
    if args.out.exists() && !args.force {
        return Err(CliError::new(
            E_EXISTS,
            format!("{} exists; pass --force to overwrite", args.out.display()),
        ));
    }
    let (train, val, test) = split_counts(args.classes, args.val_fraction, args.test_fraction);
    if test < args.way {
        return Err(CliError::new(
            E_CONFIG,
            format!(
                "{} classes with test fraction {} leave {test} test classes, fewer than way={}",
                args.classes, args.test_fraction, args.way
            ),
        ));
    }
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        num_classes: args.classes,
        images_per_class: args.images_per_class,
        height: args.size,
        width: args.size,
        channels: args.channels,
        noise_std: args.noise.unwrap_or(defaults.noise_std),
        seed: args.seed,
        test_fraction: args.test_fraction,
        val_fraction: args.val_fraction,
    };
    let store = lcat_core::generate_synthetic(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_fsb(&store, &args.out)?;
    let manifest = serde_json::to_string_pretty(&Manifest::describe(&store)).map_err(Error::from)?;
    write_file(&manifest_path(&args.out), manifest.as_bytes())?;
    Ok(format!(
        "wrote {} images of {}x{}x{} in {} classes (train {train} / val {val} / test {test}) to {}",
        store.len(),
        spec.channels,
        spec.height,
        spec.width,
        store.num_classes(),
        args.out.display()
    ))
}

pub fn manifest_path(fsb: &Path) -> PathBuf {
    let mut name = fsb.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    fsb.with_file_name(name)
}

/// Effective configuration of a train invocation: config file (or desk
/// preset), then preset, then individual flags.
pub fn merged_train_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json(&read_to_string(p)?)?,
        None => RunConfig::desk(),
    };
    if let Some(name) = &args.preset {
        cfg.schedule = cfg.schedule.with_preset(name)?;
    }
    if let Some(p) = &args.data {
        cfg.data.path = Some(p.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(m) = args.meta_batches {
        cfg.schedule.meta_batches_per_epoch = m;
    }
    if let Some(eps) = args.attack_eps {
        cfg.train_attack = cfg.train_attack.scaled(eps);
    }
    if let Some(steps) = args.attack_steps {
        cfg.train_attack.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_value(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(cfg).map_err(Error::from)?)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let cfg = merged_train_config(args)?;
    let dataset = load_dataset(cfg.data.path.as_deref())?;
    let [c, h, w] = dataset.image_dims();
    let net = &cfg.model.net;
    if (net.in_channels, net.height, net.width) != (c, h, w) {
        return Err(CliError::new(
            E_CONFIG,
            format!(
                "model expects {}x{}x{} images, dataset has {c}x{h}x{w}",
                net.in_channels, net.height, net.width
            ),
        ));
    }
    let dir = RunDirectory::create(&args.out, args.force)?;
    write_file(&dir.path(CONFIG_FILE), cfg.to_json()?.as_bytes())?;

    let metrics_path = dir.path(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?);
    let train = cfg.train_config();
    let echo = config_value(&cfg)?;
    let mut state = init_state::<f32>(&train, cfg.seed)?;
    let cycle = cfg.schedule.cycle();
    while state.epoch < cfg.schedule.epochs {
        let record = run_epoch(&mut state, &train, &dataset);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let _ = metrics.flush();
                return Err(e.into());
            }
        };
        let line = serde_json::to_string(&record).map_err(Error::from)?;
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| io_err(&metrics_path, e))?;
        if args.cycle_checkpoints && state.epoch % cycle == 0 {
            let ck = Checkpoint::new(
                &cfg.model,
                &state.params,
                echo.clone(),
                state.epoch,
                Some(RngState::capture(&state.rng)),
            );
            ck.save(dir.path(&format!("checkpoint-e{:04}.bin", state.epoch)))?;
        }
    }
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;
    let ck = Checkpoint::new(
        &cfg.model,
        &state.params,
        echo,
        state.epoch,
        Some(RngState::capture(&state.rng)),
    );
    ck.save(dir.path(CHECKPOINT_FILE))?;
    Ok(format!(
        "trained {} epochs ({}) into {}: {} adversarial meta-batches, {} attacked images",
        state.epoch,
        phase_pattern(&cfg.schedule),
        args.out.display(),
        state.adv_batches,
        state.stats.attacked_images
    ))
}

/// Checkpoint and run configuration behind an eval/sweep target.
struct Target {
    checkpoint: Checkpoint,
    config: RunConfig,
    dir: Option<RunDirectory>,
}

fn open_target(target: &Path) -> CliResult<Target> {
    let (ck_path, dir) = if target.is_dir() {
        (target.join(CHECKPOINT_FILE), Some(RunDirectory::open(target)?))
    } else {
        (target.to_path_buf(), None)
    };
    if !ck_path.exists() {
        return Err(CliError::new(
            E_CHECKPOINT,
            format!("checkpoint {} not found", ck_path.display()),
        ));
    }
    let checkpoint = Checkpoint::load(&ck_path)?;
    let config: RunConfig = serde_json::from_value(checkpoint.header.config.clone())
        .map_err(|e| CliError::new(E_CHECKPOINT, format!("checkpoint config echo is not a run config: {e}")))?;
    Ok(Target {
        checkpoint,
        config,
        dir,
    })
}

fn output_path(target: &Target, explicit: &Option<PathBuf>, default_name: &str) -> CliResult<PathBuf> {
    match (explicit, &target.dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.path(default_name)),
        (None, None) => Err(CliError::new(E_USAGE, "checkpoint targets need --out")),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let target = open_target(&args.target)?;
    let mut cfg = target.config.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(eps) = args.attack_eps {
        cfg.eval_attack = cfg.eval_attack.scaled(eps);
    }
    if let Some(steps) = args.attack_steps {
        cfg.eval_attack.steps = steps;
    }
    let data = args.data.clone().or(cfg.data.path.clone());
    let dataset = load_dataset(data.as_deref())?;
    let out = output_path(&target, &args.out, REPORT_FILE)?;
    let report = evaluate(
        &target.checkpoint.header.model,
        &target.checkpoint.params,
        &dataset,
        &cfg.eval_config(),
    )?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&out, format!("{json}\n").as_bytes())?;
    Ok(format!(
        "{}  [{} episodes, {}-step PGD]",
        report.table_line(),
        report.episodes,
        report.adv_eval_steps
    ))
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<String> {
    if args.steps.is_empty() {
        return Err(CliError::new(E_USAGE, "--steps needs at least one step count"));
    }
    let target = open_target(&args.target)?;
    let mut cfg = target.config.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(eps) = args.attack_eps {
        cfg.eval_attack = cfg.eval_attack.scaled(eps);
    }
    let data = args.data.clone().or(cfg.data.path.clone());
    let dataset = load_dataset(data.as_deref())?;
    let out = output_path(&target, &args.out, SWEEP_FILE)?;
    let rows = pgd_step_sweep(
        &target.checkpoint.header.model,
        &target.checkpoint.params,
        &dataset,
        &args.steps,
        &cfg.eval_config(),
    )?;
    let csv = sweep_csv(&rows);
    write_file(&out, csv.as_bytes())?;
    Ok(csv.trim_end().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    #[serde(rename = "adv_batches_A")]
    pub adv_batches_a: u64,
    #[serde(rename = "adv_batches_B")]
    pub adv_batches_b: u64,
    /// `A / B`; absent when B ran no adversarial batches.
    pub ratio: Option<f64>,
    #[serde(rename = "adv_epoch_fraction_A")]
    pub adv_epoch_fraction_a: f64,
    #[serde(rename = "adv_epoch_fraction_B")]
    pub adv_epoch_fraction_b: f64,
}

/// Metric log of a finished run; errors unless it holds one record for
/// every configured epoch, in order.
pub fn read_complete_log(run: &Path) -> CliResult<Vec<EpochRecord>> {
    let cfg = RunConfig::from_json(&read_to_string(&run.join(CONFIG_FILE))?)?;
    let text = read_to_string(&run.join(METRICS_FILE))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let r: EpochRecord = serde_json::from_str(line)
            .map_err(|e| CliError::new(E_INCOMPLETE, format!("{} line {}: {e}", run.display(), i + 1)))?;
        if r.epoch != i {
            return Err(CliError::new(
                E_INCOMPLETE,
                format!("{} line {} holds epoch {}", run.display(), i + 1, r.epoch),
            ));
        }
        records.push(r);
    }
    if records.len() != cfg.schedule.epochs {
        return Err(CliError::new(
            E_INCOMPLETE,
            format!(
                "{} logged {} of {} epochs",
                run.display(),
                records.len(),
                cfg.schedule.epochs
            ),
        ));
    }
    Ok(records)
}

pub fn audit(a: &[EpochRecord], b: &[EpochRecord]) -> AuditReport {
    let batches = |log: &[EpochRecord]| log.last().map_or(0, |r| r.adv_batches_cum);
    let fraction = |log: &[EpochRecord]| {
        if log.is_empty() {
            0.0
        } else {
            log.iter().filter(|r| r.phase == Phase::Adv).count() as f64 / log.len() as f64
        }
    };
    let (na, nb) = (batches(a), batches(b));
    AuditReport {
        adv_batches_a: na,
        adv_batches_b: nb,
        ratio: (nb > 0).then(|| na as f64 / nb as f64),
        adv_epoch_fraction_a: fraction(a),
        adv_epoch_fraction_b: fraction(b),
    }
}

pub fn cmd_audit(args: &AuditArgs) -> CliResult<String> {
    let a = read_complete_log(&args.run_a)?;
    let b = read_complete_log(&args.run_b)?;
    Ok(serde_json::to_string_pretty(&audit(&a, &b)).map_err(Error::from)?)
}

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Audit(a) => cmd_audit(a),
    }
}
