use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use driftpolicy::bench::{DemoSet, TaskSpec};
use driftpolicy::config::RunConfig;
use driftpolicy::error::Error;
use driftpolicy::fsutil::{read, write_atomic};
use driftpolicy::gradcheck::{op_suite, pipeline_check};
use driftpolicy::nets::Architecture;
use driftpolicy::train::{config_hash, Method};

mod eval;
mod plot;
mod train;

pub use eval::eval;
pub use plot::export_plot;
pub use train::train;

#[derive(Debug, Parser)]
#[command(name = "ad3d", version, about = "Drift-trained single-step action generators on toy benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations for the configured task.
    GenData(GenDataArgs),
    /// Train a generator (or the flow baseline) on a demo set.
    Train(TrainArgs),
    /// Mode metrics and closed-loop rollouts for a checkpoint.
    Eval(EvalArgs),
    /// Merge run metrics into one tidy CSV.
    ExportPlot(PlotArgs),
    /// Finite-difference gradient checks for every op and the training loss.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (demos.json and manifest.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// demos.json or a directory holding one; generated from the task when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to config.toml of the run that wrote the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; defaults to report.json in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Euler steps for flow checkpoints (ignored by drift generators).
    #[arg(long)]
    pub nfe: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Run directories containing metrics.jsonl.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter entries perturbed per architecture in the loss check.
    #[arg(long, default_value_t = 300)]
    pub entries: usize,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum MethodArg {
    Ada3drift,
    NaiveDrift,
    Fm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ada3drift => Method::Ada3drift,
            MethodArg::NaiveDrift => Method::NaiveDrift,
            MethodArg::Fm => Method::Fm,
        }
    }
}

/// A computation finished but its result is numerically wrong.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(pub String);

/// Process exit code for a failure.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<NumericFailure>()) {
        return 4;
    }
    let Some(e) = err.chain().find_map(|e| e.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Checkpoint(driftpolicy::error::CheckpointError::ConfigMismatch { .. }) => 2,
        Error::Data(_) | Error::EmptyDataset | Error::Checkpoint(_) => 3,
        Error::NonFiniteLoss { .. } | Error::DegeneratePool(_) => 4,
        Error::Shape { .. } | Error::NonScalarLoss(_) => 4,
        Error::Io { .. } => 1,
    }
}

/// Worker threads for rollouts: `AD3D_THREADS` or the available cores.
pub fn threads() -> usize {
    std::env::var("AD3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub(crate) fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = read(path)?;
    let text = String::from_utf8(text).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
    RunConfig::from_toml(&text).with_context(|| format!("loading {}", path.display()))
}

/// Reads a demo set from a file or from `demos.json` inside a directory.
pub(crate) fn load_demos(path: &Path) -> anyhow::Result<DemoSet> {
    let file = if path.is_dir() { path.join("demos.json") } else { path.to_path_buf() };
    let bytes = read(&file)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", file.display())))?;
    DemoSet::from_json(&text).with_context(|| format!("loading {}", file.display()))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub(crate) fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

fn task_hash(task: &TaskSpec) -> u64 {
    config_hash(&serde_json::to_string(task).expect("task serializes"))
}

#[derive(Serialize)]
struct DataManifest<'a> {
    command: &'static str,
    seed: u64,
    task_hash: String,
    contexts: usize,
    demos: usize,
    file: &'a str,
}

pub fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    let set = cfg.task.generate(cfg.seed)?;
    let mut text = set.to_json()?;
    text.push('\n');
    write_atomic(&out.join("demos.json"), text.as_bytes())?;
    write_json(
        &out.join("manifest.json"),
        &DataManifest {
            command: "gen-data",
            seed: cfg.seed,
            task_hash: hex(task_hash(&cfg.task)),
            contexts: set.contexts.len(),
            demos: set.contexts.iter().map(|c| c.demos.len()).sum(),
            file: "demos.json",
        },
    )?;
    eprintln!(
        "wrote {} contexts to {}",
        set.contexts.len(),
        out.join("demos.json").display()
    );
    Ok(())
}

pub fn grad_check(args: GradCheckArgs) -> anyhow::Result<()> {
    if args.trials == 0 {
        return Err(Error::Config("--trials must be positive".into()).into());
    }
    let mut failed = Vec::new();
    for (name, r) in op_suite(args.trials, args.seed)? {
        println!(
            "{:<5} {name:<14} entries {:>6}  max rel {:.2e}  max abs {:.2e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.checked,
            r.max_rel_err,
            r.max_abs_err
        );
        if !r.passed() {
            failed.push(name.to_string());
        }
    }
    for kind in [Architecture::Mlp, Architecture::Unet1d] {
        let r = pipeline_check(kind, args.seed, args.entries)?;
        let name = format!("loss/{kind:?}").to_lowercase();
        println!(
            "{:<5} {name:<14} entries {:>6}  max rel {:.2e}  max abs {:.2e}",
            if r.passed() { "ok" } else { "FAIL" },
            r.checked,
            r.max_rel_err,
            r.max_abs_err
        );
        if !r.passed() {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        bail!(NumericFailure(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
