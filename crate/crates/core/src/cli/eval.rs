use std::path::{Path, PathBuf};

use serde::Serialize;

use driftpolicy::bench::{evaluate_modes, evaluate_rollouts, ChunkPolicy, FlowPolicy, ModeReport, RolloutSummary, TaskSpec};
use driftpolicy::error::Error;
use driftpolicy::fsutil::read;
use driftpolicy::nets::NfeCounter;
use driftpolicy::train::{Checkpoint, Model, Trainer};

use super::train::RunManifest;
use super::{load_config, load_demos, threads, write_json, EvalArgs};

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub epoch: u64,
    pub seed: u64,
    pub nfe_per_chunk: f64,
    /// Network evaluations over mode sampling and rollouts together.
    pub total_nfe: u64,
    pub modes: ModeReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rollouts: Option<RolloutSummary>,
}

/// The run directory holding `checkpoints/<file>`.
fn run_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn recorded_data(run: &Path) -> Option<PathBuf> {
    let bytes = read(&run.join("manifest.json")).ok()?;
    let m: RunManifest = serde_json::from_slice(&bytes).ok()?;
    m.data
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let run = run_dir(&args.checkpoint);
    let mut cfg = load_config(&args.config.clone().unwrap_or_else(|| run.join("config.toml")))?;
    if let Some(k) = args.nfe {
        if k == 0 {
            return Err(Error::Config("--nfe must be positive".into()).into());
        }
        cfg.eval.nfe = k;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let data = match args.data.clone().or_else(|| recorded_data(&run)) {
        Some(p) => load_demos(&p)?,
        None => cfg.task.generate(cfg.seed)?,
    };
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let trainer = Trainer::<f64>::resume(&cfg.train_config(), &cfg.generator, &data, &ckpt, cfg.identity_hash())?;

    let flow;
    let policy: &dyn ChunkPolicy = match &trainer.state.model {
        Model::Drift(g) => {
            if args.nfe.is_some() {
                eprintln!("note: --nfe only applies to flow checkpoints; drift generators use one evaluation");
            }
            g
        }
        Model::Flow(net) => {
            flow = FlowPolicy {
                net,
                steps: cfg.eval.nfe,
            };
            &flow
        }
    };

    let nfe = NfeCounter::new();
    let counts = evaluate_modes(policy, &data, cfg.eval.samples, cfg.eval.radius, seed, &nfe)?;
    let mode_nfe = nfe.get();
    let rollouts = match &cfg.task {
        TaskSpec::Obstacle(task) if cfg.eval.rollouts > 0 => {
            Some(evaluate_rollouts(policy, task, cfg.eval.rollouts, seed, threads())?.0)
        }
        _ => None,
    };
    let report = EvalReport {
        method: cfg.method.name().into(),
        epoch: ckpt.epoch,
        seed,
        nfe_per_chunk: mode_nfe as f64 / counts.samples.max(1) as f64,
        total_nfe: mode_nfe + rollouts.as_ref().map_or(0, |r| r.total_nfe),
        modes: counts.report(),
        rollouts,
    };
    let out = args.out.unwrap_or_else(|| run.join("report.json"));
    write_json(&out, &report)?;
    let m = &report.modes;
    eprintln!(
        "{}: capture {:.3}  collapse {:.3}  nfe/chunk {}",
        report.method, m.capture_fraction, m.collapse_fraction, report.nfe_per_chunk
    );
    if let Some(r) = &report.rollouts {
        eprintln!(
            "rollouts {}: collision {:.3}  success {:.3}",
            r.rollouts, r.collision_rate, r.success_rate
        );
    }
    Ok(())
}
