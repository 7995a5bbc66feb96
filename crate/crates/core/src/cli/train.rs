use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use driftpolicy::error::Error;
use driftpolicy::fsutil::{read, write_atomic};
use driftpolicy::train::{Checkpoint, EpochMetrics, Trainer};

use super::{hex, load_config, load_demos, write_json, TrainArgs};

/// Written last; the only file with wall-clock content.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    /// Demo file the run trained on; absent when generated from the task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_from: Option<PathBuf>,
    pub wall_ms: u128,
}

pub fn checkpoint_path(run: &Path, epoch: usize) -> PathBuf {
    run.join("checkpoints").join(format!("epoch_{epoch:06}.ckpt"))
}

fn save_metrics(path: &Path, lines: &[String]) -> anyhow::Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Metric rows for epochs before `upto`, read from the run that wrote the
/// checkpoint being resumed.
fn earlier_metrics(path: &Path, upto: usize) -> anyhow::Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Data(format!("cannot resume: {} is missing", path.display())).into());
    }
    let text = String::from_utf8(read(path)?).context("metrics.jsonl is not UTF-8")?;
    let mut kept = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: EpochMetrics =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.epoch < upto {
            kept.push(line.to_string());
        }
    }
    if kept.len() != upto {
        return Err(Error::Data(format!(
            "{} holds {} rows before epoch {upto}; cannot resume its history",
            path.display(),
            kept.len()
        ))
        .into());
    }
    Ok(kept)
}

pub fn train(args: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(m) = args.method {
        cfg.method = m.into();
    }
    if let Some(e) = args.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    let run = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no run directory: pass --out or set `out`".into()))?;

    let data = match &args.data {
        Some(p) => load_demos(p)?,
        None => cfg.task.generate(cfg.seed)?,
    };
    if data.shape() != cfg.task.shape() {
        return Err(Error::Data(format!(
            "demo set has shape {:?} but the config expects {:?}",
            data.shape(),
            cfg.task.shape()
        ))
        .into());
    }

    let hash = cfg.identity_hash();
    let train_cfg = cfg.train_config();
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            Trainer::<f64>::resume(&train_cfg, &cfg.generator, &data, &ckpt, hash)?
        }
        None => Trainer::<f64>::new(&train_cfg, &cfg.generator, &data, cfg.seed, hash)?,
    };
    if args.resume.is_some() && trainer.state.seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, config says {}",
            trainer.state.seed, cfg.seed
        ))
        .into());
    }

    let mut lines = match &args.resume {
        Some(p) => {
            let source = p.parent().and_then(Path::parent).unwrap_or(Path::new("."));
            earlier_metrics(&source.join("metrics.jsonl"), trainer.state.epoch)?
        }
        None => Vec::new(),
    };
    write_atomic(&run.join("config.toml"), cfg.to_toml().as_bytes())?;
    let metrics_path = run.join("metrics.jsonl");

    let epochs = cfg.schedule.epochs;
    let report_every = (epochs / 10).max(1);
    while !trainer.is_done() {
        let m = match trainer.run_epoch() {
            Ok(m) => m,
            Err(e) => {
                save_metrics(&metrics_path, &lines)?;
                return Err(e.into());
            }
        };
        lines.push(serde_json::to_string(&m)?);
        let done = trainer.state.epoch;
        if done % report_every == 0 || done == epochs {
            eprintln!("epoch {done}/{epochs}  loss {:.6}", m.l_total);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            trainer.state.to_checkpoint().save(&checkpoint_path(&run, done))?;
            save_metrics(&metrics_path, &lines)?;
        }
    }
    trainer
        .state
        .to_checkpoint()
        .save(&run.join("checkpoints").join("final.ckpt"))?;
    save_metrics(&metrics_path, &lines)?;
    write_json(
        &run.join("manifest.json"),
        &RunManifest {
            command: "train".into(),
            method: cfg.method.name().into(),
            seed: cfg.seed,
            config_hash: hex(hash),
            epochs,
            data: args.data.as_ref().map(|p| p.canonicalize().unwrap_or_else(|_| p.clone())),
            resumed_from: args.resume.clone(),
            wall_ms: started.elapsed().as_millis(),
        },
    )?;
    eprintln!("run written to {}", run.display());
    Ok(())
}
