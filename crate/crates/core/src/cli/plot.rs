use std::collections::HashMap;
use std::path::Path;

use anyhow::Context;

use driftpolicy::error::Error;
use driftpolicy::fsutil::{read, write_atomic};
use driftpolicy::train::EpochMetrics;

use super::PlotArgs;

/// Directory name, or the full path when two runs share a name.
fn labels(runs: &[impl AsRef<Path>]) -> Vec<String> {
    let short: Vec<String> = runs
        .iter()
        .map(|r| {
            let p = r.as_ref();
            p.file_name()
                .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
        })
        .collect();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for s in &short {
        *seen.entry(s).or_default() += 1;
    }
    short
        .iter()
        .zip(runs)
        .map(|(s, r)| if seen[s.as_str()] > 1 { r.as_ref().display().to_string() } else { s.clone() })
        .collect()
}

/// Tidy `run,epoch,metric,value` rows; values use the shortest decimal that
/// parses back to the same f64.
pub fn render_csv(runs: &[impl AsRef<Path>]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "epoch", "metric", "value"])?;
    for (run, label) in runs.iter().zip(labels(runs)) {
        let path = run.as_ref().join("metrics.jsonl");
        if !path.exists() {
            return Err(Error::Data(format!("no metrics at {}", path.display())).into());
        }
        let text = String::from_utf8(read(&path)?).context("metrics.jsonl is not UTF-8")?;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let m: EpochMetrics = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
            let epoch = m.epoch.to_string();
            for (name, value) in m.series() {
                w.write_record([label.as_str(), &epoch, &name, &value.to_string()])?;
            }
        }
    }
    Ok(w.into_inner()?)
}

pub fn export_plot(args: PlotArgs) -> anyhow::Result<()> {
    let bytes = render_csv(&args.runs)?;
    match &args.out {
        Some(p) => write_atomic(p, &bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().lock().write_all(&bytes)?;
        }
    }
    Ok(())
}
