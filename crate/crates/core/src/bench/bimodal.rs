use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ContextDemos, TaskSpec};
use crate::error::{Error, Result};
use crate::nets::IoShape;

/// Draws beyond this many standard deviations are redrawn.
pub const TRUNCATION: f64 = 5.0;

/// Per context, two modes at `±m` in every chunk coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimodalTask {
    pub magnitude: f64,
    pub sigma: f64,
    pub contexts: usize,
    pub demos_per_mode: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_steps: usize,
}

impl Default for BimodalTask {
    fn default() -> Self {
        Self {
            magnitude: 1.0,
            sigma: 0.05,
            contexts: 4,
            demos_per_mode: 10,
            horizon: 4,
            action_dim: 1,
            obs_steps: 2,
        }
    }
}

impl BimodalTask {
    pub const STATE_DIM: usize = 2;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.sigma > 0.0 && self.magnitude.is_finite()) {
            return bad(format!("bimodal sigma must be positive, got {}", self.sigma));
        }
        if 2.0 * self.magnitude <= 6.0 * self.sigma {
            return bad(format!(
                "bimodal modes overlap: 2m = {} must exceed 6σ = {}",
                2.0 * self.magnitude,
                6.0 * self.sigma
            ));
        }
        if self.contexts == 0 || self.demos_per_mode == 0 {
            return bad("bimodal task needs at least one context and one demo per mode".into());
        }
        if self.horizon == 0 || self.action_dim == 0 || self.obs_steps == 0 {
            return bad("bimodal horizon, action_dim and obs_steps must be positive".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> IoShape {
        IoShape {
            action_dim: self.action_dim,
            horizon: self.horizon,
            state_dim: Self::STATE_DIM,
            obs_steps: self.obs_steps,
        }
    }

    /// Mode centers `[−m·1, +m·1]`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let d = self.horizon * self.action_dim;
        vec![vec![-self.magnitude; d], vec![self.magnitude; d]]
    }

    /// Context `i` observes the unit-circle point at angle `2πi/n`, held
    /// for the whole window.
    pub fn context_state(&self, i: usize) -> Vec<Vec<f64>> {
        let a = std::f64::consts::TAU * i as f64 / self.contexts as f64;
        vec![vec![a.cos(), a.sin()]; self.obs_steps]
    }
}

pub fn gen_bimodal_demos(task: &BimodalTask, seed: u64) -> Result<Vec<ContextDemos>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = task.centers();
    let mut out = Vec::with_capacity(task.contexts);
    for id in 0..task.contexts {
        let mut demos = Vec::new();
        let mut modes = Vec::new();
        for (mode, c) in centers.iter().enumerate() {
            for _ in 0..task.demos_per_mode {
                let row = c
                    .iter()
                    .map(|&mu| loop {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        if e.abs() <= TRUNCATION {
                            break mu + task.sigma * e;
                        }
                    })
                    .collect();
                demos.push(row);
                modes.push(mode);
            }
        }
        out.push(ContextDemos {
            id,
            states: task.context_state(id),
            demos,
            modes,
            centers: centers.clone(),
        });
    }
    Ok(out)
}

impl From<BimodalTask> for TaskSpec {
    fn from(t: BimodalTask) -> Self {
        TaskSpec::Bimodal(t)
    }
}
