//! Run configuration: one TOML document describing task, network, training
//! and evaluation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bench::TaskSpec;
use crate::drift::DEFAULT_TEMPERATURES;
use crate::error::{Error, Result};
use crate::flow::DEFAULT_STEPS;
use crate::nets::GeneratorConfig;
use crate::train::{config_hash, Method, OptimizerConfig, ScheduleConfig, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Chunks drawn for mode metrics, spread over contexts.
    pub samples: usize,
    pub radius: f64,
    /// Euler steps for the flow baseline.
    pub nfe: usize,
    /// Closed-loop rollouts on trajectory tasks.
    pub rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            radius: 0.25,
            nfe: DEFAULT_STEPS,
            rollouts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_temperatures() -> Vec<f64> {
    DEFAULT_TEMPERATURES.to_vec()
}

fn default_batch() -> usize {
    32
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            method: Method::default(),
            out: None,
            temperatures: default_temperatures(),
            batch_size: default_batch(),
            checkpoint_every: 0,
            task: TaskSpec::default(),
            generator: GeneratorConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The parts of a run that determine training, hashed into checkpoints.
#[derive(Serialize)]
struct Identity<'a> {
    method: Method,
    task: &'a TaskSpec,
    generator: &'a GeneratorConfig,
    train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            temperatures: self.temperatures.clone(),
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::InvalidArgument(m) | Error::Config(m) => Error::Config(m),
            other => other,
        };
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.task.validate().map_err(as_config)?;
        self.generator.validate(&self.task.shape()).map_err(as_config)?;
        self.train_config().validate().map_err(as_config)?;
        let e = &self.eval;
        if e.samples == 0 || e.nfe == 0 || !(e.radius > 0.0) {
            return Err(Error::Config("eval.samples, eval.nfe and eval.radius must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes training (not seed, output or eval).
    pub fn identity_hash(&self) -> u64 {
        let id = Identity {
            method: self.method,
            task: &self.task,
            generator: &self.generator,
            train: self.train_config(),
        };
        config_hash(&serde_json::to_string(&id).expect("config serializes"))
    }
}
