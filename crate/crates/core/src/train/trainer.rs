use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{drift_loss, mse_loss, pair_demos, total_loss};
use super::optim::{AdamW, OptimizerConfig};
use super::schedule::{schedule_weights, ScheduleConfig};
use crate::bench::DemoSet;
use crate::drift::{aggregate_multi_temp, DEFAULT_TEMPERATURES};
use crate::error::{CheckpointError, Error, Result};
use crate::flow::{fm_loss, FlowNet};
use crate::nets::{repeat_window, sample_noise, Generator, GeneratorConfig, IoShape, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

/// Temperature used by the single-temperature ablation.
pub const NAIVE_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Scheduled MSE → drift blend over several temperatures.
    #[default]
    Ada3drift,
    /// Unscheduled ablation: drift and MSE both at full weight from the
    /// first epoch, single temperature.
    NaiveDrift,
    /// Flow-matching baseline.
    Fm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ada3drift => "ada3drift",
            Method::NaiveDrift => "naive-drift",
            Method::Fm => "fm",
        }
    }

    /// `(w_drift, w_mse)` at epoch `e`.
    pub fn weights(self, e: usize, schedule: &ScheduleConfig) -> (f64, f64) {
        match self {
            Method::NaiveDrift => (1.0, 1.0),
            _ => schedule_weights(e as f64, schedule),
        }
    }

    pub fn temperatures(self, configured: &[f64]) -> Vec<f64> {
        match self {
            Method::NaiveDrift => vec![NAIVE_TEMPERATURE],
            _ => configured.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub temperatures: Vec<f64>,
    /// Noise draws per context per step.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ada3drift,
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be a non-empty list of positive values, got {:?}",
                self.temperatures
            )));
        }
        Ok(())
    }
}

/// The network being trained.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Drift(Generator<T>),
    Flow(FlowNet<T>),
}

impl<T: Scalar> Model<T> {
    pub fn new(method: Method, config: &GeneratorConfig, shape: &IoShape, seed: u64) -> Result<Self> {
        Ok(match method {
            Method::Fm => Model::Flow(FlowNet::new(config, shape, seed)?),
            _ => Model::Drift(Generator::new(config, shape, seed)?),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Model::Drift(g) => g.params(),
            Model::Flow(f) => f.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Drift(g) => g.params_mut(),
            Model::Flow(f) => f.params_mut(),
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: u64,
}

fn cast_tensor<T: Scalar>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast()
}

impl<T: Scalar> TrainState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.model.params();
        let mut tensors = Vec::with_capacity(3 * params.len());
        for (prefix, list) in [
            ("param", params.tensors()),
            ("adam_m", &self.optimizer.m[..]),
            ("adam_v", &self.optimizer.v[..]),
        ] {
            for (name, t) in params.names().iter().zip(list) {
                tensors.push((format!("{prefix}/{name}"), t.cast()));
            }
        }
        Checkpoint {
            config_hash: self.config_hash,
            seed: self.seed,
            epoch: self.epoch as u64,
            optimizer_step: self.optimizer.step,
            tensors,
        }
    }

    /// Overwrites parameters, moments and counters from `ckpt`. The
    /// checkpoint must come from a run with the same config hash.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config_hash {
            return Err(CheckpointError::ConfigMismatch {
                found: ckpt.config_hash,
                expected: self.config_hash,
            }
            .into());
        }
        let names = self.model.params().names().to_vec();
        let expected = 3 * names.len();
        if ckpt.tensors.len() != expected {
            return Err(CheckpointError::Malformed(format!(
                "{} tensors, expected {expected}",
                ckpt.tensors.len()
            ))
            .into());
        }
        let fetch = |prefix: &str, name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let key = format!("{prefix}/{name}");
            let t = ckpt
                .tensor(&key)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {key}")))?;
            if t.shape() != like.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "{key} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                ))
                .into());
            }
            Ok(cast_tensor(t))
        };
        let mut params = Vec::with_capacity(names.len());
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let like = &self.model.params().tensors()[i];
            params.push(fetch("param", name, like)?);
            m.push(fetch("adam_m", name, like)?);
            v.push(fetch("adam_v", name, like)?);
        }
        for (dst, src) in self.model.params_mut().tensors_mut().iter_mut().zip(params) {
            *dst = src;
        }
        self.optimizer.m = m;
        self.optimizer.v = v;
        self.optimizer.step = ckpt.optimizer_step;
        self.epoch = ckpt.epoch as usize;
        self.seed = ckpt.seed;
        Ok(())
    }
}

/// Per-epoch averages over contexts. Drift-only fields are absent for the
/// flow baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_norm_mean: Option<f64>,
    /// Mean normalization factor per temperature, keyed `lambda_<τ>`.
    #[serde(flatten)]
    pub lambdas: BTreeMap<String, f64>,
}

impl EpochMetrics {
    /// Numeric fields as `(name, value)` pairs, epoch excluded.
    pub fn series(&self) -> Vec<(String, f64)> {
        let mut out = vec![("l_total".to_string(), self.l_total)];
        for (k, v) in [
            ("l_mse", self.l_mse),
            ("l_drift", self.l_drift),
            ("w_drift", self.w_drift),
            ("v_norm_mean", self.v_norm_mean),
        ] {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        out.extend(self.lambdas.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }
}

struct ContextData<T> {
    states: Tensor<T>,
    demos: Tensor<T>,
}

pub struct Trainer<T> {
    pub state: TrainState<T>,
    config: TrainConfig,
    temperatures: Vec<f64>,
    contexts: Vec<ContextData<T>>,
}

/// RNG for epoch `e`: stream `e + 1` of the run seed (stream 0 is left to
/// initialization), so resuming needs no RNG state.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        config: &TrainConfig,
        gen_config: &GeneratorConfig,
        data: &DemoSet,
        seed: u64,
        config_hash: u64,
    ) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let shape = data.shape();
        let model = Model::new(config.method, gen_config, &shape, seed)?;
        let optimizer = AdamW::new(config.optimizer.clone(), model.params().tensors());
        let contexts = data
            .contexts
            .iter()
            .map(|c| {
                let w: Vec<T> = c.window().iter().map(|&v| T::of(v)).collect();
                Ok(ContextData {
                    states: repeat_window(&w, config.batch_size),
                    demos: c.demo_tensor()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state: TrainState {
                model,
                optimizer,
                epoch: 0,
                seed,
                config_hash,
            },
            temperatures: config.method.temperatures(&config.temperatures),
            config: config.clone(),
            contexts,
        })
    }

    /// Rebuilds the trainer and loads `ckpt` into it.
    pub fn resume(
        config: &TrainConfig,
        gen_config: &GeneratorConfig,
        data: &DemoSet,
        ckpt: &Checkpoint,
        config_hash: u64,
    ) -> Result<Self> {
        let mut t = Self::new(config, gen_config, data, ckpt.seed, config_hash)?;
        t.state.restore(ckpt)?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.schedule.epochs
    }

    fn step(&mut self, ctx: usize, epoch: usize, rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<()> {
        let g = self.config.batch_size;
        let data = &self.contexts[ctx];
        let tape = Tape::new();
        let p = self.state.model.params().bind(&tape, true);
        let loss: Var = match &self.state.model {
            Model::Drift(gen) => {
                let dim = gen.shape().flat_dim();
                let z = sample_noise::<T>(rng, g, dim);
                let xhat = gen.forward(&tape, &p, &z, &data.states)?;
                let xval = tape.value(xhat).clone();
                let field = aggregate_multi_temp(&xval, &data.demos, &self.temperatures)?;
                let y = pair_demos(rng, &data.demos, g)?;
                let (wd, wm) = self.config.method.weights(epoch, &self.config.schedule);
                let ld = drift_loss(&tape, xhat, &field.total)?;
                let lm = mse_loss(&tape, xhat, &y)?;
                let total = total_loss(&tape, ld, lm, wd, wm)?;
                acc.add_drift(
                    val(&tape, ld),
                    val(&tape, lm),
                    field.mean_norm().to_f64_lossless(),
                    &field.lambdas.iter().map(|l| l.to_f64_lossless()).collect::<Vec<_>>(),
                );
                acc.w_drift = Some(wd);
                total
            }
            Model::Flow(net) => {
                let dim = net.shape().flat_dim();
                let z = sample_noise::<T>(rng, g, dim);
                let a = pair_demos(rng, &data.demos, g)?;
                let t: Vec<T> = (0..g).map(|_| lit(rng.random_range(0.0..=1.0))).collect();
                fm_loss(&tape, net, &p, &z, &a, &t, &data.states)?
            }
        };
        let l = val(&tape, loss);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                context: ctx,
                detail: format!("total loss {l}"),
            });
        }
        acc.total += l;
        acc.steps += 1;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = p
            .vars()
            .iter()
            .zip(self.state.model.params().tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        let norm = self
            .state
            .optimizer
            .step(self.state.model.params_mut().tensors_mut(), &grads);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                context: ctx,
                detail: format!("gradient norm {norm}"),
            });
        }
        Ok(())
    }

    /// Runs the next epoch: one optimizer step per context, in a shuffled
    /// order.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let epoch = self.state.epoch;
        let mut rng = epoch_rng(self.state.seed, epoch);
        let mut order: Vec<usize> = (0..self.contexts.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for ctx in order {
            self.step(ctx, epoch, &mut rng, &mut acc)?;
        }
        self.state.epoch += 1;
        Ok(acc.finish(epoch, &self.temperatures))
    }
}

fn val<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().map_or(f64::NAN, |x| x.to_f64_lossless())
}

#[derive(Default)]
struct Accum {
    steps: usize,
    total: f64,
    drift: f64,
    mse: f64,
    v_norm: f64,
    lambdas: Vec<f64>,
    w_drift: Option<f64>,
}

impl Accum {
    fn add_drift(&mut self, drift: f64, mse: f64, v_norm: f64, lambdas: &[f64]) {
        self.drift += drift;
        self.mse += mse;
        self.v_norm += v_norm;
        self.lambdas.resize(lambdas.len(), 0.0);
        for (a, b) in self.lambdas.iter_mut().zip(lambdas) {
            *a += b;
        }
    }

    fn finish(self, epoch: usize, temps: &[f64]) -> EpochMetrics {
        let n = self.steps.max(1) as f64;
        let drift = self.w_drift.is_some();
        EpochMetrics {
            epoch,
            l_total: self.total / n,
            l_mse: drift.then_some(self.mse / n),
            l_drift: drift.then_some(self.drift / n),
            w_drift: self.w_drift,
            v_norm_mean: drift.then_some(self.v_norm / n),
            lambdas: temps
                .iter()
                .zip(&self.lambdas)
                .map(|(t, l)| (format!("lambda_{t}"), l / n))
                .collect(),
        }
    }
}
