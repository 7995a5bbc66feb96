//! Synthetic multimodal benchmarks: expert data, closed-loop rollouts and
//! mode-fidelity metrics.

mod bimodal;
mod metrics;
mod obstacle;
mod policy;

pub use bimodal::{gen_bimodal_demos, BimodalTask};
pub use metrics::{mode_counts, mode_metrics, ModeCounts, ModeReport};
pub use obstacle::{
    collision_check, gen_obstacle_demos, point_segment_distance, receding_rollout, Obstacle, ObstacleTask,
    Point, RolloutResult,
};
pub use policy::{ChunkPolicy, FlowPolicy, ReplayPolicy};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{IoShape, NfeCounter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEMO_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Bimodal(BimodalTask),
    Obstacle(ObstacleTask),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Bimodal(BimodalTask::default())
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Bimodal(t) => t.validate(),
            TaskSpec::Obstacle(t) => t.validate(),
        }
    }

    pub fn shape(&self) -> IoShape {
        match self {
            TaskSpec::Bimodal(t) => t.shape(),
            TaskSpec::Obstacle(t) => t.shape(),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<DemoSet> {
        let contexts = match self {
            TaskSpec::Bimodal(t) => gen_bimodal_demos(t, seed)?,
            TaskSpec::Obstacle(t) => gen_obstacle_demos(t, seed)?,
        };
        let set = DemoSet {
            schema_version: DEMO_SCHEMA_VERSION,
            task: self.clone(),
            seed,
            contexts,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Demonstrations of one context. `states` is the `T_o × d_s` observation
/// window; each demo is a flattened `H × D_a` chunk labelled with the index
/// of its mode in `centers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextDemos {
    pub id: usize,
    pub states: Vec<Vec<f64>>,
    pub demos: Vec<Vec<f64>>,
    pub modes: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

impl ContextDemos {
    pub fn window(&self) -> Vec<f64> {
        self.states.iter().flatten().copied().collect()
    }

    pub fn demo_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let rows: Vec<Vec<T>> = self
            .demos
            .iter()
            .map(|r| r.iter().map(|&v| T::of(v)).collect())
            .collect();
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSet {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub seed: u64,
    pub contexts: Vec<ContextDemos>,
}

impl DemoSet {
    pub fn shape(&self) -> IoShape {
        self.task.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.schema_version != DEMO_SCHEMA_VERSION {
            return bad(format!(
                "demo schema_version {} is not supported (expected {DEMO_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.contexts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shape = self.shape();
        for c in &self.contexts {
            let ok_states = c.states.len() == shape.obs_steps
                && c.states.iter().all(|s| s.len() == shape.state_dim && s.iter().all(|v| v.is_finite()));
            if !ok_states {
                return bad(format!("context {}: observation window is not {}×{}", c.id, shape.obs_steps, shape.state_dim));
            }
            if c.demos.is_empty() || c.demos.len() != c.modes.len() {
                return bad(format!("context {}: demos and mode labels disagree or are empty", c.id));
            }
            let d = shape.flat_dim();
            if c.demos.iter().chain(&c.centers).any(|r| r.len() != d || !r.iter().all(|v| v.is_finite())) {
                return bad(format!("context {}: demo or center is not {d} finite values", c.id));
            }
            if c.modes.iter().any(|&m| m >= c.centers.len()) {
                return bad(format!("context {}: mode label without a center", c.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: DemoSet = serde_json::from_str(text).map_err(|e| Error::Data(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `total` chunks spread evenly over the contexts (earlier contexts take
/// the remainder) and classifies them against each context's centers.
pub fn evaluate_modes<P: ChunkPolicy + ?Sized>(
    policy: &P,
    set: &DemoSet,
    total: usize,
    radius: f64,
    seed: u64,
    nfe: &NfeCounter,
) -> Result<ModeCounts> {
    let n = set.contexts.len();
    let mut counts = ModeCounts::default();
    for (i, c) in set.contexts.iter().enumerate() {
        let count = total / n + usize::from(i < total % n);
        if count == 0 {
            continue;
        }
        let mut rng = stream_rng(seed, i as u64);
        let samples = policy.sample(&c.window(), count, &mut rng, nfe)?;
        counts.merge(&mode_counts(&samples, &c.centers, radius)?);
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RolloutSummary {
    pub rollouts: usize,
    pub collision_rate: f64,
    pub success_rate: f64,
    pub total_chunks: usize,
    pub total_nfe: u64,
    pub nfe_per_chunk: f64,
}

/// `count` independent rollouts, rollout `i` drawing from RNG stream `i`.
/// Work is split over up to `threads` scoped threads; results do not depend
/// on the split.
pub fn evaluate_rollouts<P: ChunkPolicy + ?Sized>(
    policy: &P,
    task: &ObstacleTask,
    count: usize,
    seed: u64,
    threads: usize,
) -> Result<(RolloutSummary, Vec<RolloutResult>)> {
    let threads = threads.clamp(1, count.max(1));
    let per = count.div_ceil(threads);
    let run = |range: std::ops::Range<usize>| -> Result<Vec<RolloutResult>> {
        range
            .map(|i| receding_rollout(policy, task, &mut stream_rng(seed, i as u64)))
            .collect()
    };
    let results: Vec<RolloutResult> = if threads == 1 {
        run(0..count)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let range = (t * per).min(count)..((t + 1) * per).min(count);
                    s.spawn(move || run(range))
                })
                .collect();
            let mut all = Vec::with_capacity(count);
            for h in handles {
                all.extend(h.join().expect("rollout thread panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let n = results.len().max(1) as f64;
    let total_chunks = results.iter().map(|r| r.chunks).sum();
    let total_nfe = results.iter().map(|r| r.nfe).sum();
    let summary = RolloutSummary {
        rollouts: results.len(),
        collision_rate: results.iter().filter(|r| r.collision).count() as f64 / n,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        total_chunks,
        total_nfe,
        nfe_per_chunk: total_nfe as f64 / total_chunks.max(1) as f64,
    };
    Ok((summary, results))
}
