use rand_chacha::ChaCha8Rng;

use super::obstacle::{ObstacleTask, Point};
use crate::error::Result;
use crate::flow::{euler_sample, FlowNet};
use crate::nets::{repeat_window, sample_noise, Generator, NfeCounter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that turns an observation window into action chunks.
pub trait ChunkPolicy: Sync {
    /// `count` chunks for one flattened window, as rows of `H · D_a` values.
    fn sample(&self, window: &[f64], count: usize, rng: &mut ChaCha8Rng, nfe: &NfeCounter) -> Result<Tensor<f64>>;

    fn plan(&self, window: &[f64], rng: &mut ChaCha8Rng, nfe: &NfeCounter) -> Result<Vec<f64>> {
        Ok(self.sample(window, 1, rng, nfe)?.into_data())
    }
}

fn to_t<T: Scalar>(window: &[f64], count: usize) -> Tensor<T> {
    let w: Vec<T> = window.iter().map(|&v| T::of(v)).collect();
    repeat_window(&w, count)
}

impl<T: Scalar> ChunkPolicy for Generator<T> {
    fn sample(&self, window: &[f64], count: usize, rng: &mut ChaCha8Rng, nfe: &NfeCounter) -> Result<Tensor<f64>> {
        let z = sample_noise::<T>(rng, count, self.shape().flat_dim());
        Ok(self.generate(&z, &to_t(window, count), nfe)?.cast())
    }
}

/// Flow-matching network sampled with a fixed number of Euler steps.
pub struct FlowPolicy<'a, T> {
    pub net: &'a FlowNet<T>,
    pub steps: usize,
}

impl<T: Scalar> ChunkPolicy for FlowPolicy<'_, T> {
    fn sample(&self, window: &[f64], count: usize, rng: &mut ChaCha8Rng, nfe: &NfeCounter) -> Result<Tensor<f64>> {
        let z = sample_noise::<T>(rng, count, self.net.shape().flat_dim());
        Ok(euler_sample(self.net, &to_t(window, count), self.steps, &z, nfe)?.cast())
    }
}

/// Replays a fixed path from the point nearest the current position.
pub struct ReplayPolicy<'a> {
    pub task: &'a ObstacleTask,
    pub path: Vec<Point>,
}

impl ChunkPolicy for ReplayPolicy<'_> {
    fn sample(&self, window: &[f64], count: usize, _rng: &mut ChaCha8Rng, nfe: &NfeCounter) -> Result<Tensor<f64>> {
        let n = window.len();
        let cur = [window[n - 2], window[n - 1]];
        let k = (0..self.path.len())
            .min_by(|&a, &b| {
                let da = (self.path[a][0] - cur[0]).hypot(self.path[a][1] - cur[1]);
                let db = (self.path[b][0] - cur[0]).hypot(self.path[b][1] - cur[1]);
                da.total_cmp(&db)
            })
            .unwrap_or(0);
        let chunk = self.task.chunk(&self.path, k);
        nfe.record(count as u64);
        Ok(repeat_window(&chunk, count))
    }
}
