use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw counts behind the mode-fidelity fractions; mergeable across contexts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModeCounts {
    pub samples: usize,
    /// Captured samples per center.
    pub captured: Vec<usize>,
    pub collapsed: usize,
    pub outside: usize,
    pub distance_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeReport {
    pub samples: usize,
    pub capture_fraction: f64,
    /// Captured samples per center as a fraction of all samples.
    pub per_mode_capture: Vec<f64>,
    pub collapse_fraction: f64,
    pub outside_fraction: f64,
    pub mean_nearest_distance: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ModeCounts {
    pub fn merge(&mut self, other: &ModeCounts) {
        if self.captured.len() < other.captured.len() {
            self.captured.resize(other.captured.len(), 0);
        }
        for (a, b) in self.captured.iter_mut().zip(&other.captured) {
            *a += b;
        }
        self.samples += other.samples;
        self.collapsed += other.collapsed;
        self.outside += other.outside;
        self.distance_sum += other.distance_sum;
    }

    pub fn report(&self) -> ModeReport {
        let n = self.samples.max(1) as f64;
        let captured: usize = self.captured.iter().sum();
        ModeReport {
            samples: self.samples,
            capture_fraction: captured as f64 / n,
            per_mode_capture: self.captured.iter().map(|&c| c as f64 / n).collect(),
            collapse_fraction: self.collapsed as f64 / n,
            outside_fraction: self.outside as f64 / n,
            mean_nearest_distance: self.distance_sum / n,
        }
    }
}

/// Classifies every sample row as captured by its nearest center (distance
/// `≤ radius`, lowest index on ties), collapsed (otherwise closer to the
/// midpoint of its two nearest centers than to any center), or outside.
pub fn mode_counts(samples: &Tensor<f64>, centers: &[Vec<f64>], radius: f64) -> Result<ModeCounts> {
    let (_, d) = samples.dims2()?;
    if centers.is_empty() || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument(format!(
            "need at least one center of dimension {d}"
        )));
    }
    let mut counts = ModeCounts {
        captured: vec![0; centers.len()],
        ..Default::default()
    };
    for row in samples.rows() {
        counts.samples += 1;
        let dists: Vec<f64> = centers.iter().map(|c| euclid(row, c)).collect();
        let mut order: Vec<usize> = (0..centers.len()).collect();
        order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
        let nearest = order[0];
        counts.distance_sum += dists[nearest];
        if dists[nearest] <= radius {
            counts.captured[nearest] += 1;
            continue;
        }
        let collapsed = order.get(1).is_some_and(|&second| {
            let mid: Vec<f64> = centers[nearest]
                .iter()
                .zip(&centers[second])
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            euclid(row, &mid) < dists[nearest]
        });
        if collapsed {
            counts.collapsed += 1;
        } else {
            counts.outside += 1;
        }
    }
    Ok(counts)
}

pub fn mode_metrics(samples: &Tensor<f64>, centers: &[Vec<f64>], radius: f64) -> Result<ModeReport> {
    Ok(mode_counts(samples, centers, radius)?.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn centers() -> Vec<Vec<f64>> {
        vec![vec![-1.0, -1.0], vec![1.0, 1.0]]
    }

    #[test]
    fn samples_at_centers() {
        let s = Tensor::from_rows(&[[-1.0, -1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = mode_metrics(&s, &centers(), 0.25).unwrap();
        assert_eq!(r.capture_fraction, 1.0);
        assert_eq!(r.collapse_fraction, 0.0);
        assert_eq!(r.mean_nearest_distance, 0.0);
        assert_eq!(r.per_mode_capture, vec![1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn samples_at_midpoint() {
        let s = Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let r = mode_metrics(&s, &centers(), 0.25).unwrap();
        assert_eq!(r.capture_fraction, 0.0);
        assert_eq!(r.collapse_fraction, 1.0);
        // exact tie between centers goes to the lower index
        let c = mode_counts(&s, &centers(), 2.0).unwrap();
        assert_eq!(c.captured, vec![2, 0]);
    }

    #[test]
    fn far_samples_are_outside() {
        let s = Tensor::from_rows(&[[5.0, 5.0], [0.1, -0.1]]).unwrap();
        let r = mode_metrics(&s, &centers(), 0.25).unwrap();
        assert_eq!(r.outside_fraction, 0.5);
        assert_eq!(r.collapse_fraction, 0.5);
    }

    #[test]
    fn mixture_capture_matches_tail_bound() {
        // Per 4-D sample the miss probability is P(χ²₄ > (0.25/0.05)²) ≈ 4e-5.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let cs = vec![vec![-1.0; 4], vec![1.0; 4]];
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|i| cs[i % 2].iter().map(|&m| m + noise.sample(&mut rng)).collect())
            .collect();
        let s = Tensor::from_rows(&rows).unwrap();
        let r = mode_metrics(&s, &cs, 0.25).unwrap();
        assert!(r.capture_fraction >= 0.999, "{r:?}");
        let sum = r.capture_fraction + r.collapse_fraction + r.outside_fraction;
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn counts_merge() {
        let a = mode_counts(&Tensor::from_rows(&[[1.0, 1.0]]).unwrap(), &centers(), 0.25).unwrap();
        let b = mode_counts(&Tensor::from_rows(&[[0.0, 0.0]]).unwrap(), &centers(), 0.25).unwrap();
        let mut m = a.clone();
        m.merge(&b);
        assert_eq!(m.samples, 2);
        assert_eq!(m.captured, vec![0, 1]);
        assert_eq!(m.collapsed, 1);
        assert!(mode_counts(&Tensor::from_rows(&[[0.0]]).unwrap(), &centers(), 0.25).is_err());
    }
}
