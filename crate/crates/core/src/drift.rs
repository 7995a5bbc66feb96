//! Training-time drifting field.
//!
//! Predictions are attracted toward expert samples and repelled from each
//! other through bidirectional softmax affinities, computed at several
//! temperatures on a distance-normalized copy of the batch. Everything here
//! is plain data: the field is a fixed target, never differentiated.

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{kernels, Tensor};

pub const DEFAULT_TEMPERATURES: [f64; 3] = [0.02, 0.05, 0.2];
/// Floor applied to each per-temperature normalizer.
pub const LAMBDA_FLOOR: f64 = 1e-12;
/// Pools whose mean pairwise distance falls below this are rejected.
pub const DEGENERATE_DISTANCE: f64 = 1e-12;

/// Predictions and expert positives drawn under one conditioning context.
#[derive(Clone, Debug)]
pub struct SampleBatch<T> {
    pub predictions: Tensor<T>,
    pub positives: Tensor<T>,
    pub context: usize,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn new(predictions: Tensor<T>, positives: Tensor<T>, context: usize) -> Result<Self> {
        check_rows("sample_batch", &predictions, &positives)?;
        if !predictions.all_finite() || !positives.all_finite() {
            return Err(Error::InvalidArgument("non-finite sample in drift batch".into()));
        }
        Ok(Self {
            predictions,
            positives,
            context,
        })
    }

    pub fn field(&self, temperatures: &[f64]) -> Result<DriftField<T>> {
        aggregate_multi_temp(&self.predictions, &self.positives, temperatures)
    }
}

fn check_rows<T: Scalar>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<usize> {
    let (_, dx) = x.dims2()?;
    let (_, dy) = y.dims2()?;
    if dx != dy {
        return Err(shape_err(op, format!("row dimensions {dx} and {dy} differ")));
    }
    Ok(dx)
}

/// Euclidean distances between every row of `x` and every row of `y`.
pub fn pairwise_distances<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let m = y.shape()[0];
    let mut out = Vec::with_capacity(n * m);
    for xi in x.rows() {
        for yj in y.rows() {
            let sq = xi
                .iter()
                .zip(yj)
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            out.push(sq.sqrt());
        }
    }
    Tensor::new([n, m], out).expect("n·m distances")
}

/// A batch rescaled so its pooled mean pairwise distance equals `√D`.
#[derive(Clone, Debug)]
pub struct Normalized<T> {
    pub predictions: Tensor<T>,
    pub positives: Tensor<T>,
    /// Multiplier applied to the original samples.
    pub scale: T,
}

pub fn normalize_scale<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Normalized<T>> {
    let dim = check_rows("normalize_scale", x, y)?;
    let pool: Vec<&[T]> = x.rows().chain(y.rows()).collect();
    if pool.len() < 2 {
        return Err(Error::DegeneratePool(0.0));
    }
    let mut total = T::zero();
    let mut pairs = 0usize;
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let sq = pool[i]
                .iter()
                .zip(pool[j])
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            total = total + sq.sqrt();
            pairs += 1;
        }
    }
    let mean = total / lit(pairs as f64);
    if !(mean.to_f64_lossless() >= DEGENERATE_DISTANCE) {
        return Err(Error::DegeneratePool(mean.to_f64_lossless()));
    }
    let scale = lit::<T>(dim as f64).sqrt() / mean;
    Ok(Normalized {
        predictions: x.scale(scale),
        positives: y.scale(scale),
        scale,
    })
}

/// Bidirectional affinity between two sample sets at one temperature.
#[derive(Clone, Debug)]
pub struct AffinityMatrix<T> {
    /// `N × M`, entry `(i, j)` is `√(row_softmax · col_softmax)`.
    pub values: Tensor<T>,
    pub temperature: T,
}

impl<T: Scalar> AffinityMatrix<T> {
    pub fn row_sums(&self) -> Vec<T> {
        self.values.rows().map(|r| r.iter().copied().sum()).collect()
    }
}

pub fn bidirectional_affinity<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    temperature: T,
) -> Result<AffinityMatrix<T>> {
    check_rows("bidirectional_affinity", x, y)?;
    if !(temperature > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let dist = pairwise_distances(x, y);
    let (n, m) = dist.dims2()?;
    let logits = dist.map(|d| -d / temperature);
    let row = kernels::softmax_rows(logits.data(), n, m);
    let logits_t = kernels::transpose(logits.data(), n, m);
    let col = kernels::transpose(&kernels::softmax_rows(&logits_t, m, n), m, n);
    let values = row
        .iter()
        .zip(&col)
        .map(|(&r, &c)| (r * c).sqrt())
        .collect();
    Ok(AffinityMatrix {
        values: Tensor::new([n, m], values)?,
        temperature,
    })
}

/// Drift at one temperature on already-normalized samples.
///
/// With `S⁺ᵢ = Σⱼ A⁺ᵢⱼ`, `S⁻ᵢ = Σₖ A⁻ᵢₖ` and `Zᵢ = S⁺ᵢ + S⁻ᵢ`, the weights are
/// `W⁺ᵢⱼ = A⁺ᵢⱼ·S⁻ᵢ/Zᵢ` and `W⁻ᵢₖ = A⁻ᵢₖ·S⁺ᵢ/Zᵢ`, so both sides carry equal
/// total mass and the field is invariant to translating the batch.
pub fn drift_field_single_temp<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    temperature: T,
) -> Result<Tensor<T>> {
    let attract = bidirectional_affinity(x, y, temperature)?;
    let repel = bidirectional_affinity(x, x, temperature)?;
    let (n, dim) = x.dims2()?;
    let s_pos = attract.row_sums();
    let s_neg = repel.row_sums();
    let weighted_sum = |weights: &[T], scale: T, samples: &Tensor<T>| {
        let mut acc = vec![T::zero(); dim];
        for (&a, s) in weights.iter().zip(samples.rows()) {
            let w = a * scale;
            for (o, &v) in acc.iter_mut().zip(s) {
                *o = *o + w * v;
            }
        }
        acc
    };
    let mut out = Vec::with_capacity(n * dim);
    for i in 0..n {
        let z = s_pos[i] + s_neg[i];
        let pull = weighted_sum(attract.values.row(i), s_neg[i] / z, y);
        let push = weighted_sum(repel.values.row(i), s_pos[i] / z, x);
        out.extend(pull.iter().zip(&push).map(|(&p, &q)| p - q));
    }
    Tensor::new([n, dim], out)
}

/// Multi-temperature drift mapped back to the original sample scale.
#[derive(Clone, Debug)]
pub struct DriftField<T> {
    /// `N × D` displacement for each prediction.
    pub total: Tensor<T>,
    /// Un-normalized per-temperature fields, in normalized units.
    pub per_temperature: Vec<Tensor<T>>,
    /// Per-temperature RMS normalizers `λ_τ`.
    pub lambdas: Vec<T>,
    pub temperatures: Vec<T>,
    /// Sample scale factor `s`; `total` is already divided by it.
    pub scale: T,
}

impl<T: Scalar> DriftField<T> {
    /// Mean Euclidean norm of the per-prediction displacements.
    pub fn mean_norm(&self) -> T {
        let n = self.total.shape()[0];
        let sum = self
            .total
            .rows()
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .fold(T::zero(), |a, v| a + v);
        sum / lit(n as f64)
    }
}

pub fn aggregate_multi_temp<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    temperatures: &[f64],
) -> Result<DriftField<T>> {
    if temperatures.is_empty() {
        return Err(Error::InvalidArgument("no drift temperatures".into()));
    }
    if let Some(t) = temperatures.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let norm = normalize_scale(x, y)?;
    let (n, dim) = x.dims2()?;
    let floor = lit::<T>(LAMBDA_FLOOR);
    let denom = lit::<T>((n * dim) as f64);
    let mut combined = Tensor::zeros([n, dim]);
    let mut per_temperature = Vec::with_capacity(temperatures.len());
    let mut lambdas = Vec::with_capacity(temperatures.len());
    for &tau in temperatures {
        let v = drift_field_single_temp(&norm.predictions, &norm.positives, lit(tau))?;
        let lambda = (v.norm_sq() / denom).sqrt().max(floor);
        for (c, &vv) in combined.data_mut().iter_mut().zip(v.data()) {
            *c = *c + vv / lambda;
        }
        per_temperature.push(v);
        lambdas.push(lambda);
    }
    let inv = T::one() / norm.scale;
    Ok(DriftField {
        total: combined.scale(inv),
        per_temperature,
        lambdas,
        temperatures: temperatures.iter().map(|&t| lit(t)).collect(),
        scale: norm.scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn scale_closed_forms() {
        let n = normalize_scale(&rows(&[&[0.0]]), &rows(&[&[1.0]])).unwrap();
        assert_eq!(n.scale, 1.0);
        let n = normalize_scale(&rows(&[&[0.0, 0.0, 0.0, 0.0]]), &rows(&[&[2.0, 2.0, 2.0, 2.0]]))
            .unwrap();
        assert_eq!(n.scale, 0.5);
    }

    #[test]
    fn degenerate_pool_is_rejected() {
        let x = rows(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!(matches!(
            normalize_scale(&x, &x),
            Err(Error::DegeneratePool(_))
        ));
        assert!(matches!(
            aggregate_multi_temp(&x, &x, &DEFAULT_TEMPERATURES),
            Err(Error::DegeneratePool(_))
        ));
    }

    #[test]
    fn single_pair_affinity_is_one() {
        let a = bidirectional_affinity(&rows(&[&[0.3]]), &rows(&[&[-2.0]]), 0.1).unwrap();
        assert_eq!(a.values.data(), &[1.0]);
    }

    #[test]
    fn equidistant_affinity_is_half() {
        // x₁, x₂ both at distance 1 from y₁ and y₂
        let x = rows(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let y = rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let a = bidirectional_affinity(&x, &y, 0.3).unwrap();
        for &v in a.values.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn single_pair_drift_is_half_the_gap() {
        let v = drift_field_single_temp(&rows(&[&[0.5, 1.0]]), &rows(&[&[2.5, -1.0]]), 0.05)
            .unwrap();
        assert_eq!(v.data(), &[1.0, -1.0]);
    }

    #[test]
    fn identical_sets_are_a_fixed_point() {
        let x = rows(&[&[0.1, 0.4], &[-1.3, 0.7], &[2.0, 2.0]]);
        let v = drift_field_single_temp(&x, &x, 0.05).unwrap();
        assert!(v.data().iter().all(|&e| e == 0.0));
        let f = aggregate_multi_temp(&x, &x, &DEFAULT_TEMPERATURES).unwrap();
        assert!(f.total.data().iter().all(|&e| e == 0.0));
        assert!(f.lambdas.iter().all(|&l| l == LAMBDA_FLOOR));
    }

    #[test]
    fn predictions_move_toward_nearest_mode() {
        let x = rows(&[&[-0.8], &[0.9]]);
        let y = rows(&[&[-1.0], &[1.0]]);
        let v = drift_field_single_temp(&x, &y, 0.05).unwrap();
        assert!(v.data()[0] < 0.0);
        assert!(v.data()[1] > 0.0);
    }

    #[test]
    fn single_temperature_has_unit_rms() {
        let x = rows(&[&[0.1, 0.4], &[-1.3, 0.7], &[2.0, 1.0]]);
        let y = rows(&[&[1.0, 1.0], &[-1.0, 0.5]]);
        let f = aggregate_multi_temp(&x, &y, &[0.2]).unwrap();
        // undo the final 1/s to recover the normalized-unit field
        let normalized = f.total.scale(f.scale);
        let rms = normalized.norm_sq() / 6.0;
        assert!((rms - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bad_temperatures_are_rejected() {
        let x = rows(&[&[0.0]]);
        let y = rows(&[&[1.0]]);
        assert!(aggregate_multi_temp(&x, &y, &[]).is_err());
        assert!(aggregate_multi_temp(&x, &y, &[0.1, 0.0]).is_err());
        assert!(bidirectional_affinity(&x, &y, -1.0).is_err());
    }
}
