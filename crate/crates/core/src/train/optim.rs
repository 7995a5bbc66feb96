use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(10.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> T {
        debug_assert_eq!(params.len(), grads.len());
        let norm = grads.iter().map(|g| g.norm_sq()).fold(T::zero(), |a, b| a + b).sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > lit(c) => lit::<T>(c) / norm,
            _ => T::one(),
        };
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr = lit::<T>(c.lr);
        let decay = T::one() - lr * lit(c.weight_decay);
        let eps = lit::<T>(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = OptimizerConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = vec![Tensor::<f64>::new([3], vec![1.0, 2.0, 3.0]).unwrap()];
        let grads = vec![Tensor::new([3], vec![0.5, -2.0, 0.0]).unwrap()];
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &grads);
        let p = params[0].data();
        assert!((p[0] - 0.99).abs() < 1e-7);
        assert!((p[1] - 2.01).abs() < 1e-7);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut params = vec![Tensor::<f64>::new([1], vec![2.0]).unwrap()];
        let grads = vec![Tensor::zeros([1])];
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &grads);
        assert!((params[0].data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let cfg = OptimizerConfig {
            clip_norm: Some(1.0),
            ..Default::default()
        };
        let mut a = vec![Tensor::<f64>::new([2], vec![0.0, 0.0]).unwrap()];
        let mut b = a.clone();
        let mut oa = AdamW::new(cfg.clone(), &a);
        let mut ob = AdamW::new(cfg, &b);
        let norm = oa.step(&mut a, &[Tensor::new([2], vec![30.0, 40.0]).unwrap()]);
        ob.step(&mut b, &[Tensor::new([2], vec![0.6, 0.8]).unwrap()]);
        assert_eq!(norm, 50.0);
        for (x, y) in oa.m[0].data().iter().zip(ob.m[0].data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }
}
