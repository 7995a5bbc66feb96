//! Conditional flow-matching baseline: a velocity network that also sees the
//! flow time `t`, trained on straight noise-to-data paths and sampled with
//! explicit Euler steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::nets::{slice_rows, Bound, GeneratorConfig, IoShape, Linear, Network, NfeCounter, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 16;
/// Multiplier applied to `t ∈ [0, 1]` before the sinusoidal features.
const TIME_SCALE: f64 = 100.0;
/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 10;

/// Sinusoidal features `[sin(s·t·f_k), cos(s·t·f_k)]` with geometric
/// frequencies `f_k = 10000^(−k/(half−1))`.
pub fn time_embedding<T: Scalar>(t: &[T], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let step = (10000f64).ln() / (half.max(2) - 1) as f64;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti.to_f64_lossless() * TIME_SCALE;
        let args: Vec<f64> = (0..half).map(|k| x * (-(k as f64) * step).exp()).collect();
        data.extend(args.iter().map(|a| lit::<T>(a.sin())));
        data.extend(args.iter().map(|a| lit::<T>(a.cos())));
    }
    Tensor::new([t.len(), 2 * half], data).expect("rows·dim features")
}

/// Velocity network `v_θ(x, t, g)`.
#[derive(Clone, Debug)]
pub struct FlowNet<T> {
    net: Network<T>,
    time_hidden: Linear,
    time_out: Linear,
}

impl<T: Scalar> FlowNet<T> {
    pub fn new(config: &GeneratorConfig, shape: &IoShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::build(config, shape, ParamStore::default(), &mut rng)?;
        let cond = config.cond_dim(shape);
        let time_hidden = Linear::new(&mut net.params, &mut rng, "time.hidden", TIME_EMBED_DIM, cond);
        let time_out = Linear::new(&mut net.params, &mut rng, "time.out", cond, cond);
        Ok(Self {
            net,
            time_hidden,
            time_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.net.config
    }

    pub fn shape(&self) -> &IoShape {
        &self.net.shape
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.net.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.net.params
    }

    /// Differentiable velocity for rows `x[N × H·D_a]` at per-row times `t`.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, x: &Tensor<T>, t: &[T], states: &Tensor<T>) -> Result<Var> {
        if t.len() != x.shape()[0] {
            return Err(shape_err(
                "flow_forward",
                format!("{} times for {} rows", t.len(), x.shape()[0]),
            ));
        }
        let emb = time_embedding(t, TIME_EMBED_DIM);
        self.net.forward_with(
            tape,
            p,
            x,
            states,
            |tape, rows| {
                let e = tape.constant(slice_rows(&emb, rows)?);
                let h = self.time_hidden.forward(tape, p, e)?;
                let h = tape.mish(h);
                Ok(Some(self.time_out.forward(tape, p, h)?))
            },
            None,
        )
    }

    /// Inference-mode velocity; records one evaluation per row.
    pub fn velocity(&self, x: &Tensor<T>, t: &[T], states: &Tensor<T>, nfe: &NfeCounter) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.net.params.bind(&tape, false);
        let v = self.forward(&tape, &p, x, t, states)?;
        nfe.record(x.shape()[0] as u64);
        let value = tape.value(v).clone();
        Ok(value)
    }
}

fn check_time<T: Scalar>(t: T) -> Result<()> {
    if t >= T::zero() && t <= T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")))
    }
}

/// `x_t = (1 − t)·z + t·a`, with one `t` per row.
pub fn fm_interpolate<T: Scalar>(z: &Tensor<T>, a: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    let (n, d) = z.dims2()?;
    if a.shape() != z.shape() || t.len() != n {
        return Err(shape_err(
            "fm_interpolate",
            format!("z {:?}, a {:?}, {} times", z.shape(), a.shape(), t.len()),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, &ti) in t.iter().enumerate() {
        check_time(ti)?;
        let s = T::one() - ti;
        data.extend(z.row(i).iter().zip(a.row(i)).map(|(&zi, &ai)| s * zi + ti * ai));
    }
    Tensor::new([n, d], data)
}

/// `mean_i ‖v_θ(x_t, t, g) − (a − z)‖²`.
pub fn fm_loss<T: Scalar>(
    tape: &Tape<T>,
    net: &FlowNet<T>,
    p: &Bound,
    z: &Tensor<T>,
    a: &Tensor<T>,
    t: &[T],
    states: &Tensor<T>,
) -> Result<Var> {
    let xt = fm_interpolate(z, a, t)?;
    let target = a.zip_map(z, |ai, zi| ai - zi)?;
    let v = net.forward(tape, p, &xt, t, states)?;
    fm_regression(tape, v, &target)
}

pub(crate) fn fm_regression<T: Scalar>(tape: &Tape<T>, v: Var, target: &Tensor<T>) -> Result<Var> {
    let n = target.shape()[0];
    let u = tape.constant(target.clone());
    let diff = tape.sub(v, u)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::one() / lit(n as f64)))
}

/// Explicit Euler integration of `field` from `t = 0` to `t = 1` in `steps`
/// equal steps.
pub fn euler_integrate<T, F>(z: &Tensor<T>, steps: usize, mut field: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, T) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("euler steps must be at least 1".into()));
    }
    let h = T::one() / lit(steps as f64);
    let mut x = z.clone();
    for i in 0..steps {
        let t = lit::<T>(i as f64) * h;
        let v = field(&x, t)?;
        x = x.zip_map(&v, |xi, vi| xi + h * vi)?;
    }
    Ok(x)
}

/// K-step Euler sampling from noise rows `z`; costs `K` evaluations per row.
pub fn euler_sample<T: Scalar>(
    net: &FlowNet<T>,
    states: &Tensor<T>,
    steps: usize,
    z: &Tensor<T>,
    nfe: &NfeCounter,
) -> Result<Tensor<T>> {
    let n = z.shape()[0];
    euler_integrate(z, steps, |x, t| net.velocity(x, &vec![t; n], states, nfe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, Tolerance};
    use crate::nets::{sample_noise, Architecture};
    use rand::Rng;

    fn shape() -> IoShape {
        IoShape {
            action_dim: 1,
            horizon: 4,
            state_dim: 2,
            obs_steps: 2,
        }
    }

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            kind: Architecture::Mlp,
            obs_hidden: 5,
            obs_dim: 3,
            mlp_hidden: vec![6, 6],
            ..Default::default()
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let z = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = Tensor::new([3, 2], vec![-1.0, 0.0, 7.0, 2.0, 1.0, 1.0]).unwrap();
        let x = fm_interpolate(&z, &a, &[0.0, 1.0, 0.5]).unwrap();
        assert_eq!(x.row(0), z.row(0));
        assert_eq!(x.row(1), a.row(1));
        assert_eq!(x.row(2), &[3.0, 3.5]);
        assert!(fm_interpolate(&z, &a, &[0.0, 1.5, 0.5]).is_err());
        assert!(fm_interpolate(&z, &a, &[0.0, -0.1, 0.5]).is_err());
    }

    #[test]
    fn zero_network_loss_is_mean_squared_gap() {
        let mut net = FlowNet::<f64>::new(&cfg(), &shape(), 1).unwrap();
        let n = net.params().len();
        let last = net.params().names().iter().position(|s| s == "mlp.out.w").unwrap();
        let bias = net.params().names().iter().position(|s| s == "mlp.out.b").unwrap();
        assert!(last < n);
        for i in [last, bias] {
            let t = &mut net.params_mut().tensors_mut()[i];
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_noise::<f64>(&mut rng, 3, 4);
        let a = sample_noise::<f64>(&mut rng, 3, 4);
        let states = sample_noise::<f64>(&mut rng, 3, 4);
        let tape = Tape::new();
        let p = net.params().bind(&tape, false);
        let l = fm_loss(&tape, &net, &p, &z, &a, &[0.1, 0.5, 0.9], &states).unwrap();
        let want: f64 = a.zip_map(&z, |x, y| (x - y) * (x - y)).unwrap().sum() / 3.0;
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let net = FlowNet::<f64>::new(&cfg(), &shape(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = sample_noise::<f64>(&mut rng, 3, 4);
        let a = sample_noise::<f64>(&mut rng, 3, 4);
        let states = sample_noise::<f64>(&mut rng, 3, 4);
        let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let report = check_fn(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                fm_loss(tape, &net, &p, &z, &a, &t, &states)
            },
            net.params().tensors(),
            None,
            Tolerance::PIPELINE,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn euler_with_constant_field() {
        let z = Tensor::<f64>::new([2, 2], vec![0.0, 1.0, -2.0, 0.5]).unwrap();
        let c = Tensor::new([2, 2], vec![1.0, -1.0, 3.0, 0.0]).unwrap();
        for k in [1, 3, 10] {
            let x = euler_integrate(&z, k, |_, _| Ok(c.clone())).unwrap();
            for ((xi, zi), ci) in x.data().iter().zip(z.data()).zip(c.data()) {
                assert!((xi - (zi + ci)).abs() < 1e-12);
            }
        }
        assert!(euler_integrate(&z, 0, |_, _| Ok(c.clone())).is_err());
    }

    #[test]
    fn one_step_is_a_single_velocity_call() {
        let net = FlowNet::<f64>::new(&cfg(), &shape(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sample_noise::<f64>(&mut rng, 2, 4);
        let states = sample_noise::<f64>(&mut rng, 2, 4);
        let nfe = NfeCounter::new();
        let x = euler_sample(&net, &states, 1, &z, &nfe).unwrap();
        assert_eq!(nfe.get(), 2);
        let v = net.velocity(&z, &[0.0, 0.0], &states, &NfeCounter::new()).unwrap();
        assert_eq!(x, z.zip_map(&v, |a, b| a + b).unwrap());
        let nfe = NfeCounter::new();
        euler_sample(&net, &states, 10, &z, &nfe).unwrap();
        assert_eq!(nfe.get(), 20);
    }

    #[test]
    fn embedding_shape_and_range() {
        let e = time_embedding(&[0.0f64, 0.25, 1.0], TIME_EMBED_DIM);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(&e.row(0)[..8], &[0.0; 8]);
        assert_eq!(&e.row(0)[8..], &[1.0; 8]);
        assert_ne!(e.row(1), e.row(2));
    }
}
