//! Single-step generator networks.
//!
//! Both architectures map a noise chunk and an observation window straight
//! to an action chunk. Neither takes a timestep or noise-level input; the
//! flow-matching baseline adds one on top (see [`crate::flow`]).

mod layers;
mod params;
mod unet;

pub use layers::{film, group_count, Conv, FilmHead, Linear, Pointwise};
pub use params::{Bound, ParamId, ParamStore};
pub use unet::{UnetBody, UnetProbe};

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Mlp,
    Unet1d,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: Architecture,
    /// Hidden width of the per-step observation MLP.
    pub obs_hidden: usize,
    /// Per-step observation feature size; the conditioning vector has
    /// `obs_steps · obs_dim` entries.
    pub obs_dim: usize,
    pub mlp_hidden: Vec<usize>,
    /// Channel widths of the three U-Net resolution levels.
    pub unet_widths: Vec<usize>,
    pub groups: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: Architecture::Mlp,
            obs_hidden: 32,
            obs_dim: 16,
            mlp_hidden: vec![64, 64],
            unet_widths: vec![16, 32, 64],
            groups: 8,
        }
    }
}

/// Input/output dimensions, fixed by the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoShape {
    pub action_dim: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub obs_steps: usize,
}

impl IoShape {
    /// Flattened chunk size `H · D_a`.
    pub fn flat_dim(&self) -> usize {
        self.action_dim * self.horizon
    }

    /// Flattened observation window size `T_o · d_s`.
    pub fn obs_len(&self) -> usize {
        self.obs_steps * self.state_dim
    }
}

impl GeneratorConfig {
    pub fn cond_dim(&self, shape: &IoShape) -> usize {
        shape.obs_steps * self.obs_dim
    }

    pub fn validate(&self, shape: &IoShape) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if shape.action_dim == 0 || shape.horizon == 0 || shape.state_dim == 0 || shape.obs_steps == 0
        {
            return bad(format!("all io dimensions must be positive: {shape:?}"));
        }
        if self.obs_hidden == 0 || self.obs_dim == 0 || self.groups == 0 {
            return bad("obs_hidden, obs_dim and groups must be positive".into());
        }
        match self.kind {
            Architecture::Mlp => {
                if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
                    return bad(format!("mlp_hidden must be non-empty and positive: {:?}", self.mlp_hidden));
                }
            }
            Architecture::Unet1d => {
                if self.unet_widths.len() != 3 || self.unet_widths.contains(&0) {
                    return bad(format!(
                        "unet1d needs exactly 3 positive widths, got {:?}",
                        self.unet_widths
                    ));
                }
                if !shape.horizon.is_multiple_of(4) {
                    return bad(format!(
                        "unet1d horizon must be divisible by 4, got {}",
                        shape.horizon
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One action chunk: `H` waypoints of `D_a` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionTrajectory<T> {
    pub horizon: usize,
    pub action_dim: usize,
    pub waypoints: Vec<T>,
}

impl<T: Scalar> ActionTrajectory<T> {
    pub fn from_flat(row: &[T], horizon: usize, action_dim: usize) -> Result<Self> {
        if row.len() != horizon * action_dim {
            return Err(shape_err(
                "action_trajectory",
                format!("{} values for {horizon}×{action_dim}", row.len()),
            ));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite waypoint".into()));
        }
        Ok(Self {
            horizon,
            action_dim,
            waypoints: row.to_vec(),
        })
    }

    pub fn waypoint(&self, h: usize) -> &[T] {
        &self.waypoints[h * self.action_dim..(h + 1) * self.action_dim]
    }
}

/// Counts generator forward evaluations, one per generated chunk.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicU64);

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, evaluations: u64) {
        self.0.fetch_add(evaluations, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Observation encoder: a shared two-layer Mish MLP applied to each state of
/// the window, with the per-step features concatenated.
#[derive(Clone, Debug)]
pub struct ObsEncoder {
    pub hidden: Linear,
    pub out: Linear,
    pub steps: usize,
    pub state_dim: usize,
}

impl ObsEncoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
        shape: &IoShape,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, "encoder.hidden", shape.state_dim, cfg.obs_hidden),
            out: Linear::new(store, rng, "encoder.out", cfg.obs_hidden, cfg.obs_dim),
            steps: shape.obs_steps,
            state_dim: shape.state_dim,
        }
    }

    /// Encodes rows of flattened windows `states[N × T_o·d_s]` into `g[N × T_o·d_obs]`.
    pub fn encode<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, states: &Tensor<T>) -> Result<Var> {
        let (n, width) = states.dims2()?;
        if width != self.steps * self.state_dim {
            return Err(shape_err(
                "encode_obs",
                format!(
                    "window has {width} values, expected {} steps × {}",
                    self.steps, self.state_dim
                ),
            ));
        }
        let mut feats = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let cols = step * self.state_dim..(step + 1) * self.state_dim;
            let data: Vec<T> = states.rows().flat_map(|r| r[cols.clone()].iter().copied()).collect();
            let s = tape.constant(Tensor::new([n, self.state_dim], data)?);
            let h = self.hidden.forward(tape, p, s)?;
            let h = tape.mish(h);
            feats.push(self.out.forward(tape, p, h)?);
        }
        tape.concat(&feats, 1)
    }
}

#[derive(Clone, Debug)]
pub struct MlpBody {
    pub layers: Vec<(Linear, FilmHead)>,
    pub out: Linear,
}

impl MlpBody {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &GeneratorConfig,
        dim: usize,
        cond_dim: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut width = dim;
        for (i, &h) in cfg.mlp_hidden.iter().enumerate() {
            let lin = Linear::new(store, rng, &format!("mlp.{i}.linear"), width, h);
            let film = FilmHead::new(store, rng, &format!("mlp.{i}.film"), cond_dim, h);
            layers.push((lin, film));
            width = h;
        }
        let out = Linear::new(store, rng, "mlp.out", width, dim);
        Self { layers, out }
    }

    /// `x[N×D]` with per-row conditioning `g[N×cond]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, g: Var) -> Result<Var> {
        let mut h = x;
        for (lin, film) in &self.layers {
            h = lin.forward(tape, p, h)?;
            h = film.modulate_rows(tape, p, h, g)?;
            h = tape.mish(h);
        }
        self.out.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub enum Body {
    Mlp(MlpBody),
    Unet(UnetBody),
}

/// Encoder plus body, optionally with an extra conditioning term added to
/// `g` by the caller.
#[derive(Clone, Debug)]
pub(crate) struct Network<T> {
    pub config: GeneratorConfig,
    pub shape: IoShape,
    pub params: ParamStore<T>,
    pub encoder: ObsEncoder,
    pub body: Body,
}

impl<T: Scalar> Network<T> {
    pub fn build(
        config: &GeneratorConfig,
        shape: &IoShape,
        store: ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate(shape)?;
        let mut store = store;
        let cond = config.cond_dim(shape);
        let encoder = ObsEncoder::new(&mut store, rng, config, shape);
        let body = match config.kind {
            Architecture::Mlp => Body::Mlp(MlpBody::new(&mut store, rng, config, shape.flat_dim(), cond)),
            Architecture::Unet1d => Body::Unet(UnetBody::new(&mut store, rng, config, shape, cond)),
        };
        Ok(Self {
            config: config.clone(),
            shape: *shape,
            params: store,
            encoder,
            body,
        })
    }

    fn check_inputs(&self, x: &Tensor<T>, states: &Tensor<T>) -> Result<usize> {
        let (n, d) = x.dims2()?;
        let (ns, w) = states.dims2()?;
        if d != self.shape.flat_dim() || ns != n || w != self.shape.obs_len() {
            return Err(shape_err(
                "generate",
                format!(
                    "inputs {:?} and states {:?} for chunk size {} and window {}",
                    x.shape(),
                    states.shape(),
                    self.shape.flat_dim(),
                    self.shape.obs_len()
                ),
            ));
        }
        Ok(n)
    }

    /// Runs the body on `x[N × H·D_a]`, calling `cond(rows)` for the
    /// conditioning of a row range.
    pub fn forward_with<F>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        x: &Tensor<T>,
        states: &Tensor<T>,
        cond_extra: F,
        probe: Option<&mut UnetProbe>,
    ) -> Result<Var>
    where
        F: Fn(&Tape<T>, Range<usize>) -> Result<Option<Var>>,
    {
        let n = self.check_inputs(x, states)?;
        let cond = |rows: Range<usize>| -> Result<Var> {
            let sub = slice_rows(states, rows.clone())?;
            let g = self.encoder.encode(tape, p, &sub)?;
            match cond_extra(tape, rows)? {
                Some(extra) => tape.add(g, extra),
                None => Ok(g),
            }
        };
        match &self.body {
            Body::Mlp(mlp) => {
                let xv = tape.constant(x.clone());
                mlp.forward(tape, p, xv, cond(0..n)?)
            }
            Body::Unet(unet) => {
                let (h, da) = (self.shape.horizon, self.shape.action_dim);
                let mut probe = probe;
                let mut outs = Vec::with_capacity(n);
                for i in 0..n {
                    let row = tape.constant(Tensor::new([h, da], x.row(i).to_vec())?);
                    let chan = tape.transpose(row)?;
                    let g = cond(i..i + 1)?;
                    let y = unet.forward(tape, p, chan, g, probe.as_deref_mut())?;
                    let y = tape.transpose(y)?;
                    outs.push(tape.reshape(y, [1, h * da])?);
                }
                tape.concat(&outs, 0)
            }
        }
    }
}

pub(crate) fn slice_rows<T: Scalar>(t: &Tensor<T>, rows: Range<usize>) -> Result<Tensor<T>> {
    let (_, c) = t.dims2()?;
    let n = rows.len();
    Tensor::new([n, c], t.data()[rows.start * c..rows.end * c].to_vec())
}

/// Timestep-free single-step generator `f(z, g)`.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    net: Network<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(config: &GeneratorConfig, shape: &IoShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: Network::build(config, shape, ParamStore::default(), &mut rng)?,
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

    pub fn encoder(&self) -> &ObsEncoder {
        &self.net.encoder
    }

    pub fn body(&self) -> &Body {
        &self.net.body
    }

    /// Differentiable forward pass over noise rows `z[N × H·D_a]` and
    /// flattened observation windows `states[N × T_o·d_s]`.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, z: &Tensor<T>, states: &Tensor<T>) -> Result<Var> {
        self.net.forward_with(tape, p, z, states, |_, _| Ok(None), None)
    }

    /// Forward pass with U-Net instrumentation (stage lengths, skip ablation).
    pub fn forward_probed(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        z: &Tensor<T>,
        states: &Tensor<T>,
        probe: &mut UnetProbe,
    ) -> Result<Var> {
        self.net.forward_with(tape, p, z, states, |_, _| Ok(None), Some(probe))
    }

    /// Inference: one forward evaluation per row of `z`.
    pub fn generate(&self, z: &Tensor<T>, states: &Tensor<T>, nfe: &NfeCounter) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.net.params.bind(&tape, false);
        let out = self.forward(&tape, &p, z, states)?;
        nfe.record(z.shape()[0] as u64);
        let value = tape.value(out).clone();
        Ok(value)
    }

    /// Conditioning vector for one observation window `states[T_o × d_s]`.
    pub fn encode_obs(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let (steps, dim) = states.dims2()?;
        let enc = &self.net.encoder;
        if steps != enc.steps || dim != enc.state_dim {
            return Err(shape_err(
                "encode_obs",
                format!("window {steps}×{dim}, expected {}×{}", enc.steps, enc.state_dim),
            ));
        }
        let tape = Tape::new();
        let p = self.net.params.bind(&tape, false);
        let flat = states.clone().reshape([1, steps * dim])?;
        let g = enc.encode(&tape, &p, &flat)?;
        let value = tape.value(g).clone();
        Ok(value)
    }
}

/// Standard normal noise rows.
pub fn sample_noise<T: Scalar>(rng: &mut impl rand::Rng, rows: usize, dim: usize) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            lit::<T>(v)
        })
        .collect();
    Tensor::new([rows, dim], data).expect("rows·dim samples")
}

/// Repeats one flattened observation window for `rows` samples.
pub fn repeat_window<T: Scalar>(window: &[T], rows: usize) -> Tensor<T> {
    let data = (0..rows).flat_map(|_| window.iter().copied()).collect();
    Tensor::new([rows, window.len()], data).expect("rows·window values")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_fn, loss_weights, weighted_sum, Tolerance};
    use rand::Rng;

    fn io(horizon: usize) -> IoShape {
        IoShape {
            action_dim: 2,
            horizon,
            state_dim: 3,
            obs_steps: 2,
        }
    }

    fn small(kind: Architecture) -> GeneratorConfig {
        GeneratorConfig {
            kind,
            obs_hidden: 6,
            obs_dim: 4,
            mlp_hidden: vec![8, 8],
            unet_widths: vec![4, 6, 8],
            groups: 2,
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new([rows, cols], data).unwrap()
    }

    #[test]
    fn encoder_with_zero_output_layer_returns_bias() {
        let shape = io(4);
        let mut gen = Generator::<f64>::new(&small(Architecture::Mlp), &shape, 1).unwrap();
        let out = gen.encoder().out.clone();
        *gen.params_mut().get_mut(out.w) = Tensor::zeros([6, 4]);
        let bias = Tensor::new([4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        *gen.params_mut().get_mut(out.b) = bias.clone();
        let g = gen.encode_obs(&Tensor::zeros([2, 3])).unwrap();
        assert_eq!(g.shape(), &[1, 8]);
        assert_eq!(&g.data()[..4], bias.data());
        assert_eq!(&g.data()[4..], bias.data());
    }

    #[test]
    fn encoder_is_deterministic_and_checks_window() {
        let shape = io(4);
        let gen = Generator::<f64>::new(&small(Architecture::Mlp), &shape, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random(&mut rng, 2, 3);
        assert_eq!(gen.encode_obs(&s).unwrap(), gen.encode_obs(&s).unwrap());
        assert!(gen.encode_obs(&random(&mut rng, 3, 3)).is_err());
        assert!(gen.encode_obs(&random(&mut rng, 2, 2)).is_err());
    }

    #[test]
    fn encoder_gradient_matches_differences() {
        let shape = io(4);
        let gen = Generator::<f64>::new(&small(Architecture::Mlp), &shape, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = random(&mut rng, 3, 6);
        let enc = gen.encoder().clone();
        let report = check_fn(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let g = enc.encode(tape, &p, &states)?;
                let sq = tape.mul(g, g)?;
                Ok(tape.sum(sq))
            },
            gen.params().tensors(),
            None,
            Tolerance::PIPELINE,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn film_identity_and_zero_scale() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = tape.constant(random(&mut rng, 3, 5));
        let ones = tape.constant(Tensor::ones([3]));
        let zeros = tape.constant(Tensor::zeros([3]));
        let beta = tape.constant(Tensor::new([3], vec![0.1, -2.0, 3.0]).unwrap());
        let same = film(&tape, h, ones, zeros).unwrap();
        assert_eq!(*tape.value(same), *tape.value(h));
        let flat = film(&tape, h, zeros, beta).unwrap();
        let v = tape.value(flat);
        for c in 0..3 {
            for t in 0..5 {
                assert_eq!(v.data()[c * 5 + t], tape.value(beta).data()[c]);
            }
        }
    }

    #[test]
    fn film_scale_gradient_is_the_normalized_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 6);
        let w = Tensor::new([4, 4, 5], (0..80).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
        let gamma = Tensor::new([4], vec![0.3, 1.2, -0.7, 0.9]).unwrap();
        let beta = Tensor::new([4], vec![0.0, 0.5, 0.1, -0.2]).unwrap();
        let build = |tape: &Tape<f64>, v: &[Var]| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let h = tape.conv1d(xv, wv, 1)?;
            let h = tape.group_norm(h, 2)?;
            film(tape, h, v[0], v[1])
        };
        let tape = Tape::new();
        let normalized = {
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let h = tape.conv1d(xv, wv, 1).unwrap();
            let h = tape.group_norm(h, 2).unwrap();
            tape.value(h).clone()
        };
        // d h'[c, t] / d γ_c for one output entry at a time
        for c in 0..4 {
            for t in [0usize, 3, 5] {
                let tape = Tape::new();
                let g = tape.leaf(gamma.clone());
                let b = tape.leaf(beta.clone());
                let out = build(&tape, &[g, b]).unwrap();
                let mut sel = Tensor::zeros([4, 6]);
                sel.data_mut()[c * 6 + t] = 1.0;
                let loss = weighted_sum(&tape, out, &sel).unwrap();
                let grads = tape.backward(loss).unwrap();
                let dg = grads.get(g).unwrap();
                assert!((dg.data()[c] - normalized.data()[c * 6 + t]).abs() < 1e-12);
            }
        }
        let weights = loss_weights(&mut rng, &[4, 6]);
        let report = check_fn(
            |tape, v| {
                let y = build(tape, v)?;
                weighted_sum(tape, y, &weights)
            },
            &[gamma, beta],
            None,
            Tolerance::PIPELINE,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn output_shapes_for_both_kinds() {
        let shape = io(16);
        for kind in [Architecture::Mlp, Architecture::Unet1d] {
            let gen = Generator::<f64>::new(&small(kind), &shape, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let z = sample_noise::<f64>(&mut rng, 3, 32);
            let s = random(&mut rng, 3, 6);
            let nfe = NfeCounter::new();
            let out = gen.generate(&z, &s, &nfe).unwrap();
            assert_eq!(out.shape(), &[3, 32]);
            assert_eq!(nfe.get(), 3);
            let traj = ActionTrajectory::from_flat(out.row(0), 16, 2).unwrap();
            assert_eq!(traj.waypoint(15).len(), 2);
            assert!(gen.generate(&random(&mut rng, 3, 31), &s, &nfe).is_err());
            assert!(gen.generate(&z, &random(&mut rng, 2, 6), &nfe).is_err());
        }
    }

    #[test]
    fn unet_rejects_bad_config() {
        let shape = io(6);
        assert!(Generator::<f64>::new(&small(Architecture::Unet1d), &shape, 0).is_err());
        let mut cfg = small(Architecture::Unet1d);
        cfg.unet_widths = vec![4, 8];
        assert!(Generator::<f64>::new(&cfg, &io(16), 0).is_err());
        cfg.unet_widths = vec![4, 0, 8];
        assert!(Generator::<f64>::new(&cfg, &io(16), 0).is_err());
    }

    #[test]
    fn unet_stage_lengths() {
        let shape = io(16);
        let gen = Generator::<f64>::new(&small(Architecture::Unet1d), &shape, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = sample_noise::<f64>(&mut rng, 1, 32);
        let s = random(&mut rng, 1, 6);
        let tape = Tape::new();
        let p = gen.params().bind(&tape, false);
        let mut probe = UnetProbe::default();
        gen.forward_probed(&tape, &p, &z, &s, &mut probe).unwrap();
        assert_eq!(probe.lengths, vec![16, 16, 8, 8, 4, 4, 4, 4, 4, 4, 8, 8, 16, 16]);
    }

    #[test]
    fn unet_skips_matter() {
        let shape = io(16);
        let gen = Generator::<f64>::new(&small(Architecture::Unet1d), &shape, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = sample_noise::<f64>(&mut rng, 1, 32);
        let s = random(&mut rng, 1, 6);
        let run = |skip: Option<usize>| {
            let tape = Tape::new();
            let p = gen.params().bind(&tape, false);
            let mut probe = UnetProbe {
                zero_skip: skip,
                ..Default::default()
            };
            let out = gen.forward_probed(&tape, &p, &z, &s, &mut probe).unwrap();
            let v = tape.value(out).clone();
            v
        };
        let base = run(None);
        for level in 0..3 {
            let ablated = run(Some(level));
            let diff = base.zip_map(&ablated, |a, b| a - b).unwrap();
            assert!(diff.max_abs() > 1e-6, "skip {level} has no effect");
        }
    }

    #[test]
    fn output_depends_on_noise() {
        let shape = io(16);
        for kind in [Architecture::Mlp, Architecture::Unet1d] {
            let gen = Generator::<f64>::new(&small(kind), &shape, 14).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let z = sample_noise::<f64>(&mut rng, 2, 32);
            let s = repeat_window(random(&mut rng, 1, 6).data(), 2);
            let out = gen.generate(&z, &s, &NfeCounter::new()).unwrap();
            let diff: f64 = out.row(0).iter().zip(out.row(1)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let shape = io(16);
        for kind in [Architecture::Mlp, Architecture::Unet1d] {
            let gen = Generator::<f64>::new(&small(kind), &shape, 16).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let z = sample_noise::<f64>(&mut rng, 2, 32);
            let s = random(&mut rng, 2, 6);
            let tape = Tape::new();
            let p = gen.params().bind(&tape, true);
            let out = gen.forward(&tape, &p, &z, &s).unwrap();
            let w = loss_weights(&mut rng, &[2, 32]);
            let loss = weighted_sum(&tape, out, &w).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (i, name) in gen.params().names().iter().enumerate() {
                let g = grads.get(p.vars()[i]).expect(name);
                assert!(g.max_abs() > 0.0, "{kind:?}: {name} has zero gradient");
            }
        }
    }

    /// Directional derivative of the network output along a random parameter
    /// direction, compared with a central difference of the forward pass.
    fn jvp_check(kind: Architecture) {
        let shape = io(16);
        let gen = Generator::<f64>::new(&small(kind), &shape, 18).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = sample_noise::<f64>(&mut rng, 2, 32);
        let s = random(&mut rng, 2, 6);
        let dir: Vec<Tensor<f64>> = gen
            .params()
            .tensors()
            .iter()
            .map(|t| {
                let data = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let eval = |eps: f64| {
            let mut g2 = gen.clone();
            for (t, d) in g2.params_mut().tensors_mut().iter_mut().zip(&dir) {
                *t = t.zip_map(d, |a, b| a + eps * b).unwrap();
            }
            g2.generate(&z, &s, &NfeCounter::new()).unwrap()
        };
        let h = 1e-6;
        let fd = eval(h).zip_map(&eval(-h), |a, b| (a - b) / (2.0 * h)).unwrap();
        // J·v via reverse mode: one backward per output element.
        for k in (0..64).step_by(5) {
            let tape = Tape::new();
            let p = gen.params().bind(&tape, true);
            let out = gen.forward(&tape, &p, &z, &s).unwrap();
            let mut sel = Tensor::zeros([2, 32]);
            sel.data_mut()[k] = 1.0;
            let loss = weighted_sum(&tape, out, &sel).unwrap();
            let grads = tape.backward(loss).unwrap();
            let jv: f64 = p
                .vars()
                .iter()
                .zip(&dir)
                .map(|(&v, d)| {
                    let g = grads.get(v).unwrap();
                    g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum();
            let num = fd.data()[k];
            let rel = (jv - num).abs() / jv.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "{kind:?} element {k}: {jv} vs {num}");
        }
    }

    #[test]
    fn mlp_jvp_matches_differences() {
        jvp_check(Architecture::Mlp);
    }

    #[test]
    fn unet_jvp_matches_differences() {
        jvp_check(Architecture::Unet1d);
    }

    #[test]
    fn nfe_is_additive() {
        let shape = io(4);
        let gen = Generator::<f64>::new(&small(Architecture::Mlp), &shape, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let nfe = NfeCounter::new();
        let s = random(&mut rng, 1, 6);
        gen.generate(&sample_noise(&mut rng, 1, 8), &s, &nfe).unwrap();
        assert_eq!(nfe.get(), 1);
        for _ in 0..3 {
            gen.generate(&sample_noise(&mut rng, 1, 8), &s, &nfe).unwrap();
        }
        assert_eq!(nfe.get(), 4);
    }

    #[test]
    fn same_seed_same_network() {
        let shape = io(16);
        let a = Generator::<f64>::new(&small(Architecture::Unet1d), &shape, 22).unwrap();
        let b = Generator::<f64>::new(&small(Architecture::Unet1d), &shape, 22).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
