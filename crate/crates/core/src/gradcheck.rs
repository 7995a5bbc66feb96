//! Central-difference gradient verification.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::drift::{aggregate_multi_temp, DEFAULT_TEMPERATURES};
use crate::error::Result;
use crate::nets::{Architecture, Bound, Generator, GeneratorConfig, IoShape};
use crate::train::{drift_loss, mse_loss, pair_demos, total_loss};
use crate::tensor::{Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Relative error bound applied where `|analytic| > floor`.
    pub rel: f64,
    /// Absolute error bound applied where `|analytic| <= floor`.
    pub abs: f64,
    pub floor: f64,
}

impl Tolerance {
    pub const OP: Self = Self {
        rel: 1e-5,
        abs: 1e-8,
        floor: 1e-8,
    };
    pub const PIPELINE: Self = Self {
        rel: 1e-4,
        abs: 1e-8,
        floor: 1e-8,
    };
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.failures += other.failures;
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out).item();
    v.ok_or_else(|| crate::error::Error::NonScalarLoss(tape.shape(out)))
}

/// Compares analytic gradients of a scalar function against central
/// differences. `select` picks which `(input, element)` pairs to perturb;
/// `None` checks every element.
pub fn check_fn<F>(
    f: F,
    inputs: &[Tensor<f64>],
    select: Option<&[(usize, usize)]>,
    tol: Tolerance,
) -> Result<CheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let all: Vec<(usize, usize)>;
    let pairs = match select {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for &(i, j) in pairs {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        let abs_err = (a - numeric).abs();
        report.checked += 1;
        if a.abs() > tol.floor {
            let rel = abs_err / a.abs().max(numeric.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel >= tol.rel {
                report.failures += 1;
            }
        } else {
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err >= tol.abs {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Weights bounded away from zero, used to turn a tensor output into a
/// scalar loss with generic (non-degenerate) upstream gradients.
/// Random projection weights `±U(0.5, 1.5)` that turn a tensor output into a
/// generic scalar loss.
pub fn loss_weights(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn weighted_sum(tape: &Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Names of the differentiable ops covered by [`op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scalar_broadcast",
    "matmul",
    "transpose",
    "conv1d_stride1",
    "conv1d_stride2",
    "group_norm",
    "mish",
    "softmax_rows",
    "concat",
    "upsample2x",
    "axis_add",
    "axis_mul",
    "mean",
    "reshape",
];

/// Runs `trials` randomized central-difference checks of one op.
pub fn check_op(name: &str, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = CheckReport::default();
    for _ in 0..trials {
        let r = rng.random_range(1..5usize);
        let c = rng.random_range(1..6usize);
        let report = match name {
            "add" | "sub" | "mul" | "div" => {
                let a = random_tensor(&mut rng, &[r, c], 1.0);
                let mut b = random_tensor(&mut rng, &[r, c], 1.0);
                if name == "div" {
                    b = b.map(|v| v.signum() * (0.5 + v.abs()));
                }
                let w = loss_weights(&mut rng, &[r, c]);
                let name = name.to_string();
                check_fn(
                    move |t, v| {
                        let y = match name.as_str() {
                            "add" => t.add(v[0], v[1])?,
                            "sub" => t.sub(v[0], v[1])?,
                            "mul" => t.mul(v[0], v[1])?,
                            _ => t.div(v[0], v[1])?,
                        };
                        weighted_sum(t, y, &w)
                    },
                    &[a, b],
                    None,
                    Tolerance::OP,
                )?
            }
            "scalar_broadcast" => {
                let a = random_tensor(&mut rng, &[r, c], 1.0);
                let s = Tensor::scalar(rng.random_range(0.5..1.5));
                let w = loss_weights(&mut rng, &[r, c]);
                check_fn(
                    move |t, v| {
                        let y = t.mul(v[0], v[1])?;
                        let y = t.div(y, v[1])?;
                        let y = t.mul(v[1], y)?;
                        weighted_sum(t, y, &w)
                    },
                    &[a, s],
                    None,
                    Tolerance::OP,
                )?
            }
            "matmul" => {
                let k = rng.random_range(1..5usize);
                let a = random_tensor(&mut rng, &[r, k], 1.0);
                let b = random_tensor(&mut rng, &[k, c], 1.0);
                let w = loss_weights(&mut rng, &[r, c]);
                check_fn(
                    move |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        weighted_sum(t, y, &w)
                    },
                    &[a, b],
                    None,
                    Tolerance::OP,
                )?
            }
            "transpose" | "reshape" => {
                let a = random_tensor(&mut rng, &[r, c], 1.0);
                let w = loss_weights(&mut rng, &[c, r]);
                let tr = name == "transpose";
                check_fn(
                    move |t, v| {
                        let y = if tr {
                            t.transpose(v[0])?
                        } else {
                            t.reshape(v[0], [c, r])?
                        };
                        let sq = t.mul(y, y)?;
                        weighted_sum(t, sq, &w)
                    },
                    &[a],
                    None,
                    Tolerance::OP,
                )?
            }
            "conv1d_stride1" | "conv1d_stride2" => {
                let stride = if name.ends_with('1') { 1 } else { 2 };
                let c_in = rng.random_range(1..4usize);
                let c_out = rng.random_range(1..4usize);
                let len = rng.random_range(1..10usize);
                let x = random_tensor(&mut rng, &[c_in, len], 1.0);
                let k = random_tensor(&mut rng, &[c_out, c_in, 5], 1.0);
                let out_len = crate::tensor::kernels::conv1d_out_len(len, stride);
                let w = loss_weights(&mut rng, &[c_out, out_len]);
                check_fn(
                    move |t, v| {
                        let y = t.conv1d(v[0], v[1], stride)?;
                        weighted_sum(t, y, &w)
                    },
                    &[x, k],
                    None,
                    Tolerance::OP,
                )?
            }
            "group_norm" => {
                let groups = rng.random_range(1..4usize);
                let ch = groups * rng.random_range(1..4usize);
                // Two-element groups normalize to ±1 and their gradient is
                // below what a central difference at FD_STEP resolves; see
                // the stencil test below.
                let len = rng.random_range(3..6usize);
                let x = random_tensor(&mut rng, &[ch, len], 2.0);
                let w = loss_weights(&mut rng, &[ch, len]);
                check_fn(
                    move |t, v| {
                        let y = t.group_norm(v[0], groups)?;
                        weighted_sum(t, y, &w)
                    },
                    &[x],
                    None,
                    Tolerance::OP,
                )?
            }
            "mish" => {
                let x = random_tensor(&mut rng, &[r, c], 6.0);
                let w = loss_weights(&mut rng, &[r, c]);
                check_fn(
                    move |t, v| {
                        let y = t.mish(v[0]);
                        weighted_sum(t, y, &w)
                    },
                    &[x],
                    None,
                    Tolerance::OP,
                )?
            }
            "softmax_rows" => {
                let x = random_tensor(&mut rng, &[r, c + 1], 3.0);
                let w = loss_weights(&mut rng, &[r, c + 1]);
                check_fn(
                    move |t, v| {
                        let y = t.softmax_rows(v[0])?;
                        weighted_sum(t, y, &w)
                    },
                    &[x],
                    None,
                    Tolerance::OP,
                )?
            }
            "concat" => {
                let r2 = rng.random_range(1..4usize);
                let axis = rng.random_range(0..2usize);
                let (sa, sb, out) = if axis == 0 {
                    ([r, c], [r2, c], [2 * r + r2, c])
                } else {
                    ([r, c], [r, r2], [r, 2 * c + r2])
                };
                let a = random_tensor(&mut rng, &sa, 1.0);
                let b = random_tensor(&mut rng, &sb, 1.0);
                let w = loss_weights(&mut rng, &out);
                check_fn(
                    move |t, v| {
                        // repeating the first part exercises fan-out accumulation
                        let y = t.concat(&[v[0], v[1], v[0]], axis)?;
                        let sq = t.mul(y, y)?;
                        weighted_sum(t, sq, &w)
                    },
                    &[a, b],
                    None,
                    Tolerance::OP,
                )?
            }
            "upsample2x" => {
                let x = random_tensor(&mut rng, &[r, c], 1.0);
                let w = loss_weights(&mut rng, &[r, 2 * c]);
                check_fn(
                    move |t, v| {
                        let y = t.upsample2x(v[0])?;
                        let sq = t.mul(y, y)?;
                        weighted_sum(t, sq, &w)
                    },
                    &[x],
                    None,
                    Tolerance::OP,
                )?
            }
            "axis_add" | "axis_mul" => {
                let axis = rng.random_range(0..2usize);
                let x = random_tensor(&mut rng, &[r, c], 1.0);
                let vlen = if axis == 0 { r } else { c };
                let v = random_tensor(&mut rng, &[vlen], 1.0);
                let w = loss_weights(&mut rng, &[r, c]);
                let mul = name == "axis_mul";
                check_fn(
                    move |t, vs| {
                        let y = if mul {
                            t.axis_mul(vs[0], vs[1], axis)?
                        } else {
                            t.axis_add(vs[0], vs[1], axis)?
                        };
                        let sq = t.mul(y, y)?;
                        weighted_sum(t, sq, &w)
                    },
                    &[x, v],
                    None,
                    Tolerance::OP,
                )?
            }
            "mean" => {
                let x = random_tensor(&mut rng, &[r, c], 1.0);
                check_fn(
                    |t, v| {
                        let sq = t.mul(v[0], v[0])?;
                        let m = t.mean(sq);
                        Ok(t.add_scalar(t.scale(m, 3.0), 1.0))
                    },
                    &[x],
                    None,
                    Tolerance::OP,
                )?
            }
            other => {
                return Err(crate::error::Error::InvalidArgument(format!(
                    "unknown op {other:?}"
                )))
            }
        };
        total.merge(&report);
    }
    Ok(total)
}

/// Runs every op in [`SUITE_OPS`] and returns `(name, report)` pairs.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, CheckReport)>> {
    SUITE_OPS
        .iter()
        .enumerate()
        .map(|(i, &name)| Ok((name, check_op(name, trials, seed.wrapping_add(i as u64))?)))
        .collect()
}

/// Checks the composite training loss `w·L_drift + (1 − w)·L_mse` through
/// the full generator against central differences. The drift target `x̂ + V`
/// and the demo pairing are computed once at the base parameters and held
/// fixed on the numeric side, which is what the stop-gradient means. At most
/// `max_entries` parameter entries are perturbed.
pub fn pipeline_check(kind: Architecture, seed: u64, max_entries: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = IoShape {
        action_dim: 2,
        horizon: 8,
        state_dim: 2,
        obs_steps: 2,
    };
    let cfg = GeneratorConfig {
        kind,
        obs_hidden: 6,
        obs_dim: 4,
        mlp_hidden: vec![12, 12],
        unet_widths: vec![4, 6, 8],
        groups: 2,
    };
    let gen = Generator::<f64>::new(&cfg, &shape, seed)?;
    let (n, m, d) = (4, 5, shape.flat_dim());
    let z = random_tensor(&mut rng, &[n, d], 1.5);
    let states = random_tensor(&mut rng, &[n, shape.obs_len()], 1.0);
    let demos = random_tensor(&mut rng, &[m, d], 1.0);
    let y = pair_demos(&mut rng, &demos, n)?;
    let xhat = gen.generate(&z, &states, &crate::nets::NfeCounter::new())?;
    let v = aggregate_multi_temp(&xhat, &demos, &DEFAULT_TEMPERATURES)?.total;
    let target = xhat.zip_map(&v, |a, b| a + b)?;
    let w = rng.random_range(0.2..0.8);

    let params = gen.params().tensors();
    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let select: Vec<(usize, usize)> = if all.len() <= max_entries {
        all
    } else {
        (0..max_entries).map(|_| all[rng.random_range(0..all.len())]).collect()
    };
    check_fn(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let out = gen.forward(tape, &p, &z, &states)?;
            let field = target.zip_map(&tape.value(out), |c, x| c - x)?;
            let ld = drift_loss(tape, out, &field)?;
            let lm = mse_loss(tape, out, &y)?;
            total_loss(tape, ld, lm, w, 1.0 - w)
        },
        params,
        Some(&select),
        Tolerance::PIPELINE,
    )
}
