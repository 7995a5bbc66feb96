use rand::Rng;

use super::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{kernels::CONV_KERNEL, Tape, Tensor, Var};

/// Dense layer on row batches: `x[N×in] · W[in×out] + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::with_init(store, rng, name, in_dim, out_dim, 1.0, 0.0)
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, &[in_dim, out_dim], in_dim, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::full([out_dim], T::of(bias)));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.w))?;
        tape.axis_add(h, p.var(self.b), 1)
    }
}

/// Kernel-5 temporal convolution on `x[C×T]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * CONV_KERNEL;
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, &[c_out, c_in, CONV_KERNEL], fan_in, 1.0),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros([c_out]));
        Self { w, b, stride }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.conv1d(x, p.var(self.w), self.stride)?;
        tape.axis_add(h, p.var(self.b), 0)
    }
}

/// Channel-mixing 1×1 convolution on `x[C×T]`, i.e. `W[out×in] · x + b`.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in_uniform(rng, &[c_out, c_in], c_in, 1.0),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros([c_out]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(p.var(self.w), x)?;
        tape.axis_add(h, p.var(self.b), 0)
    }
}

/// Predicts per-channel scale `γ` and shift `β` from the conditioning
/// vector through a Mish-activated linear layer.
///
/// Heads start near identity modulation (`γ ≈ 1`, `β ≈ 0`).
#[derive(Clone, Debug)]
pub struct FilmHead {
    pub gamma: Linear,
    pub beta: Linear,
}

/// Initial weight gain of the FiLM heads relative to fan-in scaling.
const FILM_GAIN: f64 = 0.1;

impl FilmHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cond_dim: usize,
        channels: usize,
    ) -> Self {
        Self {
            gamma: Linear::with_init(
                store,
                rng,
                &format!("{name}.gamma"),
                cond_dim,
                channels,
                FILM_GAIN,
                1.0,
            ),
            beta: Linear::with_init(
                store,
                rng,
                &format!("{name}.beta"),
                cond_dim,
                channels,
                FILM_GAIN,
                0.0,
            ),
        }
    }

    /// `(γ, β)`, each `[rows(g) × C]`.
    pub fn params<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, g: Var) -> Result<(Var, Var)> {
        let a = tape.mish(g);
        Ok((
            self.gamma.forward(tape, p, a)?,
            self.beta.forward(tape, p, a)?,
        ))
    }

    /// `γ ⊙ h + β` for a row batch `h[N×C]` with per-row conditioning.
    pub fn modulate_rows<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, h: Var, g: Var) -> Result<Var> {
        let (gamma, beta) = self.params(tape, p, g)?;
        let scaled = tape.mul(h, gamma)?;
        tape.add(scaled, beta)
    }

    /// `γ ⊙ h + β` broadcast over time for `h[C×T]` and a single `g[1×cond]`.
    pub fn modulate_channels<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        h: Var,
        g: Var,
    ) -> Result<Var> {
        let (gamma, beta) = self.params(tape, p, g)?;
        film(tape, h, gamma, beta)
    }
}

/// Feature-wise modulation `γ ⊙ h + β` of `h[C×T]`, with `γ` and `β` holding
/// one value per channel.
pub fn film<T: Scalar>(tape: &Tape<T>, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = tape.axis_mul(h, gamma, 0)?;
    tape.axis_add(scaled, beta, 0)
}

/// Group count used for `channels`: the requested count when it divides the
/// width, otherwise the largest divisor not exceeding `min(requested, C/2)`.
pub fn group_count(channels: usize, requested: usize) -> usize {
    if requested > 0 && channels.is_multiple_of(requested) {
        return requested;
    }
    let mut g = requested.min(channels / 2).max(1);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}
