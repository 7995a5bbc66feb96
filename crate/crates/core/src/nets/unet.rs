use rand::Rng;

use super::layers::{group_count, Conv, FilmHead, Pointwise};
use super::params::{Bound, ParamStore};
use super::{GeneratorConfig, IoShape};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Optional instrumentation for one U-Net pass.
#[derive(Clone, Debug, Default)]
pub struct UnetProbe {
    /// Temporal length after every ResBlock, in execution order.
    pub lengths: Vec<usize>,
    /// Replace the skip tensor of this level with zeros.
    pub zero_skip: Option<usize>,
}

/// `conv → GN → FiLM → Mish → conv → GN → Mish` plus a residual path.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub film: FilmHead,
    pub groups: usize,
    pub shortcut: Option<Pointwise>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: usize,
        groups: usize,
    ) -> Self {
        Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 1),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 1),
            film: FilmHead::new(store, rng, &format!("{name}.film"), cond_dim, c_out),
            groups: group_count(c_out, groups),
            shortcut: (c_in != c_out)
                .then(|| Pointwise::new(store, rng, &format!("{name}.skip"), c_in, c_out)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, g: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.group_norm(h, self.groups)?;
        let h = self.film.modulate_channels(tape, p, h, g)?;
        let h = tape.mish(h);
        let h = self.conv2.forward(tape, p, h)?;
        let h = tape.group_norm(h, self.groups)?;
        let h = tape.mish(h);
        let res = match &self.shortcut {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, res)
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub blocks: [ResBlock; 2],
    /// Stride-2 downsample (encoder levels above the bottom only).
    pub down: Option<Conv>,
}

/// Three-level 1-D U-Net over `x[D_a × H]`.
#[derive(Clone, Debug)]
pub struct UnetBody {
    pub encoder: Vec<Level>,
    pub middle: [ResBlock; 2],
    pub decoder: Vec<Level>,
    pub head_conv: Conv,
    pub head_groups: usize,
    pub proj: Pointwise,
}

impl UnetBody {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &GeneratorConfig,
        shape: &IoShape,
        cond: usize,
    ) -> Self {
        let w = &cfg.unet_widths;
        let g = cfg.groups;
        let levels = w.len();
        let mut encoder = Vec::with_capacity(levels);
        let mut c = shape.action_dim;
        for (s, &ws) in w.iter().enumerate() {
            let name = format!("unet.down{s}");
            let blocks = [
                ResBlock::new(store, rng, &format!("{name}.res0"), c, ws, cond, g),
                ResBlock::new(store, rng, &format!("{name}.res1"), ws, ws, cond, g),
            ];
            let down = (s + 1 < levels).then(|| Conv::new(store, rng, &format!("{name}.down"), ws, ws, 2));
            encoder.push(Level { blocks, down });
            c = ws;
        }
        let top = w[levels - 1];
        let middle = [
            ResBlock::new(store, rng, "unet.mid.res0", top, top, cond, g),
            ResBlock::new(store, rng, "unet.mid.res1", top, top, cond, g),
        ];
        let mut decoder = Vec::with_capacity(levels);
        for s in (0..levels).rev() {
            let name = format!("unet.up{s}");
            let blocks = [
                ResBlock::new(store, rng, &format!("{name}.res0"), c + w[s], w[s], cond, g),
                ResBlock::new(store, rng, &format!("{name}.res1"), w[s], w[s], cond, g),
            ];
            decoder.push(Level { blocks, down: None });
            c = w[s];
        }
        Self {
            encoder,
            middle,
            decoder,
            head_conv: Conv::new(store, rng, "unet.head.conv", c, c, 1),
            head_groups: group_count(c, g),
            proj: Pointwise::new(store, rng, "unet.head.proj", c, shape.action_dim),
        }
    }

    /// `x[D_a × H]`, `g[1 × cond]` → `[D_a × H]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        x: Var,
        g: Var,
        mut probe: Option<&mut UnetProbe>,
    ) -> Result<Var> {
        let zero_skip = probe.as_ref().and_then(|pr| pr.zero_skip);
        let mut trace = |tape: &Tape<T>, v: Var| {
            if let Some(pr) = probe.as_deref_mut() {
                pr.lengths.push(tape.shape(v)[1]);
            }
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            for block in &level.blocks {
                h = block.forward(tape, p, h, g)?;
                trace(tape, h);
            }
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.forward(tape, p, h)?;
            }
        }
        for block in &self.middle {
            h = block.forward(tape, p, h, g)?;
            trace(tape, h);
        }
        let levels = self.decoder.len();
        for (i, level) in self.decoder.iter().enumerate() {
            let s = levels - 1 - i;
            let mut skip = skips[s];
            if zero_skip == Some(s) {
                skip = tape.constant(Tensor::zeros(tape.shape(skip)));
            }
            h = tape.concat(&[h, skip], 0)?;
            for block in &level.blocks {
                h = block.forward(tape, p, h, g)?;
                trace(tape, h);
            }
            if s > 0 {
                h = tape.upsample2x(h)?;
            }
        }
        let h = self.head_conv.forward(tape, p, h)?;
        let h = tape.group_norm(h, self.head_groups)?;
        let h = tape.mish(h);
        self.proj.forward(tape, p, h)
    }
}
