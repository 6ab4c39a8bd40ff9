//! The noise-prediction network: a small convolutional U-Net with a
//! sinusoidal timestep embedding and FiLM conditioning at every level.
//!
//! Layout for depth `D` (channel widths `width · 2^i`):
//!
//! ```text
//! conv_in ─ down0 ─ pool ─ conv ─ down1 ─ pool ─ … ─ mid
//!             │                     │                 │
//!           merge0 ─ up0 ◄─ ups ◄─ merge1 ─ up1 ◄─ ups ┘ ─ conv_out
//! ```
//!
//! Each `down*`, `up*`, and `mid` is a residual block whose inner
//! normalization is modulated by a scale/shift projected from the joint
//! time + text embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Noisy latents only.
    Base,
    /// Noisy latents, masked-image latents, and the latent-resolution mask.
    Inpaint,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::Inpaint => "inpaint",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub variant: Variant,
    pub latent_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Number of diffusion timesteps `T`; inputs must satisfy `t < T`.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Inpaint,
            latent_channels: 12,
            width: 32,
            depth: 2,
            time_dim: 64,
            cond_dim: 64,
            timesteps: 100,
        }
    }
}

enum Init {
    /// He-normal with the given fan-in, optionally damped.
    He(usize, f64),
    Zero,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct SpecBuilder {
    out: Vec<ParamSpec>,
    emb: usize,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.out.push(ParamSpec { name, shape, init });
    }

    fn linear_damped(&mut self, name: &str, i: usize, o: usize, damp: f64) {
        self.push(format!("{name}.weight"), vec![i, o], Init::He(i, damp));
        self.push(format!("{name}.bias"), vec![o], Init::Zero);
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) {
        self.linear_damped(name, i, o, 1.0);
    }

    fn conv(&mut self, name: &str, i: usize, o: usize, k: usize, damp: f64) {
        self.push(format!("{name}.weight"), vec![o, i, k, k], Init::He(i * k * k, damp));
        self.push(format!("{name}.bias"), vec![o], Init::Zero);
    }

    fn resblock(&mut self, name: &str, ch: usize) {
        self.conv(&format!("{name}.conv1"), ch, ch, 3, 1.0);
        self.conv(&format!("{name}.conv2"), ch, ch, 3, 0.5);
        let emb = self.emb;
        self.linear_damped(&format!("{name}.film_scale"), emb, ch, 0.1);
        self.linear_damped(&format!("{name}.film_shift"), emb, ch, 0.1);
    }
}

impl DenoiserConfig {
    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Base => self.latent_channels,
            Variant::Inpaint => 2 * self.latent_channels + 1,
        }
    }

    /// Width of the joint time/text embedding.
    pub fn emb_dim(&self) -> usize {
        4 * self.width
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.width << level
    }

    fn validate(&self) -> Result<()> {
        if self.latent_channels == 0
            || self.width == 0
            || self.depth == 0
            || self.time_dim < 2
            || self.time_dim % 2 != 0
            || self.cond_dim == 0
            || self.timesteps < 2
        {
            return Err(Error::Config(format!("invalid denoiser config {self:?}")));
        }
        Ok(())
    }

    fn specs(&self) -> Vec<ParamSpec> {
        let emb = self.emb_dim();
        let mut b = SpecBuilder {
            out: Vec::new(),
            emb,
        };
        b.linear("unet.time.fc1", self.time_dim, emb);
        b.linear("unet.time.fc2", emb, emb);
        b.linear("unet.cond.fc", self.cond_dim, emb);
        b.conv("unet.conv_in", self.input_channels(), self.width, 3, 1.0);
        for i in 0..self.depth {
            let ch = self.level_channels(i);
            b.resblock(&format!("unet.down{i}"), ch);
            if i + 1 < self.depth {
                b.conv(&format!("unet.down{i}.to_next"), ch, self.level_channels(i + 1), 3, 1.0);
            }
        }
        let deepest = self.level_channels(self.depth - 1);
        b.resblock("unet.mid", deepest);
        for i in (0..self.depth).rev() {
            let ch = self.level_channels(i);
            let below = if i + 1 < self.depth {
                self.level_channels(i + 1)
            } else {
                deepest
            };
            b.conv(&format!("unet.up{i}.merge"), below + ch, ch, 1, 1.0);
            b.resblock(&format!("unet.up{i}"), ch);
        }
        b.conv("unet.conv_out", self.width, self.latent_channels, 3, 0.5);
        b.out
    }

    /// Parameter names and shapes; this list is the transplant contract.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.specs().into_iter().map(|s| (s.name, s.shape)).collect()
    }

    /// Seeded He-style initialization.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        for s in self.specs() {
            let t = match s.init {
                Init::He(fan_in, damp) => {
                    Tensor::randn(&s.shape, damp * (2.0 / fan_in as f64).sqrt(), rng)
                }
                Init::Zero => Tensor::zeros(&s.shape),
            };
            p.insert(s.name, t);
        }
        Ok(p)
    }
}

fn groups_for(ch: usize) -> usize {
    (1..=8).rev().find(|g| ch % g == 0).unwrap_or(1)
}

/// Sinusoidal embedding: `[sin(t·f_k)…, cos(t·f_k)…]` with
/// `f_k = 10000^(−k/half)`.
pub fn timestep_embed(t: usize, dim: usize, timesteps: usize) -> Result<Vec<f64>> {
    if t >= timesteps {
        return Err(Error::TimestepRange {
            t,
            lo: 0,
            hi: timesteps,
        });
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut out = Vec::with_capacity(dim);
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(out)
}

/// A U-Net whose parameters are recorded on a tape.
pub struct BoundUnet<'t, T: Real> {
    config: DenoiserConfig,
    tape: &'t Tape<T>,
    params: Bindings<'t, T>,
}

impl<'t, T: Real> BoundUnet<'t, T> {
    pub fn new(config: DenoiserConfig, tape: &'t Tape<T>, params: Bindings<'t, T>) -> Self {
        Self {
            config,
            tape,
            params,
        }
    }

    pub fn bind(config: DenoiserConfig, tape: &'t Tape<T>, store: &ParamStore<T>) -> Self {
        Self::new(config, tape, store.bind(tape))
    }

    pub fn bindings(&self) -> &Bindings<'t, T> {
        &self.params
    }

    fn p(&self, name: &str) -> Result<Var<'t, T>> {
        self.params.get(name)
    }

    fn linear(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        x.linear(self.p(&format!("{name}.weight"))?, self.p(&format!("{name}.bias"))?)
    }

    fn conv(&self, x: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        x.conv2d(self.p(&format!("{name}.weight"))?, self.p(&format!("{name}.bias"))?)
    }

    fn resblock(&self, x: Var<'t, T>, emb: Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let ch = x.shape()[1];
        let g = groups_for(ch);
        let h = self.conv(x.group_norm(g)?.silu(), &format!("{name}.conv1"))?;
        let scale = self.linear(emb, &format!("{name}.film_scale"))?;
        let shift = self.linear(emb, &format!("{name}.film_shift"))?;
        let h = h.group_norm(g)?.film(scale, shift)?.silu();
        let h = self.conv(h, &format!("{name}.conv2"))?;
        x.add(h)
    }

    fn embedding(&self, timesteps: &[usize], cond: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let mut data = Vec::with_capacity(timesteps.len() * c.time_dim);
        for &t in timesteps {
            data.extend(timestep_embed(t, c.time_dim, c.timesteps)?.into_iter().map(T::lit));
        }
        let temb = self
            .tape
            .constant(Tensor::new(&[timesteps.len(), c.time_dim], data)?);
        let te = self.linear(self.linear(temb, "unet.time.fc1")?.silu(), "unet.time.fc2")?;
        let ce = self.linear(cond, "unet.cond.fc")?;
        Ok(te.add(ce)?.silu())
    }
}

impl<'t, T: Real> Denoiser<'t, T> for BoundUnet<'t, T> {
    fn variant(&self) -> Variant {
        self.config.variant
    }

    fn predict_noise(&self, input: DenoiserInput<'_, 't, T>) -> Result<Var<'t, T>> {
        let c = &self.config;
        let x = input.network_input(c.variant)?;
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::InvalidShape {
                op: "predict_noise",
                shape,
                reason: "expected [N, C, H, W]".into(),
            });
        }
        if shape[1] != c.input_channels() {
            return Err(Error::ChannelCount {
                expected: c.input_channels(),
                found: shape[1],
            });
        }
        let n = shape[0];
        if input.timesteps.len() != n || input.cond.shape() != [n, c.cond_dim] {
            return Err(Error::ShapeMismatch {
                op: "predict_noise conditioning",
                lhs: vec![n, c.cond_dim],
                rhs: input.cond.shape(),
            });
        }
        let f = 1usize << c.depth;
        if shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::IndivisibleDims {
                height: shape[2],
                width: shape[3],
                factor: f,
            });
        }

        let emb = self.embedding(input.timesteps, input.cond)?;
        let mut h = self.conv(x, "unet.conv_in")?;
        let mut skips = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            h = self.resblock(h, emb, &format!("unet.down{i}"))?;
            skips.push(h);
            h = h.avg_pool2()?;
            if i + 1 < c.depth {
                h = self.conv(h, &format!("unet.down{i}.to_next"))?;
            }
        }
        h = self.resblock(h, emb, "unet.mid")?;
        for i in (0..c.depth).rev() {
            h = Var::concat_channels(&[h.upsample2()?, skips[i]])?;
            h = self.conv(h, &format!("unet.up{i}.merge"))?;
            h = self.resblock(h, emb, &format!("unet.up{i}"))?;
        }
        let h = h.group_norm(groups_for(c.width))?.silu();
        self.conv(h, "unet.conv_out")
    }
}
