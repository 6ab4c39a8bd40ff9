//! Noise schedule, forward diffusion, and the training objectives.
//!
//! Two forward parameterizations are available:
//!
//! ```text
//! variance-preserving   z_t = sqrt(ᾱ_t)·z_0 + sqrt(1 − ᾱ_t)·ε
//! interpolation         z_t = ᾱ_t·z_0 + (1 − ᾱ_t)·ε
//! ```
//!
//! Training and sampling default to the first. The losses are the plain
//! noise-prediction MSE, its masked-inpainting form (the denoiser also sees
//! the latents of the masked image and the latent mask), and a class-prior
//! term added on top of the inpainting loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::codec::{ImageTensor, LatentCodec, MaskTensor};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::unet::Variant;

pub const BETA_START: f64 = 1e-4;
const REFERENCE_BETA_END: f64 = 0.02;
const REFERENCE_STEPS: f64 = 1000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    #[default]
    VariancePreserving,
    Interpolation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub mode: ForwardMode,
}

impl ScheduleConfig {
    /// Linear β from 1e-4. The end value 0.02 is tuned for 1000 steps, so it
    /// is rescaled by `1000 / T` to keep the total noise level comparable.
    pub fn linear(timesteps: usize, mode: ForwardMode) -> Self {
        let scale = REFERENCE_STEPS / timesteps.max(1) as f64;
        Self {
            timesteps,
            beta_start: BETA_START,
            beta_end: (REFERENCE_BETA_END * scale).min(0.999),
            mode,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::linear(100, ForwardMode::VariancePreserving)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear-β schedule with `timesteps` steps.
pub fn make_schedule(timesteps: usize, mode: ForwardMode) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig::linear(timesteps, mode))
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.timesteps;
        if t < 2 {
            return Err(Error::ScheduleTooShort(t));
        }
        let (b0, b1) = (config.beta_start, config.beta_end);
        if !(b0 > 0.0 && b0 <= b1 && b1 < 1.0) {
            return Err(Error::Config(format!("beta range [{b0}, {b1}] must lie in (0, 1)")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| b0 + (b1 - b0) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars[0] < 0.99 || alpha_bars[t - 1] > 0.05 {
            return Err(Error::Config(format!(
                "schedule endpoints out of range: alpha_bar[0]={}, alpha_bar[T-1]={}",
                alpha_bars[0],
                alpha_bars[t - 1]
            )));
        }
        Ok(Self {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn mode(&self) -> ForwardMode {
        self.config.mode
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::TimestepRange {
                t,
                lo: 0,
                hi: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `(a, b)` with `z_t = a·z_0 + b·ε` under the configured mode.
    pub fn forward_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_timestep(t)?;
        let ab = self.alpha_bars[t];
        Ok(match self.config.mode {
            ForwardMode::VariancePreserving => (ab.sqrt(), (1.0 - ab).sqrt()),
            ForwardMode::Interpolation => (ab, 1.0 - ab),
        })
    }
}

/// Noises `x0` to timestep `t` with the given `eps`.
pub fn forward_diffuse<T: Real>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, b) = sched.forward_coefficients(t)?;
    let (a, b) = (T::lit(a), T::lit(b));
    x0.zip_map(eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// Inputs for one noise prediction on a batch. Spatial tensors are
/// `[N, C, h, w]`; `cond` is `[N, d_c]`.
pub struct DenoiserInput<'a, 't, T: Real> {
    pub z_t: Var<'t, T>,
    pub masked_latents: Option<Var<'t, T>>,
    pub latent_mask: Option<Var<'t, T>>,
    pub timesteps: &'a [usize],
    pub cond: Var<'t, T>,
}

impl<'a, 't, T: Real> DenoiserInput<'a, 't, T> {
    pub fn base(z_t: Var<'t, T>, timesteps: &'a [usize], cond: Var<'t, T>) -> Self {
        Self {
            z_t,
            masked_latents: None,
            latent_mask: None,
            timesteps,
            cond,
        }
    }

    pub fn inpaint(
        z_t: Var<'t, T>,
        masked_latents: Var<'t, T>,
        latent_mask: Var<'t, T>,
        timesteps: &'a [usize],
        cond: Var<'t, T>,
    ) -> Self {
        Self {
            z_t,
            masked_latents: Some(masked_latents),
            latent_mask: Some(latent_mask),
            timesteps,
            cond,
        }
    }

    /// The channel stack the network consumes for `variant`.
    pub fn network_input(&self, variant: Variant) -> Result<Var<'t, T>> {
        match (variant, self.masked_latents, self.latent_mask) {
            (Variant::Base, None, None) => Ok(self.z_t),
            (Variant::Inpaint, Some(ml), Some(m)) => Var::concat_channels(&[self.z_t, ml, m]),
            (Variant::Base, _, _) => Err(Error::VariantMismatch(
                "base denoiser does not accept masked latents or a mask".into(),
            )),
            (Variant::Inpaint, _, _) => Err(Error::VariantMismatch(
                "inpaint denoiser needs both masked latents and a mask".into(),
            )),
        }
    }
}

/// A noise-prediction network `ε_θ`.
pub trait Denoiser<'t, T: Real> {
    fn variant(&self) -> Variant;

    /// Predicted noise, shaped like `input.z_t`.
    fn predict_noise(&self, input: DenoiserInput<'_, 't, T>) -> Result<Var<'t, T>>;
}

/// Images, masks, timesteps, and noise for one optimization step.
/// Conditioning is supplied separately because it is computed on the tape.
#[derive(Clone, Debug)]
pub struct TrainingBatch<T: Real = f32> {
    pub images: Vec<ImageTensor<T>>,
    /// Empty for the base objective.
    pub masks: Vec<MaskTensor<T>>,
    pub timesteps: Vec<usize>,
    /// Per-sample latent-shaped standard normal noise.
    pub noise: Vec<Tensor<T>>,
}

impl<T: Real> TrainingBatch<T> {
    /// Draws `t ~ U[0, T)` and `ε ~ N(0, I)` for every image.
    pub fn sample(
        images: Vec<ImageTensor<T>>,
        masks: Vec<MaskTensor<T>>,
        codec: &impl LatentCodec,
        sched: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyBatch("training batch"));
        }
        let f = codec.factor();
        let mut timesteps = Vec::with_capacity(images.len());
        let mut noise = Vec::with_capacity(images.len());
        for img in &images {
            timesteps.push(rng.random_range(0..sched.timesteps()));
            let shape = [codec.latent_channels(), img.height() / f, img.width() / f];
            noise.push(Tensor::randn(&shape, 1.0, rng));
        }
        Ok(Self {
            images,
            masks,
            timesteps,
            noise,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self, needs_masks: bool) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::EmptyBatch("training batch"));
        }
        let n = self.images.len();
        if self.timesteps.len() != n || self.noise.len() != n || (needs_masks && self.masks.len() != n) {
            return Err(Error::Config(format!(
                "batch fields disagree: {n} images, {} masks, {} timesteps, {} noise tensors",
                self.masks.len(),
                self.timesteps.len(),
                self.noise.len()
            )));
        }
        Ok(())
    }
}

/// Latent-space tensors derived from a batch: noisy latents, masked-image
/// latents, latent masks, and target noise, each stacked to `[N, …]`.
pub struct LatentBatch<T: Real> {
    pub z_t: Tensor<T>,
    pub masked_latents: Option<Tensor<T>>,
    pub latent_mask: Option<Tensor<T>>,
    pub noise: Tensor<T>,
}

impl<T: Real> LatentBatch<T> {
    pub fn build(
        batch: &TrainingBatch<T>,
        with_masks: bool,
        codec: &impl LatentCodec,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        batch.validate(with_masks)?;
        let mut z_t = Vec::with_capacity(batch.len());
        let mut masked = Vec::new();
        let mut lmask = Vec::new();
        for (i, img) in batch.images.iter().enumerate() {
            let z0 = codec.encode(img)?;
            z_t.push(forward_diffuse(z0.tensor(), batch.timesteps[i], &batch.noise[i], sched)?);
            if with_masks {
                let m = &batch.masks[i];
                masked.push(codec.encode(&img.masked(m)?)?.into_tensor());
                lmask.push(codec.mask_to_latent(m)?.into_tensor());
            }
        }
        Ok(Self {
            z_t: Tensor::stack(&z_t)?,
            masked_latents: with_masks.then(|| Tensor::stack(&masked)).transpose()?,
            latent_mask: with_masks.then(|| Tensor::stack(&lmask)).transpose()?,
            noise: Tensor::stack(&batch.noise)?,
        })
    }
}

fn check_variant<'t, T: Real>(d: &dyn Denoiser<'t, T>, want: Variant) -> Result<()> {
    if d.variant() != want {
        return Err(Error::VariantMismatch(format!(
            "objective needs a {want} denoiser, got {}",
            d.variant()
        )));
    }
    Ok(())
}

/// Noise-prediction MSE for the base denoiser.
pub fn ldm_loss<'t, T: Real>(
    denoiser: &dyn Denoiser<'t, T>,
    cond: Var<'t, T>,
    batch: &TrainingBatch<T>,
    codec: &impl LatentCodec,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    check_variant(denoiser, Variant::Base)?;
    let tape = cond.tape();
    let lb = LatentBatch::build(batch, false, codec, sched)?;
    let z_t = tape.constant(lb.z_t);
    let eps = tape.constant(lb.noise);
    let pred = denoiser.predict_noise(DenoiserInput::base(z_t, &batch.timesteps, cond))?;
    pred.mse(eps)
}

/// Noise-prediction MSE for the inpainting denoiser, which also receives
/// `E((1 − m) ⊙ x)` and the latent-resolution mask.
pub fn inpaint_loss<'t, T: Real>(
    denoiser: &dyn Denoiser<'t, T>,
    cond: Var<'t, T>,
    batch: &TrainingBatch<T>,
    codec: &impl LatentCodec,
    sched: &NoiseSchedule,
) -> Result<Var<'t, T>> {
    check_variant(denoiser, Variant::Inpaint)?;
    let tape = cond.tape();
    let lb = LatentBatch::build(batch, true, codec, sched)?;
    let z_t = tape.constant(lb.z_t);
    let masked = tape.constant(lb.masked_latents.expect("built with masks"));
    let mask = tape.constant(lb.latent_mask.expect("built with masks"));
    let eps = tape.constant(lb.noise);
    let pred = denoiser.predict_noise(DenoiserInput::inpaint(
        z_t,
        masked,
        mask,
        &batch.timesteps,
        cond,
    ))?;
    pred.mse(eps)
}

/// `item + λ · class`.
pub fn combine_prior<'t, T: Real>(
    item_loss: Var<'t, T>,
    class_loss: Var<'t, T>,
    lambda: f64,
) -> Result<Var<'t, T>> {
    item_loss.add(class_loss.scale(T::lit(lambda)))
}

/// Inpainting loss on the item batch plus `λ` times the same loss on a batch
/// of the base model's own class samples.
#[allow(clippy::too_many_arguments)]
pub fn prior_preservation_loss<'t, T: Real>(
    denoiser: &dyn Denoiser<'t, T>,
    item_cond: Var<'t, T>,
    item_batch: &TrainingBatch<T>,
    class_cond: Var<'t, T>,
    class_batch: &TrainingBatch<T>,
    codec: &impl LatentCodec,
    sched: &NoiseSchedule,
    lambda: f64,
) -> Result<Var<'t, T>> {
    if class_batch.is_empty() {
        return Err(Error::EmptyBatch("class prior batch"));
    }
    let item = inpaint_loss(denoiser, item_cond, item_batch, codec, sched)?;
    let class = inpaint_loss(denoiser, class_cond, class_batch, codec, sched)?;
    combine_prior(item, class, lambda)
}
