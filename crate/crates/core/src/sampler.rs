//! Ancestral DDPM sampling with classifier-free guidance and inpainting
//! conditioning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::codec::{ImageTensor, LatentCodec, MaskTensor, SpaceToDepth};
use crate::diffusion::{Denoiser, DenoiserInput, ForwardMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::{BoundUnet, Variant};

pub const DEFAULT_GUIDANCE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub image: ImageTensor,
    pub mask: MaskTensor,
    pub prompt: String,
    pub guidance: f64,
    /// Denoising steps; `None` runs the full chain.
    pub steps: Option<usize>,
    pub seed: u64,
    pub composite_unmasked: bool,
    /// A token the prompt relies on; it must be registered in the checkpoint.
    pub concept_token: Option<String>,
}

impl SampleRequest {
    pub fn new(image: ImageTensor, mask: MaskTensor, prompt: impl Into<String>, seed: u64) -> Self {
        Self {
            image,
            mask,
            prompt: prompt.into(),
            guidance: DEFAULT_GUIDANCE,
            steps: None,
            seed,
            composite_unmasked: true,
            concept_token: None,
        }
    }
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `s·ε_c + (1 − s)·ε_u` so that `s = 1`
/// and `s = 0` reproduce the inputs exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, s: f32) -> Result<Tensor> {
    let r = 1.0 - s;
    eps_cond.zip_map(eps_uncond, "cfg_combine", |c, u| s * c + r * u)
}

fn check_vp(sched: &NoiseSchedule) -> Result<()> {
    if sched.mode() != ForwardMode::VariancePreserving {
        return Err(Error::Config(
            "ancestral sampling needs a variance-preserving schedule".into(),
        ));
    }
    Ok(())
}

/// Moves `z_t` to `z_s` (`s < t`) using the Gaussian posterior given the
/// predicted clean latent. Noise is drawn only when `s > 0`.
fn posterior_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let ab_t = sched.alpha_bar(t);
    let ab_s = sched.alpha_bar(s);
    let alpha = ab_t / ab_s;
    let beta = 1.0 - alpha;
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let c1 = ab_s.sqrt() * beta / (1.0 - ab_t);
    let c2 = alpha.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    let sigma = (beta * (1.0 - ab_s) / (1.0 - ab_t)).sqrt();
    let mut out = z_t.zip_map(eps, "ddpm_step", |z, e| {
        let (z, e) = (z as f64, e as f64);
        let x0 = ((z - sb * e) / sa).clamp(-1.0, 1.0);
        (c1 * x0 + c2 * z) as f32
    })?;
    if s > 0 {
        for v in out.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + sigma * n) as f32;
        }
    }
    Ok(out)
}

/// One ancestral step from `t` to `t − 1`.
pub fn ddpm_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_vp(sched)?;
    if t == 0 || t >= sched.timesteps() {
        return Err(Error::TimestepRange {
            t,
            lo: 1,
            hi: sched.timesteps(),
        });
    }
    posterior_step(z_t, eps, t, t - 1, sched, rng)
}

/// Descending timesteps visited by a `steps`-step chain, from `T − 1` to 1.
pub fn timestep_plan(timesteps: usize, steps: Option<usize>) -> Result<Vec<usize>> {
    let full = timesteps - 1;
    let k = steps.unwrap_or(full).min(full);
    if k == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if k == full {
        return Ok((1..timesteps).rev().collect());
    }
    if k == 1 {
        return Ok(vec![full]);
    }
    let mut plan: Vec<usize> = (0..k)
        .map(|i| {
            let frac = (k - 1 - i) as f64 / (k - 1) as f64;
            1 + (frac * (full - 1) as f64).round() as usize
        })
        .collect();
    plan.dedup();
    Ok(plan)
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the reverse chain from seeded pure noise. `predict(z_t, t)` returns
/// the (already guided) noise estimate. Stream 0 seeds the initial latent and
/// stream `t + 1` the noise added when leaving step `t`, so the trajectory
/// depends only on the seed.
pub fn sample_loop(
    shape: &[usize],
    sched: &NoiseSchedule,
    steps: Option<usize>,
    seed: u64,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    check_vp(sched)?;
    let plan = timestep_plan(sched.timesteps(), steps)?;
    let mut z = Tensor::randn(shape, 1.0, &mut step_rng(seed, 0));
    for (i, &t) in plan.iter().enumerate() {
        let s = plan.get(i + 1).copied().unwrap_or(0);
        let eps = predict(&z, t)?;
        z = posterior_step(&z, &eps, t, s, sched, &mut step_rng(seed, t as u64 + 1))?;
    }
    Ok(z)
}

/// Codec implied by the checkpoint's latent channel count (`3·f²`).
pub fn codec_for(ckpt: &Checkpoint) -> Result<SpaceToDepth> {
    codec_for_channels(ckpt.denoiser_config.latent_channels)
}

pub fn codec_for_channels(cz: usize) -> Result<SpaceToDepth> {
    let f = ((cz / 3) as f64).sqrt().round() as usize;
    if f == 0 || 3 * f * f != cz {
        return Err(Error::Config(format!(
            "latent channel count {cz} does not match a space-to-depth codec"
        )));
    }
    Ok(SpaceToDepth::new(f))
}

pub fn inpaint_sample(req: &SampleRequest, ckpt: &Checkpoint) -> Result<ImageTensor> {
    if !(req.guidance >= 0.0 && req.guidance.is_finite()) {
        return Err(Error::Config(format!("guidance must be ≥ 0, got {}", req.guidance)));
    }
    let config = ckpt.denoiser_config;
    if config.variant != Variant::Inpaint {
        return Err(Error::VariantMismatch(format!(
            "sampling needs an inpaint denoiser, checkpoint holds {}",
            config.variant
        )));
    }
    if let Some(tok) = &req.concept_token {
        if !ckpt.vocab.contains(tok) {
            return Err(Error::UnregisteredToken(tok.clone()));
        }
    }
    let sched = NoiseSchedule::new(ckpt.schedule)?;
    let codec = codec_for(ckpt)?;
    req.image.check_mask(&req.mask)?;

    let masked = codec.encode(&req.image.masked(&req.mask)?)?.into_tensor();
    let lmask = codec.mask_to_latent(&req.mask)?.into_tensor();
    let masked2 = Tensor::stack(&[masked.clone(), masked])?;
    let lmask2 = Tensor::stack(&[lmask.clone(), lmask])?;
    let cond = ckpt.text_encoder().encode_batch(&[&req.prompt, ""])?;
    let s = req.guidance as f32;

    let latent_shape = masked2.batch_item(0).shape().to_vec();
    let z0 = sample_loop(&latent_shape, &sched, req.steps, req.seed, |z, t| {
        let tape = Tape::<f32>::new();
        let unet = BoundUnet::bind(config, &tape, &ckpt.unet);
        let ts = [t, t];
        let z2 = Tensor::stack(&[z.clone(), z.clone()])?.reshape(masked2.shape())?;
        let input = DenoiserInput::inpaint(
            tape.constant(z2),
            tape.constant(masked2.clone()),
            tape.constant(lmask2.clone()),
            &ts,
            tape.constant(cond.clone()),
        );
        let eps = unet.predict_noise(input)?.to_tensor();
        cfg_combine(&eps.batch_item(0), &eps.batch_item(1), s)
    })?;
    let shape = z0.shape()[1..].to_vec();
    let latent = crate::codec::LatentTensor::new(z0.reshape(&shape)?)?;
    let out = codec.decode(&latent)?;
    if req.composite_unmasked {
        out.composite(&req.image, &req.mask)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn cfg_identities_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let u = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap().data(), u.data());
        let ten = cfg_combine(&Tensor::ones(&[5]), &Tensor::zeros(&[5]), 10.0).unwrap();
        assert!(ten.data().iter().all(|&v| v == 10.0));
        assert!(cfg_combine(&c, &Tensor::zeros(&[3]), 2.0).is_err());
    }

    #[test]
    fn final_step_is_deterministic_and_range_checked() {
        let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[1, 12, 4, 4], 1.0, &mut rng);
        let e = Tensor::randn(&[1, 12, 4, 4], 1.0, &mut rng);
        let a = ddpm_step(&z, &e, 1, &sched, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ddpm_step(&z, &e, 1, &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let c = ddpm_step(&z, &e, 50, &sched, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d = ddpm_step(&z, &e, 50, &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(c, d);
        assert!(ddpm_step(&z, &e, 0, &sched, &mut rng).is_err());
        assert!(ddpm_step(&z, &e, 100, &sched, &mut rng).is_err());
        let interp = make_schedule(100, ForwardMode::Interpolation).unwrap();
        assert!(ddpm_step(&z, &e, 5, &interp, &mut rng).is_err());
    }

    #[test]
    fn posterior_mean_matches_closed_form() {
        // Independent route: mean = (z_t − β_t/√(1−ᾱ_t)·ε)/√α_t, valid when
        // the implied x0 is not clipped.
        let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
        let t = 40;
        let ab = sched.alpha_bar(t);
        let x0 = Tensor::from_fn(&[8], |i| (i as f32 - 4.0) / 5.0);
        let e = Tensor::from_fn(&[8], |i| ((i * 7 % 5) as f32 - 2.0) / 2.0);
        let z = x0
            .zip_map(&e, "t", |x, n| (ab.sqrt() * x as f64 + (1.0 - ab).sqrt() * n as f64) as f32)
            .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let got = ddpm_step(&z, &e, t, &sched, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (beta, alpha) = (sched.beta(t), sched.alpha(t));
        let var = beta * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab);
        for i in 0..8 {
            let n: f64 = r2.sample(StandardNormal);
            let mean = (z.data()[i] as f64 - beta / (1.0 - ab).sqrt() * e.data()[i] as f64)
                / alpha.sqrt();
            let want = mean + var.sqrt() * n;
            assert!((got.data()[i] as f64 - want).abs() < 1e-5, "{i}");
        }
    }

    #[test]
    fn timestep_plans() {
        assert_eq!(timestep_plan(100, None).unwrap().len(), 99);
        assert_eq!(timestep_plan(100, Some(100)).unwrap().len(), 99);
        let p = timestep_plan(100, Some(10)).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!((p[0], p[9]), (99, 1));
        assert!(p.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(timestep_plan(100, Some(1)).unwrap(), vec![99]);
        assert!(timestep_plan(100, Some(0)).is_err());
    }

    fn oracle_run(seed: u64, steps: Option<usize>) -> (Tensor, Tensor) {
        let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x0 = Tensor::from_fn(&[1, 12, 8, 8], |_| rng.random_range(-0.9f32..0.9));
        let out = sample_loop(&[1, 12, 8, 8], &sched, steps, seed, |z, t| {
            let ab = sched.alpha_bar(t);
            z.zip_map(&x0, "oracle", |zv, xv| {
                ((zv as f64 - ab.sqrt() * xv as f64) / (1.0 - ab).sqrt()) as f32
            })
        })
        .unwrap();
        (out, x0)
    }

    #[test]
    fn oracle_denoiser_recovers_planted_latent() {
        for seed in 0..3 {
            let (z0, x0) = oracle_run(seed, None);
            assert!(z0.max_abs_diff(&x0) < 0.05, "seed {seed}");
            let (z0, x0) = oracle_run(seed, Some(20));
            assert!(z0.max_abs_diff(&x0) < 0.05, "strided seed {seed}");
        }
    }

    #[test]
    fn loop_is_seed_deterministic() {
        assert_eq!(oracle_run(4, None).0, oracle_run(4, None).0);
        let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
        let zero = |z: &Tensor, _t: usize| Ok(Tensor::zeros(z.shape()));
        let a = sample_loop(&[1, 3, 2, 2], &sched, Some(5), 1, zero).unwrap();
        let b = sample_loop(&[1, 3, 2, 2], &sched, Some(5), 2, zero).unwrap();
        assert_ne!(a, b);
    }
}
