#![allow(dead_code)]

use dreampaint_core::autodiff::{Tape, Var};
use dreampaint_core::codec::{ImageTensor, MaskTensor, SpaceToDepth};
use dreampaint_core::diffusion::{
    inpaint_loss, make_schedule, Denoiser, DenoiserInput, ForwardMode, TrainingBatch,
};
use dreampaint_core::error::Result;
use dreampaint_core::tensor::{Real, Tensor};
use dreampaint_core::unet::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `‖a − n‖₂ / (‖a‖₂ + ‖n‖₂)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let d: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if na + nn == 0.0 {
        0.0
    } else {
        d / (na + nn)
    }
}

/// Values bounded away from zero so that ReLU kinks are never crossed by a
/// finite-difference probe.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

pub fn central_difference(
    inputs: &[Tensor<f64>],
    h: f64,
    loss: impl Fn(&[Tensor<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// `ε̂ = a·z_t + b·E((1−m)⊙x) + c·m + d` with four scalar parameters packed
/// as `[1, 4]`.
pub struct MicroDenoiser<'t, T: Real> {
    pub params: Var<'t, T>,
}

impl<'t, T: Real> MicroDenoiser<'t, T> {
    fn coefficient(&self, k: usize) -> Result<Var<'t, T>> {
        let tape = self.params.tape();
        let pick = Tensor::from_fn(&[4, 1], |i| if i == k { T::one() } else { T::zero() });
        self.params.matmul(tape.constant(pick))
    }
}

impl<'t, T: Real> Denoiser<'t, T> for MicroDenoiser<'t, T> {
    fn variant(&self) -> Variant {
        Variant::Inpaint
    }

    fn predict_noise(&self, input: DenoiserInput<'_, 't, T>) -> Result<Var<'t, T>> {
        let shape = input.z_t.shape();
        let n: usize = shape.iter().product();
        let column = |v: Var<'t, T>| v.reshape(&[n, 1]);
        let ml = input.masked_latents.expect("inpaint input");
        let m = input.latent_mask.expect("inpaint input");
        let m = Var::concat_channels(&vec![m; shape[1]])?;
        let mut acc = column(input.z_t)?.matmul(self.coefficient(0)?)?;
        acc = acc.add(column(ml)?.matmul(self.coefficient(1)?)?)?;
        acc = acc.add(column(m)?.matmul(self.coefficient(2)?)?)?;
        let d = self.coefficient(3)?.reshape(&[1])?;
        acc.add_row_bias(d)?.reshape(&shape)
    }
}

/// A two-sample inpainting batch on 8×8 images with a rectangular and an
/// irregular mask.
pub fn micro_batch(seed: u64) -> TrainingBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..2)
        .map(|_| {
            ImageTensor::new(Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0)))
                .unwrap()
        })
        .collect();
    let masks = vec![
        MaskTensor::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x)),
        MaskTensor::from_fn(8, 8, |y, x| (y * 3 + x * 5) % 7 < 3),
    ];
    let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
    TrainingBatch::sample(images, masks, &SpaceToDepth::default(), &sched, &mut rng).unwrap()
}

/// Inpainting loss of the micro-denoiser at `params` on `batch`; returns the
/// loss and its analytic gradient.
pub fn micro_loss<T: Real>(params: &[T; 4], batch: &TrainingBatch<T>) -> (T, Vec<T>) {
    let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
    let tape = Tape::<T>::new();
    let p = tape.param(&Tensor::new(&[1, 4], params.to_vec()).unwrap());
    let cond = tape.constant(Tensor::zeros(&[batch.len(), 4]));
    let d = MicroDenoiser { params: p };
    let loss = inpaint_loss(&d, cond, batch, &SpaceToDepth::default(), &sched).unwrap();
    let value = loss.item();
    let grads = tape.backward(loss).unwrap();
    (value, grads.get_slice(p).unwrap().to_vec())
}

pub fn cast_batch<T: Real>(b: &TrainingBatch<f64>) -> TrainingBatch<T> {
    TrainingBatch {
        images: b.images.iter().map(|i| ImageTensor::new(i.tensor().cast()).unwrap()).collect(),
        masks: b.masks.iter().map(|m| MaskTensor::new(m.tensor().cast()).unwrap()).collect(),
        timesteps: b.timesteps.clone(),
        noise: b.noise.iter().map(|n| n.cast()).collect(),
    }
}
