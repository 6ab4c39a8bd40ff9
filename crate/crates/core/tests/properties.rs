mod common;

use common::*;
use dreampaint_core::autodiff::{Tape, Var};
use dreampaint_core::codec::{ImageTensor, SpaceToDepth};
use dreampaint_core::diffusion::{
    forward_diffuse, inpaint_loss, make_schedule, Denoiser, DenoiserInput, ForwardMode, LatentBatch,
};
use dreampaint_core::error::Result;
use dreampaint_core::eval::{fidelity_score, sweep_mask, ConvScorer};
use dreampaint_core::masks::{ellipse_mask, rect_mask, sample_training_mask, CoverageBounds, MaskMixture, MaskShape};
use dreampaint_core::sampler::{cfg_combine, timestep_plan};
use dreampaint_core::tensor::Tensor;
use dreampaint_core::text::Vocabulary;
use dreampaint_core::unet::Variant;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predicts a fixed tensor regardless of input.
struct Fixed(Tensor<f64>);

impl<'t> Denoiser<'t, f64> for Fixed {
    fn variant(&self) -> Variant {
        Variant::Inpaint
    }

    fn predict_noise(&self, input: DenoiserInput<'_, 't, f64>) -> Result<Var<'t, f64>> {
        Ok(input.z_t.tape().constant(self.0.clone()))
    }
}

fn fixed_loss(batch: &dreampaint_core::diffusion::TrainingBatch<f64>, pred: Tensor<f64>) -> f64 {
    let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
    let tape = Tape::<f64>::new();
    let cond = tape.constant(Tensor::zeros(&[batch.len(), 4]));
    inpaint_loss(&Fixed(pred), cond, batch, &SpaceToDepth::default(), &sched).unwrap().item()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inpaint_loss_is_nonnegative(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0, seed in 0u64..500) {
        let batch = micro_batch(seed);
        let (loss, _) = micro_loss(&[a, b, c, d], &batch);
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn inpaint_loss_vanishes_only_at_the_noise(seed in 0u64..500, j in 0usize..384, delta in 1e-3f64..1.0) {
        let batch = micro_batch(seed);
        let eps = Tensor::stack(&batch.noise).unwrap();
        prop_assert_eq!(fixed_loss(&batch, eps.clone()), 0.0);
        let mut off = eps.clone();
        off.data_mut()[j] += delta;
        let loss = fixed_loss(&batch, off);
        prop_assert!((loss - delta * delta / 384.0).abs() < 1e-12);
    }

    #[test]
    fn variance_preserving_coefficients(t in 0usize..100) {
        let s = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
        let (a, b) = s.forward_coefficients(t).unwrap();
        prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        let x0 = random_tensor(&[12, 4, 4], t as u64).cast::<f64>();
        let eps = random_tensor(&[12, 4, 4], 1000 + t as u64).cast::<f64>();
        let z = forward_diffuse(&x0, t, &eps, &s).unwrap();
        for k in 0..z.numel() {
            prop_assert!((z.data()[k] - (a * x0.data()[k] + b * eps.data()[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn cfg_identities_and_linearity(seed in any::<u64>(), s in -5.0f32..15.0) {
        let c = random_tensor(&[12, 4, 4], seed);
        let u = random_tensor(&[12, 4, 4], seed ^ 1);
        prop_assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u.clone());
        let g = cfg_combine(&c, &u, s).unwrap();
        for k in 0..g.numel() {
            let want = u.data()[k] + s * (c.data()[k] - u.data()[k]);
            prop_assert!((g.data()[k] - want).abs() < 1e-4 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn timestep_plans_descend_from_the_top(steps in 1usize..120) {
        let plan = timestep_plan(100, Some(steps)).unwrap();
        prop_assert_eq!(plan[0], 99);
        prop_assert_eq!(plan.len(), steps.min(99));
        prop_assert!(plan.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*plan.last().unwrap() >= 1);
        if steps > 1 {
            prop_assert_eq!(*plan.last().unwrap(), 1);
        }
    }

    #[test]
    fn rect_and_ellipse_masks_respect_bounds(seed in any::<u64>(), lo in 0.05f64..0.3, span in 0.05f64..0.3) {
        let bounds = CoverageBounds::new(lo, lo + span).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rect_mask(&mut rng, 32, 32, bounds).unwrap();
        let e = ellipse_mask(&mut rng, 32, 32, bounds).unwrap();
        prop_assert!(bounds.contains(r.coverage()), "rect {}", r.coverage());
        prop_assert!(bounds.contains(e.coverage()), "ellipse {}", e.coverage());
    }

    #[test]
    fn training_masks_are_binary_and_nonempty(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, m) = sample_training_mask(&mut rng, 32, 32, &MaskMixture::default()).unwrap();
        prop_assert!(m.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(m.coverage() > 0.0);
    }

    #[test]
    fn sweep_scales_area(scale in 1.0f64..4.0, half in 2.0f64..5.0) {
        let fit = MaskShape::Ellipse { cy: 16.0, cx: 16.0, ry: half, rx: half + 1.0 };
        let grown = sweep_mask(&fit, scale);
        let area = |m: &MaskShape| match *m {
            MaskShape::Ellipse { ry, rx, .. } => std::f64::consts::PI * ry * rx,
            MaskShape::Rect { half_h, half_w, .. } => 4.0 * half_h * half_w,
        };
        prop_assert!((area(&grown) / area(&fit) - scale).abs() < 1e-9);
    }

    #[test]
    fn fidelity_scores_lie_in_unit_interval(seed in any::<u64>()) {
        let scorer = ConvScorer::random(1, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = |rng: &mut ChaCha8Rng| {
            ImageTensor::new(Tensor::from_fn(&[3, 32, 32], |_| rand::Rng::random_range(rng, 0.0..1.0))).unwrap()
        };
        let generated = img(&mut rng);
        let refs = vec![img(&mut rng), img(&mut rng)];
        let mask = rect_mask(&mut rng, 32, 32, CoverageBounds::new(0.1, 0.4).unwrap()).unwrap();
        let s = fidelity_score(&generated, &mask, &refs, &scorer).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn token_injection_appends_one_id(word in "[a-z]{3,8}") {
        let mut v = Vocabulary::new(["a", "red", "shirt"]);
        let before = v.len();
        let known = v.contains(&word);
        let r = v.inject(&word);
        if known {
            prop_assert!(r.is_err());
        } else {
            let id = r.unwrap();
            prop_assert_eq!(v.len(), before + 1);
            prop_assert_eq!(v.id(&word), Some(id));
            let prompt = format!("a {word} shirt");
            prop_assert!(v.tokenize(&prompt).contains(&id));
        }
    }
}

#[test]
fn latent_batch_masks_match_codec() {
    let batch = micro_batch(3);
    let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
    let lb = LatentBatch::build(&batch, true, &SpaceToDepth::default(), &sched).unwrap();
    assert_eq!(lb.z_t.shape(), &[2, 12, 4, 4]);
    assert_eq!(lb.latent_mask.unwrap().shape(), &[2, 1, 4, 4]);
}
