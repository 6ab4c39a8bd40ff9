mod common;

use common::*;
use dreampaint_core::autodiff::{Tape, Var};
use dreampaint_core::error::Result;
use dreampaint_core::params::ParamStore;
use dreampaint_core::tensor::{Real, Tensor};
use dreampaint_core::unet::{BoundUnet, DenoiserConfig};
use dreampaint_core::codec::SpaceToDepth;
use dreampaint_core::diffusion::{inpaint_loss, make_schedule, ForwardMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type OpFn<T> = for<'t> fn(&[Var<'t, T>]) -> Result<Var<'t, T>>;

/// Scalarizes `out` against a fixed seeded projection so every output
/// element contributes to the gradient.
fn project<'t, T: Real>(out: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF00D);
    let r: Tensor<f64> = Tensor::randn(&shape, 1.0, &mut rng);
    Ok(out.mul(out.tape().constant(r.cast()))?.sum())
}

fn value64(op: OpFn<f64>, inputs: &[Tensor<f64>]) -> f64 {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    project(op(&vars).unwrap()).unwrap().item()
}

fn analytic<T: Real>(op: OpFn<T>, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(&t.cast())).collect();
    let loss = project(op(&vars).unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .map(|&v| grads.get_slice(v).unwrap().iter().map(|g| g.as_f64()).collect())
        .collect()
}

fn check(name: &str, op64: OpFn<f64>, op32: OpFn<f32>, inputs: &[Tensor<f64>]) {
    let numeric = central_difference(inputs, 1e-5, |xs| value64(op64, xs));
    let a64 = analytic(op64, inputs);
    let a32 = analytic(op32, inputs);
    for i in 0..inputs.len() {
        let e64 = rel_error(&a64[i], &numeric[i]);
        let e32 = rel_error(&a32[i], &numeric[i]);
        assert!(e64 < 1e-5, "{name} input {i}: f64 relative error {e64:e}");
        assert!(e32 < 1e-3, "{name} input {i}: f32 relative error {e32:e}");
    }
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| away_from_zero(s, &mut rng)).collect()
}

macro_rules! gradcheck {
    ($name:ident, [$($shape:expr),+], |$v:ident| $body:expr) => {
        #[test]
        fn $name() {
            fn op<'t, T: Real>($v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
                $body
            }
            let xs = inputs(stringify!($name).len() as u64, &[$(&$shape),+]);
            check(stringify!($name), op::<f64>, op::<f32>, &xs);
        }
    };
}

gradcheck!(add, [[2, 3], [2, 3]], |v| v[0].add(v[1]));
gradcheck!(sub, [[2, 3], [2, 3]], |v| v[0].sub(v[1]));
gradcheck!(mul, [[2, 3], [2, 3]], |v| v[0].mul(v[1]));
gradcheck!(scale, [[5]], |v| Ok(v[0].scale(T::lit(-1.7))));
gradcheck!(add_scalar, [[5]], |v| Ok(v[0].add_scalar(T::lit(0.3)).square()));
gradcheck!(square, [[4]], |v| Ok(v[0].square()));
gradcheck!(relu, [[3, 4]], |v| Ok(v[0].relu()));
gradcheck!(silu, [[3, 4]], |v| Ok(v[0].silu()));
gradcheck!(sum, [[3, 4]], |v| Ok(v[0].sum()));
gradcheck!(mean, [[3, 4]], |v| Ok(v[0].mean()));
gradcheck!(l2_norm, [[6]], |v| Ok(v[0].l2_norm()));
gradcheck!(mse, [[2, 3], [2, 3]], |v| v[0].mse(v[1]));
gradcheck!(reshape, [[2, 6]], |v| v[0].reshape(&[3, 4]));
gradcheck!(matmul, [[2, 3], [3, 4]], |v| v[0].matmul(v[1]));
gradcheck!(transpose, [[2, 5]], |v| v[0].transpose());
gradcheck!(add_row_bias, [[3, 4], [4]], |v| v[0].add_row_bias(v[1]));
gradcheck!(linear, [[2, 3], [3, 4], [4]], |v| v[0].linear(v[1], v[2]));
gradcheck!(conv2d_3x3, [[2, 3, 5, 4], [4, 3, 3, 3], [4]], |v| v[0].conv2d(v[1], v[2]));
gradcheck!(conv2d_1x1, [[1, 2, 3, 3], [3, 2, 1, 1], [3]], |v| v[0].conv2d(v[1], v[2]));
gradcheck!(concat_channels, [[2, 1, 2, 3], [2, 3, 2, 3]], |v| Var::concat_channels(&[v[0], v[1]]));
gradcheck!(normalize_rows, [[3, 5]], |v| v[0].normalize_rows());
gradcheck!(avg_pool2, [[2, 3, 4, 6]], |v| v[0].avg_pool2());
gradcheck!(upsample2, [[2, 2, 3, 2]], |v| v[0].upsample2());
gradcheck!(group_norm, [[2, 4, 3, 3]], |v| v[0].group_norm(2));
gradcheck!(film, [[2, 3, 2, 2], [2, 3], [2, 3]], |v| v[0].film(v[1], v[2]));
gradcheck!(embedding_bag_mean, [[5, 3]], |v| v[0].embedding_bag_mean(&[vec![0, 2], vec![4], vec![1, 1, 3]]));
gradcheck!(spatial_mean, [[2, 3, 4, 2]], |v| v[0].spatial_mean());
gradcheck!(composite_conv_silu_mean, [[1, 2, 4, 4], [3, 2, 3, 3], [3]], |v| Ok(v[0]
    .conv2d(v[1], v[2])?
    .silu()
    .mean()));

#[test]
fn micro_denoiser_inpaint_loss() {
    let batch = micro_batch(7);
    let p = [0.3, -0.2, 0.5, 0.1];
    let numeric: Vec<f64> = (0..4)
        .map(|k| {
            let h = 1e-5;
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            (micro_loss(&a, &batch).0 - micro_loss(&b, &batch).0) / (2.0 * h)
        })
        .collect();
    let (_, g64) = micro_loss(&p, &batch);
    let (_, g32) = micro_loss(&p.map(|x| x as f32), &cast_batch::<f32>(&batch));
    let g32: Vec<f64> = g32.iter().map(|&g| g as f64).collect();
    assert!(rel_error(&g64, &numeric) < 1e-5);
    assert!(rel_error(&g32, &numeric) < 1e-3);
}

/// Inpainting loss through a narrow real U-Net, differentiated with respect
/// to a sample of its parameters.
#[test]
fn small_unet_inpaint_loss() {
    let cfg = DenoiserConfig {
        latent_channels: 12,
        width: 8,
        depth: 1,
        time_dim: 8,
        cond_dim: 4,
        ..DenoiserConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store: ParamStore<f64> = cfg.init_params(&mut rng).unwrap().cast();
    // Zero-initialized output layers would make most gradients vanish.
    let mut store = store;
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            if *v == 0.0 {
                *v = 0.05;
            }
        }
    }
    let batch = micro_batch(11);
    let sched = make_schedule(100, ForwardMode::VariancePreserving).unwrap();
    let cond = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.37).sin());
    let loss_at = |s: &ParamStore<f64>| {
        let tape = Tape::<f64>::new();
        let u = BoundUnet::bind(cfg, &tape, s);
        let c = tape.constant(cond.clone());
        inpaint_loss(&u, c, &batch, &SpaceToDepth::default(), &sched).unwrap().item()
    };
    let tape = Tape::<f64>::new();
    let bindings = {
        let mut s = store.clone();
        s.set_requires_grad(true);
        s.bind(&tape)
    };
    let u = BoundUnet::new(cfg, &tape, bindings);
    let loss = inpaint_loss(&u, tape.constant(cond.clone()), &batch, &SpaceToDepth::default(), &sched).unwrap();
    let grads = tape.backward(loss).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in &names {
        let g = grads.get_slice(u.bindings().get(name).unwrap()).unwrap();
        let n = store.get(name).unwrap().numel();
        for j in [0, n / 2, n - 1] {
            analytic.push(g[j]);
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += 1e-5;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= 1e-5;
            numeric.push((loss_at(&plus) - loss_at(&minus)) / 2e-5);
        }
    }
    let e = rel_error(&analytic, &numeric);
    assert!(e < 1e-5, "relative error {e:e}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let xs = inputs(5, &[&[2, 3, 4, 4], &[5, 3, 3, 3], &[5]]);
    fn op<'t, T: Real>(v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        v[0].conv2d(v[1], v[2])?.group_norm(5)?.silu().avg_pool2()
    }
    let run = || {
        let tape = Tape::<f32>::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.param(&t.cast())).collect();
        let out = op(&vars).unwrap();
        let value = out.to_tensor().into_data();
        let grads = tape.backward(project(out).unwrap()).unwrap();
        let g: Vec<Vec<f32>> = vars.iter().map(|&v| grads.get_slice(v).unwrap().to_vec()).collect();
        (value, g)
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
    for (a, b) in g1.iter().zip(&g2) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x = inputs(seed, &[&[3, 4]]).remove(0);
        let grad = |ca: f64, cb: f64| {
            let tape = Tape::<f64>::new();
            let v = tape.param(&x);
            let f = v.silu().sum();
            let g = v.square().mean();
            let loss = f.scale(ca).add(g.scale(cb)).unwrap();
            tape.backward(loss).unwrap().get_slice(v).unwrap().to_vec()
        };
        let (gf, gg, gc) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..gc.len() {
            let want = a * gf[i] + b * gg[i];
            prop_assert!((gc[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f64> = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::randn(&[k, n], 1.0, &mut rng);
        let tape = Tape::<f64>::new();
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().to_tensor();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                prop_assert!((c.data()[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
}
