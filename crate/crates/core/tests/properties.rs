//! Property tests for the invariants of the tensor, layer, protocol, loss,
//! attack and configuration layers.

use phasefort_core::adversarial::{adv_loss_from_scores, clip_discriminator, Discriminator};
use phasefort_core::attack::{estimate_phase_with, reconstruction_error};
use phasefort_core::autodiff::{ParamStore, Tape, Value};
use phasefort_core::checkpoint::{self, Checkpoint};
use phasefort_core::config::{DeltaChoice, ExperimentConfig};
use phasefort_core::layers::{Ctx, DeltaMode, LayerSpec, Mode, Sequential};
use phasefort_core::network::{build, Arch, Model};
use phasefort_core::rng::Rng;
use phasefort_core::secure::{encrypt, fake_decrypt};
use phasefort_core::tensor::conv::conv2d_complex;
use phasefort_core::tensor::pool::mag_maxpool;
use phasefort_core::tensor::{ComplexTensor, Tensor};
use proptest::prelude::*;

fn complex(seed: u64, shape: &[usize]) -> ComplexTensor<f64> {
    let mut rng = Rng::new(seed);
    ComplexTensor::new(rng.sample_gaussian(shape), rng.sample_gaussian(shape)).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn apply(spec: LayerSpec, z: &ComplexTensor<f64>, mode: Mode) -> ComplexTensor<f64> {
    let seq = Sequential::new("p", vec![spec]);
    let mut store = ParamStore::new();
    seq.init(&mut store, &mut Rng::new(0)).unwrap();
    let mut ctx = Ctx::new(mode);
    seq.apply(&store, Value::Complex(z.clone()), &mut ctx).unwrap().into_complex().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rotation_keeps_magnitude_and_inverts(seed in any::<u64>(), theta in -10.0f64..10.0) {
        let z = complex(seed, &[2, 3, 4]);
        let r = z.rotate(theta);
        prop_assert!(max_abs_diff(&r.magnitude(), &z.magnitude()) < 1e-12);
        let back = r.rotate(-theta);
        prop_assert!(max_abs_diff(back.re(), z.re()) < 1e-12 && max_abs_diff(back.im(), z.im()) < 1e-12);
    }

    #[test]
    fn complex_conv_is_linear_over_complex_scalars(seed in any::<u64>(), ar in -2.0f64..2.0, ai in -2.0f64..2.0, br in -2.0f64..2.0, bi in -2.0f64..2.0) {
        let x = complex(seed, &[1, 2, 5, 5]);
        let y = complex(seed ^ 1, &[1, 2, 5, 5]);
        let w: Tensor<f64> = Rng::new(seed ^ 2).sample_gaussian(&[3, 2, 3, 3]);
        let mixed = x.mul_complex_scalar(ar, ai).add(&y.mul_complex_scalar(br, bi)).unwrap();
        let lhs = conv2d_complex(&mixed, &w, 1, 1).unwrap();
        let rhs = conv2d_complex(&x, &w, 1, 1).unwrap().mul_complex_scalar(ar, ai)
            .add(&conv2d_complex(&y, &w, 1, 1).unwrap().mul_complex_scalar(br, bi)).unwrap();
        prop_assert!(max_abs_diff(lhs.re(), rhs.re()) < 1e-10 && max_abs_diff(lhs.im(), rhs.im()) < 1e-10);
    }

    #[test]
    fn delta_never_changes_phase(seed in any::<u64>(), c in 0.1f64..3.0) {
        let z = complex(seed, &[2, 3, 3, 3]);
        let out = apply(LayerSpec::Delta { mode: DeltaMode::Fixed(c), channels: 3 }, &z, Mode::Eval);
        for i in 0..z.len() {
            let (fr, fi) = (z.re().data()[i], z.im().data()[i]);
            let (or, oi) = (out.re().data()[i], out.im().data()[i]);
            // out · conj(f)
            let re = or * fr + oi * fi;
            let im = oi * fr - or * fi;
            prop_assert!(re >= -1e-6 && im.abs() < 1e-6);
        }
    }

    #[test]
    fn complex_norm_gives_unit_channel_power(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let z = complex(seed, &[3, 2, 4, 4]).mul_complex_scalar(scale, 0.0);
        let out = apply(LayerSpec::ComplexNorm { channels: 2 }, &z, Mode::Train);
        let (n, c, plane) = (3, 2, 16);
        for k in 0..c {
            let mut power = 0.0;
            for b in 0..n {
                for p in 0..plane {
                    let i = (b * c + k) * plane + p;
                    power += out.re().data()[i].powi(2) + out.im().data()[i].powi(2);
                }
            }
            prop_assert!((power / (n * plane) as f64 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mag_maxpool_copies_input_elements(seed in any::<u64>()) {
        let z = complex(seed, &[2, 2, 4, 6]);
        let (out, arg) = mag_maxpool(&z, 2, 2).unwrap();
        for (o, &src) in arg.iter().enumerate() {
            prop_assert_eq!(out.re().data()[o].to_bits(), z.re().data()[src].to_bits());
            prop_assert_eq!(out.im().data()[o].to_bits(), z.im().data()[src].to_bits());
        }
    }

    #[test]
    fn processing_stack_commutes_with_rotation(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
        let net = build(Arch::LeNet, 4, [3, 16, 16]).unwrap();
        let model = Model::<f64>::new(net, seed).unwrap();
        let mut shape = vec![2];
        shape.extend_from_slice(&model.net.feature_shape);
        let z = complex(seed, &shape);
        let run = |x: &ComplexTensor<f64>| {
            let mut ctx = Ctx::new(Mode::Eval);
            model.net.phi.apply(&model.store, Value::Complex(x.clone()), &mut ctx).unwrap().into_complex().unwrap()
        };
        let lhs = run(&z.rotate(theta));
        let rhs = run(&z).rotate(theta);
        let scale = rhs.max_modulus().max(1e-8);
        prop_assert!(lhs.sub(&rhs).unwrap().max_modulus() / scale < 1e-10);
    }

    #[test]
    fn fake_decryption_differs_from_the_real_feature(seed in any::<u64>(), theta in 0.0f64..6.28, delta in 1e-3f64..(std::f64::consts::TAU - 1e-3)) {
        let mut rng = Rng::new(seed);
        let a: Tensor<f64> = rng.sample_gaussian(&[1, 8]);
        let b: Tensor<f64> = rng.sample_gaussian(&[1, 8]);
        let x = encrypt(&a, &b, &[theta]).unwrap();
        let honest = fake_decrypt(&x, &[theta]).unwrap();
        prop_assert!(max_abs_diff(&honest, &a) < 1e-12);
        let fake = fake_decrypt(&x, &[theta - delta]).unwrap();
        prop_assert!(max_abs_diff(&fake, &a) > 1e-9);
    }

    #[test]
    fn adversarial_loss_ignores_offset_order(seed in any::<u64>(), n in 1usize..6, k in 1usize..8) {
        let mut rng = Rng::new(seed);
        let real: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        let mut fake: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gaussian()).collect()).collect();
        let before = adv_loss_from_scores(&real, &fake).unwrap();
        rng.shuffle(&mut fake);
        fake.reverse();
        let after = adv_loss_from_scores(&real, &fake).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_every_critic_weight(seed in any::<u64>(), c in 1e-4f64..0.5, spread in 0.0f64..5.0) {
        let mut disc = Discriminator::<f64>::new(&[2, 6, 6], 4, c, seed).unwrap();
        let ids: Vec<_> = disc.store.ids().collect();
        let mut rng = Rng::new(seed ^ 3);
        for id in ids {
            for v in disc.store.value_mut(id).data_mut() {
                *v = rng.gaussian() * spread;
            }
        }
        clip_discriminator(&mut disc.store, c);
        for (_, p) in disc.store.iter() {
            if p.trainable {
                prop_assert!(p.value.data().iter().all(|v| v.abs() <= c));
            }
        }
    }

    #[test]
    fn phase_estimate_ignores_positive_score_scaling(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let a: Tensor<f64> = rng.sample_gaussian(&[2, 6]);
        let b: Tensor<f64> = rng.sample_gaussian(&[2, 6]);
        let x = encrypt(&a, &b, &[rng.uniform(0.0, 6.28), rng.uniform(0.0, 6.28)]).unwrap();
        let w: Vec<f64> = (0..6).map(|_| rng.gaussian()).collect();
        let score = |f: &Tensor<f64>, k: f64| -> Vec<f64> {
            f.data().chunks(6).map(|row| k * row.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>().tanh()).collect()
        };
        let base = estimate_phase_with(&x, 16, |f| Ok(score(f, 1.0))).unwrap();
        let scaled = estimate_phase_with(&x, 16, |f| Ok(score(f, s))).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn reconstruction_error_is_a_metric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t: Vec<Tensor<f64>> = (0..3).map(|_| rng.sample_uniform(0.0, 1.0, &[2, 3, 4, 4])).collect();
        let d = |i: usize, j: usize| reconstruction_error(&t[i], &t[j]).unwrap();
        prop_assert!((d(0, 1) - d(1, 0)).abs() < 1e-15);
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        prop_assert_eq!(d(0, 0), 0.0);
    }

    #[test]
    fn backward_is_linear_in_the_outputs(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = rng.sample_gaussian(&[2, 3]);
        let w: Tensor<f64> = rng.sample_gaussian(&[4, 3]);
        let grads = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(Value::Real(x.clone()), true);
            let wv = tape.real_const(w.clone());
            let h = tape.linear(xv, wv, None).unwrap();
            let p = tape.sigmoid(h).unwrap();
            let q = tape.mul(h, h).unwrap();
            let sp = tape.sum(p).unwrap();
            let sq = tape.sum(q).unwrap();
            let out = match which {
                0 => sp,
                1 => sq,
                _ => tape.add(sp, sq).unwrap(),
            };
            match tape.backward(out).unwrap().get(xv) {
                Some(Value::Real(g)) => g.clone(),
                _ => unreachable!(),
            }
        };
        let sum = grads(0).add(&grads(1)).unwrap();
        prop_assert!(max_abs_diff(&sum, &grads(2)) < 1e-10);
    }

    #[test]
    fn config_echo_round_trips(epochs in 0usize..50, lambda in 0.0f64..4.0, k in 2usize..16, seed in proptest::option::of(any::<u64>())) {
        let mut cfg = ExperimentConfig { seed, ..Default::default() };
        cfg.train.epochs = epochs;
        cfg.adversarial.lambda_adv = lambda;
        cfg.adversarial.k = k;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), step in any::<u64>()) {
        let net = build(Arch::LeNet, 4, [3, 16, 16]).unwrap();
        let ck = Checkpoint { model: Model::<f32>::new(net, seed).unwrap(), delta: DeltaChoice::Default, step, config: String::new() };
        let bytes = checkpoint::to_bytes(&ck);
        let back: Checkpoint<f32> = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(checkpoint::to_bytes(&back), bytes);
    }
}
