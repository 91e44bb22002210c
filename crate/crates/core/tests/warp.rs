mod common;

use common::{blob, shifted, uniform};
use flowreg::check::param_grad_check;
use flowreg::nn::build_regnet_with;
use flowreg::tensor::{Graph, Tensor};
use flowreg::train::{adam_step, AdamState};
use flowreg::warp::{registration_loss, registration_terms, smoothness, warp, DeformationField};
use proptest::prelude::*;

#[test]
fn unit_shift_reads_the_next_column() {
    let img = uniform(&[1, 1, 7, 9], -1.0, 1.0, 3);
    let out = warp(&img, &DeformationField::constant(1, 7, 9, 1.0, 0.0)).unwrap();
    for y in 0..7 {
        for x in 0..8 {
            assert_eq!(out.data()[y * 9 + x], img.data()[y * 9 + x + 1]);
        }
        assert_eq!(out.data()[y * 9 + 8], img.data()[y * 9 + 8]);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let img = Tensor::<f64>::zeros(vec![1, 1, 6, 6]);
    assert!(warp(&img, &DeformationField::zeros(1, 6, 5)).is_err());
    assert!(warp(&img, &DeformationField::zeros(2, 6, 6)).is_err());
}

#[test]
fn smoothness_gradcheck_and_unit_step() {
    for seed in 0..10 {
        let phi = uniform(&[2, 2, 5, 6], -2.0, 2.0, seed);
        let err = common::check_op(&phi, seed, |_, v| smoothness(v));
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
    // vertical channel, one unit step between rows 2 and 3 of a 5x4 field
    let g = Graph::new();
    let step = Tensor::from_fn(vec![1, 2, 5, 4], |i| if i >= 20 && (i - 20) / 4 >= 3 { 1.0 } else { 0.0 });
    let pairs = (2 * 5 * 3 + 2 * 4 * 4) as f64;
    let got = smoothness(g.constant(step)).unwrap().item().unwrap();
    assert!((got - 4.0 / pairs).abs() < 1e-15, "{got}");
}

#[test]
fn registration_loss_parameter_gradcheck() {
    let mut net = build_regnet_with::<f64>("rx", 1, 4, 7).unwrap();
    let mut rng = common::rng(1);
    net.params_mut().map_values(|_, v| *v = Tensor::randn(v.shape().to_vec(), 0.3, &mut rng));
    let x_t = blob(8, 3.5, 4.0, 2.5);
    let x_k = blob(8, 4.5, 3.0, 2.0);
    let err = param_grad_check(net.params(), |store, want| {
        let mut n = net.clone();
        *n.params_mut() = store.clone();
        let g = Graph::new();
        let b = n.params().bind(&g, want);
        let (loss, _) = registration_loss(&n, &b, g.constant(x_t.clone()), g.constant(x_k.clone()), 0.7)?;
        let v = loss.item()?;
        if !want {
            return Ok((v, None));
        }
        g.backward(loss)?;
        Ok((v, Some(n.params().grads(&b))))
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn loss_is_non_negative() {
    for seed in 0..10 {
        let mut net = build_regnet_with::<f64>("rx", 1, 4, seed).unwrap();
        let mut rng = common::rng(seed);
        net.params_mut().map_values(|_, v| *v = Tensor::randn(v.shape().to_vec(), 0.5, &mut rng));
        let g = Graph::new();
        let b = net.params().bind(&g, false);
        let a = g.constant(uniform(&[2, 1, 8, 8], -1.0, 1.0, seed));
        let c = g.constant(uniform(&[2, 1, 8, 8], -1.0, 1.0, seed + 50));
        let (loss, _) = registration_loss(&net, &b, a, c, 1.0).unwrap();
        assert!(loss.item().unwrap() >= 0.0);
    }
}

#[test]
fn descent_registers_a_two_pixel_shift() {
    let x_t = blob(16, 7.5, 7.5, 3.5);
    let x_k = shifted(&x_t, 2, 0);
    let mut net = build_regnet_with::<f64>("rx", 2, 8, 3).unwrap();
    let mut state = AdamState::new(net.params());
    let similarity = |net: &flowreg::nn::LayerStack<f64>| {
        let g = Graph::new();
        let b = net.params().bind(&g, false);
        let (sim, _) = registration_terms(net, &b, g.constant(x_t.clone()), g.constant(x_k.clone())).unwrap();
        sim.item().unwrap()
    };
    let initial = similarity(&net);
    assert!(initial > 0.01);
    for _ in 0..200 {
        let g = Graph::new();
        let b = net.params().bind(&g, true);
        let (loss, _) = registration_loss(&net, &b, g.constant(x_t.clone()), g.constant(x_k.clone()), 0.1).unwrap();
        g.backward(loss).unwrap();
        let grads = net.params().grads(&b);
        adam_step(net.params_mut(), &grads, &mut state, 1e-3).unwrap();
    }
    let last = similarity(&net);
    assert!(last < 0.25 * initial, "similarity {initial} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integer_shift_matches_array_shift(dx in -3i64..=3, dy in -3i64..=3, seed in any::<u64>()) {
        let (h, w) = (10usize, 11usize);
        let img = uniform(&[1, 2, h, w], -1.0, 1.0, seed);
        let out = warp(&img, &DeformationField::constant(1, h, w, dx as f64, dy as f64)).unwrap();
        let expect = shifted(&img, -dx, -dy);
        for c in 0..2 {
            for y in 3..h - 3 {
                for x in 3..w - 3 {
                    let i = (c * h + y) * w + x;
                    prop_assert_eq!(out.data()[i], expect.data()[i]);
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_the_image(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let u = uniform(&[2, 1, 6, 7], -1.0, 1.0, seed);
        let v = uniform(&[2, 1, 6, 7], -1.0, 1.0, seed ^ 7);
        let field = DeformationField::new(uniform(&[2, 2, 6, 7], -4.0, 4.0, seed ^ 11)).unwrap();
        let mix = Tensor::from_fn(vec![2, 1, 6, 7], |i| a * u.data()[i] + b * v.data()[i]);
        let lhs = warp(&mix, &field).unwrap();
        let wu = warp(&u, &field).unwrap();
        let wv = warp(&v, &field).unwrap();
        for i in 0..lhs.numel() {
            prop_assert!((lhs.data()[i] - (a * wu.data()[i] + b * wv.data()[i])).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_field_is_bitwise_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let img = uniform(&[1, c, h, w], -5.0, 5.0, seed);
        prop_assert_eq!(warp(&img, &DeformationField::zeros(1, h, w)).unwrap(), img);
    }
}
