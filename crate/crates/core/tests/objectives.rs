mod common;

use common::bench::{Bench, SIZE};
use common::{shifted, uniform};
use flowreg::nn::build_baseline_generator_with;
use flowreg::objectives::*;
use flowreg::tensor::{Graph, Tensor};
use proptest::prelude::*;

#[test]
fn flowreg_report_has_eight_named_terms() {
    let (reg, gen, _) = Bench::new(0).run(&LossWeights::default(), false);
    let names: Vec<&str> = gen.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["gan_xy", "gan_yx", "nll_x", "nll_y", "temporal_x", "temporal_y", "tv_x", "tv_y"]);
    let reg_names: Vec<&str> = reg.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(reg_names, ["reg_x", "reg_y"]);
}

#[test]
fn nll_enters_with_its_small_positive_weight() {
    let (_, gen, _) = Bench::new(1).run(&LossWeights::default(), false);
    for name in ["nll_x", "nll_y"] {
        let t = gen.terms.iter().find(|t| t.name == name).unwrap();
        assert_eq!(t.weight, 1e-5);
    }
    let no_mle = LossWeights { lambda_x: 0.0, lambda_y: 0.0, ..Default::default() };
    let (_, without, _) = Bench::new(1).run(&no_mle, false);
    let contribution = 1e-5 * (gen.get("nll_x").unwrap() + gen.get("nll_y").unwrap());
    assert!((gen.total - without.total - contribution).abs() < 1e-9);
}

#[test]
fn zeroed_extra_weights_reduce_to_alignflow_bitwise() {
    for seed in 0..3 {
        let bench = Bench::new(seed);
        let w = LossWeights::default().without_temporal_terms();
        let (_, gen, _) = bench.run(&w, false);
        assert_eq!(gen.total.to_bits(), bench.alignflow(&w).total.to_bits());
    }
}

#[test]
fn adversarial_only_when_mle_weights_vanish() {
    let bench = Bench::new(4);
    let w = LossWeights { lambda_x: 0.0, lambda_y: 0.0, ..Default::default() };
    let r = bench.alignflow(&w);
    assert_eq!(r.total, r.get("gan_xy").unwrap() + r.get("gan_yx").unwrap());
}

#[test]
fn identical_slices_and_identity_models_zero_the_temporal_terms() {
    let x = common::blob(SIZE, 15.0, 16.0, 6.0);
    let (reg, gen, _) = Bench::identity(x).run(&LossWeights::default(), false);
    for name in ["temporal_x", "temporal_y"] {
        assert_eq!(gen.get(name), Some(0.0), "{name}");
    }
    for name in ["reg_x", "reg_y"] {
        assert_eq!(reg.get(name), Some(0.0), "{name}");
    }
}

#[test]
fn exact_shift_fields_zero_the_temporal_loss_on_the_interior() {
    let n = 16;
    for seed in 0..10 {
        let x_t = uniform(&[1, 1, n, n], -1.0, 1.0, seed);
        let (d_prev, d_next) = ((2, -1), (-1, 2));
        let prev = shifted(&x_t, d_prev.0, d_prev.1);
        let next = shifted(&x_t, d_next.0, d_next.1);
        let field = |(dx, dy): (i64, i64)| flowreg::warp::DeformationField::<f64>::constant(1, n, n, dx as f64, dy as f64).into_tensor();
        let g = Graph::new();
        let loss = temporal_reg_loss(
            g.constant(x_t),
            &[g.constant(prev.clone()), g.constant(next)],
            &[g.constant(field(d_prev)), g.constant(field(d_next))],
        )
        .unwrap();
        assert_eq!(loss.item().unwrap(), 0.0);
        let wrong = temporal_reg_loss(
            g.constant(uniform(&[1, 1, n, n], -1.0, 1.0, seed)),
            &[g.constant(prev.clone()), g.constant(prev)],
            &[g.constant(field((0, 0))), g.constant(field((0, 0)))],
        )
        .unwrap();
        assert!(wrong.item().unwrap() > 0.0);
    }
}

#[test]
fn temporal_loss_sends_no_gradient_into_the_fields() {
    let g = Graph::new();
    let x = g.leaf(uniform(&[1, 1, 12, 12], -1.0, 1.0, 1));
    let nb = [g.constant(uniform(&[1, 1, 12, 12], -1.0, 1.0, 2)), g.constant(uniform(&[1, 1, 12, 12], -1.0, 1.0, 3))];
    let phi = g.leaf(uniform(&[1, 2, 12, 12], -1.0, 1.0, 4));
    let loss = temporal_reg_loss(x, &nb, &[phi, phi]).unwrap();
    g.backward(loss).unwrap();
    assert!(x.grad().is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
    assert!(phi.grad().map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn cyclegan_weights_disable_their_terms() {
    let bench = Bench::new(5);
    let gxy = build_baseline_generator_with::<f64>("gxy", 1, 4, 9).unwrap();
    let gyx = build_baseline_generator_with::<f64>("gyx", 1, 4, 10).unwrap();
    let totals = |w: &LossWeights| {
        let g = Graph::<f64>::new();
        let (bdx, bdy) = (bench.dx.params().bind(&g, false), bench.dy.params().bind(&g, false));
        let (bxy, byx) = (gxy.params().bind(&g, false), gyx.params().bind(&g, false));
        let d = Discriminators {
            dx: Net::new(&bench.dx, &bdx),
            dy: Net::new(&bench.dy, &bdy),
        };
        let gens = GeneratorPair {
            gxy: Net::new(&gxy, &bxy),
            gyx: Net::new(&gyx, &byx),
        };
        let x = g.constant(bench.a[1].clone());
        let y = g.constant(bench.b[1].clone());
        cyclegan_objective(x, y, &gens, &d, w).unwrap().0.report().unwrap()
    };
    let full = totals(&LossWeights::default());
    assert_eq!(full.terms.len(), 6);
    let adv = totals(&LossWeights { lambda: 0.0, beta: 0.0, ..Default::default() });
    assert_eq!(adv.total, adv.get("gan_xy").unwrap() + adv.get("gan_yx").unwrap());
    assert!(full.total > adv.total);
}

#[test]
fn registration_objective_parameter_gradcheck() {
    for (seed, n) in [(0, 8), (1, 8), (2, 16)] {
        let err = Bench::smooth(seed, n).registration_gradcheck();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn generator_objective_directional_gradcheck() {
    for (seed, n) in [(0, 24), (1, 32)] {
        let err = Bench::smooth(seed, n).generator_gradcheck(12, seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn directional_check_flags_a_corrupted_gradient() {
    let bench = Bench::smooth(3, 24);
    let w = LossWeights::default();
    let (_, _, grads) = bench.run(&w, true);
    let [gx, _] = grads.unwrap();
    let xs = bench.gx.params().values().to_vec();
    let err = flowreg::tensor::directional_grad_check(
        |xs: &[flowreg::tensor::Tensor<f64>], want| {
            let mut b = bench.clone();
            b.gx.params_mut().values_mut().clone_from_slice(xs);
            let (_, gen, _) = b.run(&w, false);
            Ok((gen.total, want.then(|| gx.iter().map(|g| g.map(|v| 1.05 * v)).collect())))
        },
        &xs,
        4,
        1e-6,
        0,
    )
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn totals_are_weighted_sums_of_non_negative_parts(
        seed in 0u64..50,
        l1 in 0.0f64..20.0,
        b1 in 0.0f64..3.0,
        g2 in 0.0f64..3.0,
        lx in 0.0f64..1e-3,
    ) {
        let w = LossWeights { lambda_1: l1, beta_1: b1, gamma_2: g2, lambda_x: lx, ..Default::default() };
        let (reg, gen, _) = Bench::new(seed).run(&w, false);
        for r in [&reg, &gen] {
            prop_assert!((r.total - r.weighted_sum()).abs() <= 1e-6 * r.total.abs().max(1.0));
            prop_assert!(r.terms.iter().all(|t| t.value >= 0.0 && t.value.is_finite()));
        }
    }

    #[test]
    fn temporal_loss_vanishes_for_unchanged_slices(seed in any::<u64>(), n in 5usize..14) {
        let x = uniform(&[1, 1, n, n], -1.0, 1.0, seed);
        let g = Graph::new();
        let c = g.constant(x);
        let zero = g.constant(Tensor::zeros(vec![1, 2, n, n]));
        prop_assert_eq!(temporal_reg_loss(c, &[c, c], &[zero, zero]).unwrap().item().unwrap(), 0.0);
    }
}
