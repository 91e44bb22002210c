//! Invariant suites behind the `check` subcommand.
//!
//! Each suite exercises one structural property of the library on small
//! random inputs and reports the worst error it observed against its
//! tolerance. Suites are independent and run in parallel.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_phantom, preprocess, Image};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowModel};
use crate::metrics::{psnr, ssim, PEAK};
use crate::nn::{build_patchgan_with, build_regnet_with, LayerStack, ParamStore};
use crate::objectives::{
    alignflow_objective, cyclegan_objective, cycleflow_objective, discriminator_objective, flowreg_objective,
    registration_objective, temporal_reg_loss, Discriminators, FlowPair, GeneratorPair, LossReport, LossWeights, Net,
    TripletVars,
};
use crate::tensor::{grad_check, Graph, Real, Tensor};
use crate::train::{adam_step, AdamState};
use crate::warp::{registration_loss, warp, DeformationField};

pub const SUITES: [&str; 19] = [
    "F1", "F2", "F3", "F4", "W1", "W2", "W3", "W4", "O1", "O2", "O3", "O4", "M1", "M2", "M3", "M4", "D1", "D2", "D3",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Break the coupling inverse of every flow built by the suites.
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub description: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

/// Worst error of a suite and the bound it must not exceed.
struct Outcome {
    max_error: f64,
    tolerance: f64,
}

impl Outcome {
    fn new(max_error: f64, tolerance: f64) -> Self {
        Outcome { max_error, tolerance }
    }

    /// Pass/fail property: error 0 when it holds, 1 otherwise.
    fn holds(ok: bool) -> Self {
        Outcome::new(if ok { 0.0 } else { 1.0 }, 0.0)
    }
}

fn describe(name: &str) -> &'static str {
    match name {
        "F1" => "cycle consistency of flow translation (f32)",
        "F2" => "analytic log-determinant vs brute-force Jacobian (f64)",
        "F3" => "squeeze/unsqueeze are exact inverses",
        "F4" => "NLL decreases over 50 MLE steps",
        "W1" => "zero field warp is the identity",
        "W2" => "integer shifts match array shifts on the interior",
        "W3" => "warp is linear in the image",
        "W4" => "registration loss gradient check (f64)",
        "O1" => "objective totals equal weighted sums of parts",
        "O2" => "flowreg with zero extra weights equals alignflow bitwise",
        "O3" => "all loss terms are non-negative",
        "O4" => "temporal loss vanishes for identical slices and zero fields",
        "M1" => "ssim is symmetric",
        "M2" => "ssim lies in [-1, 1] and is 1 on identical images",
        "M3" => "psnr strictly decreases in mse",
        "M4" => "psnr of mse 0.0179 at peak 2 lies in [23.35, 23.65]",
        "D1" => "preprocessed images lie in [-1, 1]",
        "D2" => "phantom generation is deterministic",
        "D3" => "training subjects of A and B are disjoint",
        _ => "unknown suite",
    }
}

fn run_one(name: &str, opts: CheckOptions) -> Result<Outcome> {
    match name {
        "F1" => f1_cycle(opts),
        "F2" => f2_logdet(opts),
        "F3" => f3_squeeze(),
        "F4" => f4_mle(),
        "W1" => w1_identity(),
        "W2" => w2_shift(),
        "W3" => w3_linear(),
        "W4" => w4_gradcheck(),
        "O1" => o1_weighted_sum(),
        "O2" => o2_reduction(),
        "O3" => o3_non_negative(),
        "O4" => o4_temporal_zero(),
        "M1" => m1_symmetry(),
        "M2" => m2_range(),
        "M3" => m3_monotone(),
        "M4" => m4_table(),
        "D1" => d1_range(),
        "D2" => d2_deterministic(),
        "D3" => d3_disjoint(),
        other => Err(Error::invalid(format!("unknown suite `{other}`"))),
    }
}

/// Runs the named suite (or every suite) and collects the verdicts.
pub fn run_checks(suite: Option<&str>, opts: CheckOptions) -> Result<CheckReport> {
    let names: Vec<&str> = match suite {
        Some(s) => {
            let s = SUITES
                .iter()
                .find(|n| n.eq_ignore_ascii_case(s))
                .ok_or_else(|| Error::invalid(format!("unknown suite `{s}`, expected one of {SUITES:?}")))?;
            vec![*s]
        }
        None => SUITES.to_vec(),
    };
    let suites: Vec<SuiteResult> = names
        .par_iter()
        .map(|&name| {
            let (passed, max_error, tolerance, error) = match run_one(name, opts) {
                Ok(o) => (o.max_error <= o.tolerance, o.max_error, o.tolerance, None),
                Err(e) => (false, f64::INFINITY, 0.0, Some(e.to_string())),
            };
            SuiteResult {
                name: name.to_string(),
                description: describe(name).to_string(),
                passed,
                max_error,
                tolerance,
                error,
            }
        })
        .collect();
    Ok(CheckReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

fn small_flow() -> FlowConfig {
    FlowConfig {
        hidden: 8,
        ..FlowConfig::default()
    }
}

fn random_flow<T: Real>(prefix: &str, seed: u64, std: f64, opts: CheckOptions) -> Result<FlowModel<T>> {
    let mut m = FlowModel::random(prefix, small_flow(), seed, std)?;
    if opts.inject_fault {
        m.inject_inverse_fault();
    }
    Ok(m)
}

fn f1_cycle(opts: CheckOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let gx = random_flow::<f32>("gx", 2 * seed, 0.1, opts)?;
        let gy = random_flow::<f32>("gy", 2 * seed + 1, 0.1, opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::rand_uniform(vec![2, 1, 8, 8], -1.0, 1.0, &mut rng);
        let back = flow::translate(&gy, &gx, &flow::translate(&gx, &gy, &x)?)?;
        worst = worst.max(back.max_abs_diff(&x)?);

        let g = Graph::new();
        let b = gx.params().bind(&g, false);
        let y = flow::direct_forward(&gx, &b, g.constant(x.clone()))?;
        let back = flow::direct_inverse(&gx, &b, y)?;
        worst = worst.max(back.value().max_abs_diff(&x)?);
    }
    Ok(Outcome::new(worst, 1e-4))
}

/// `log|det J|` of the flow at `x`, with `J` from central differences.
pub fn numeric_logdet(m: &FlowModel<f64>, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    let n = x.numel();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut probe = x.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let (plus, _) = flow::forward_flow(m, &probe)?;
        probe.data_mut()[j] = orig - eps;
        let (minus, _) = flow::forward_flow(m, &probe)?;
        probe.data_mut()[j] = orig;
        if plus.numel() != n {
            return Err(Error::invalid("flow output size differs from input size"));
        }
        for i in 0..n {
            jac[(i, j)] = (plus.data()[i] - minus.data()[i]) / (2.0 * eps);
        }
    }
    Ok(jac.lu().determinant().abs().ln())
}

fn f2_logdet(opts: CheckOptions) -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let m = random_flow::<f64>("gx", seed, 0.3, opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = Tensor::<f64>::rand_uniform(vec![1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let (_, analytic) = flow::forward_flow(&m, &x)?;
        let numeric = numeric_logdet(&m, &x, 1e-5)?;
        let rel = (analytic[0] - numeric).abs() / analytic[0].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(Outcome::new(worst, 1e-6))
}

fn f3_squeeze() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for shape in [[1, 1, 2, 2], [2, 3, 4, 6], [3, 2, 8, 4]] {
        let x = Tensor::<f32>::randn(shape.to_vec(), 1.0, &mut rng);
        let g = Graph::new();
        let v = g.constant(x.clone());
        ok &= *v.squeeze2x2()?.unsqueeze2x2()?.value() == x;
        let mut folded = shape;
        folded[1] *= 4;
        folded[2] /= 2;
        folded[3] /= 2;
        let z = Tensor::<f32>::randn(folded.to_vec(), 1.0, &mut rng);
        let w = g.constant(z.clone());
        ok &= *w.unsqueeze2x2()?.squeeze2x2()?.value() == z;
    }
    Ok(Outcome::holds(ok))
}

fn f4_mle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::rand_uniform(vec![4, 1, 8, 8], -1.0, 1.0, &mut rng).map(|v| v * 0.5 + 0.2);
    let mut m = FlowModel::<f64>::new("gx", small_flow(), 4)?;
    m.init_actnorm(&x)?;
    let mut state = AdamState::new(m.params());
    let mut history = Vec::with_capacity(51);
    for _ in 0..50 {
        let g = Graph::new();
        let b = m.params().bind(&g, true);
        let nll = m.nll(&b, g.constant(x.clone()))?;
        history.push(nll.item()?);
        g.backward(nll)?;
        let grads = m.params().grads(&b);
        adam_step(m.params_mut(), &grads, &mut state, 1e-3)?;
    }
    history.push(flow::mle_nll(&m, &x)?);
    let worst_rise = history.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome::new(worst_rise.max(0.0), 0.0))
}

fn test_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(vec![1, 1, h, w], -1.0, 1.0, &mut rng)
}

fn w1_identity() -> Result<Outcome> {
    let mut ok = true;
    for seed in 0..4 {
        let x = test_image(seed, 9, 13);
        ok &= warp(&x, &DeformationField::zeros(1, 9, 13))? == x;
        let xf = x.cast::<f32>();
        ok &= warp(&xf, &DeformationField::zeros(1, 9, 13))? == xf;
    }
    Ok(Outcome::holds(ok))
}

fn w2_shift() -> Result<Outcome> {
    let (h, w) = (10, 12);
    let x = test_image(7, h, w);
    let mut worst = 0.0f64;
    for (dx, dy) in [(1i64, 0i64), (0, 1), (-2, 1), (3, -2), (-1, -1)] {
        let out = warp(&x, &DeformationField::constant(1, h, w, dx as f64, dy as f64))?;
        for yy in 0..h as i64 {
            for xx in 0..w as i64 {
                let (sy, sx) = (yy + dy, xx + dx);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                let expect = x.data()[(sy as usize) * w + sx as usize];
                let got = out.data()[(yy as usize) * w + xx as usize];
                worst = worst.max((expect - got).abs());
            }
        }
    }
    Ok(Outcome::new(worst, 0.0))
}

fn w3_linear() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let u = test_image(10 + seed, 8, 8);
        let v = test_image(20 + seed, 8, 8);
        let phi = DeformationField::new(Tensor::<f64>::randn(vec![1, 2, 8, 8], 1.5, &mut rng))?;
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix = Tensor::from_fn(vec![1, 1, 8, 8], |i| a * u.data()[i] + b * v.data()[i]);
        let lhs = warp(&mix, &phi)?;
        let (wu, wv) = (warp(&u, &phi)?, warp(&v, &phi)?);
        let rhs = Tensor::from_fn(vec![1, 1, 8, 8], |i| a * wu.data()[i] + b * wv.data()[i]);
        worst = worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok(Outcome::new(worst, 1e-6))
}

fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.map_values(|_, v| {
        let noise = Tensor::<f64>::randn(v.shape().to_vec(), std, &mut rng);
        for (a, n) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += n;
        }
    });
}

/// Worst gradient-check error over every parameter tensor of `store` for
/// the scalar `loss(store)`.
pub fn param_grad_check<F>(store: &ParamStore<f64>, loss: F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let mut worst = 0.0f64;
    for i in 0..store.len() {
        let probe_loss = |p: &Tensor<f64>, want: bool| -> Result<(f64, Option<Tensor<f64>>)> {
            let mut s = store.clone();
            s.values_mut()[i] = p.clone();
            let (v, grads) = loss(&s, want)?;
            Ok((v, grads.map(|mut g| g.swap_remove(i))))
        };
        worst = worst.max(grad_check(probe_loss, &store.values()[i], 1e-5)?);
    }
    Ok(worst)
}

fn w4_gradcheck() -> Result<Outcome> {
    let mut net = build_regnet_with::<f64>("rx", 1, 3, 5)?;
    jitter(net.params_mut(), 6, 0.05);
    let x_t = test_image(1, 8, 8);
    let x_k = test_image(2, 8, 8);
    let params = net.params().clone();
    let worst = param_grad_check(&params, |store, want| {
        let g = Graph::new();
        let b = store.bind(&g, want);
        let (loss, _) = registration_loss(&net, &b, g.constant(x_t.clone()), g.constant(x_k.clone()), 0.5)?;
        let v = loss.item()?;
        if !want {
            return Ok((v, None));
        }
        g.backward(loss)?;
        Ok((v, Some(store.grads(&b))))
    })?;
    Ok(Outcome::new(worst, 1e-4))
}

/// Small networks and a batch of triplets for the objective suites.
struct ObjectiveBench {
    gx: FlowModel<f64>,
    gy: FlowModel<f64>,
    dx: LayerStack<f64>,
    dy: LayerStack<f64>,
    rx: LayerStack<f64>,
    ry: LayerStack<f64>,
    gxy: LayerStack<f64>,
    gyx: LayerStack<f64>,
    a: [Tensor<f64>; 3],
    b: [Tensor<f64>; 3],
}

impl ObjectiveBench {
    fn new() -> Result<Self> {
        let size = 32;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut triplet = || -> [Tensor<f64>; 3] {
            std::array::from_fn(|_| Tensor::rand_uniform(vec![1, 1, size, size], -1.0, 1.0, &mut rng))
        };
        let (a, b) = (triplet(), triplet());
        let mut rx = build_regnet_with("rx", 1, 4, 5)?;
        let mut ry = build_regnet_with("ry", 1, 4, 6)?;
        jitter(rx.params_mut(), 7, 0.05);
        jitter(ry.params_mut(), 8, 0.05);
        Ok(ObjectiveBench {
            gx: FlowModel::random("gx", small_flow(), 1, 0.05)?,
            gy: FlowModel::random("gy", small_flow(), 2, 0.05)?,
            dx: build_patchgan_with("dx", 1, 4, 3)?,
            dy: build_patchgan_with("dy", 1, 4, 4)?,
            rx,
            ry,
            gxy: crate::nn::build_baseline_generator_with("gxy", 1, 4, 9)?,
            gyx: crate::nn::build_baseline_generator_with("gyx", 1, 4, 10)?,
            a,
            b,
        })
    }

    /// Reports of every composite objective under weights `w`.
    fn reports(&self, w: &LossWeights) -> Result<Vec<(&'static str, LossReport)>> {
        let g = Graph::<f64>::new();
        let bind = |s: &ParamStore<f64>| s.bind(&g, false);
        let (bgx, bgy, bdx, bdy) = (bind(self.gx.params()), bind(self.gy.params()), bind(self.dx.params()), bind(self.dy.params()));
        let (brx, bry, bxy, byx) = (bind(self.rx.params()), bind(self.ry.params()), bind(self.gxy.params()), bind(self.gyx.params()));
        let d = Discriminators {
            dx: Net::new(&self.dx, &bdx),
            dy: Net::new(&self.dy, &bdy),
        };
        let pair = FlowPair {
            gx: Net::new(&self.gx, &bgx),
            gy: Net::new(&self.gy, &bgy),
        };
        let vars = |t: &[Tensor<f64>; 3]| TripletVars {
            prev: g.constant(t[0].clone()),
            center: g.constant(t[1].clone()),
            next: g.constant(t[2].clone()),
        };
        let (tx, ty) = (vars(&self.a), vars(&self.b));
        let mut out = Vec::new();

        let (reg, fx, fy) = registration_objective(&tx, &ty, Net::new(&self.rx, &brx), Net::new(&self.ry, &bry), w)?;
        out.push(("registration", reg.report()?));
        let (fr, fakes) = flowreg_objective(&tx, &ty, &fx, &fy, &pair, &d, w)?;
        out.push(("flowreg", fr.report()?));
        out.push(("discriminator", discriminator_objective(&d, tx.center, ty.center, &fakes)?.report()?));
        let (af, _) = alignflow_objective(tx.center, ty.center, &pair, &d, w)?;
        out.push(("alignflow", af.report()?));
        let gens = GeneratorPair {
            gxy: Net::new(&self.gxy, &bxy),
            gyx: Net::new(&self.gyx, &byx),
        };
        let (cg, _) = cyclegan_objective(tx.center, ty.center, &gens, &d, w)?;
        out.push(("cyclegan", cg.report()?));
        let (cf, _) = cycleflow_objective(tx.center, ty.center, Net::new(&self.gx, &bgx), &d)?;
        out.push(("cycleflow", cf.report()?));
        Ok(out)
    }
}

fn o1_weighted_sum() -> Result<Outcome> {
    let bench = ObjectiveBench::new()?;
    let mut worst = 0.0f64;
    for w in [LossWeights::default(), LossWeights { lambda_1: 3.0, gamma_2: 0.25, beta_1: 2.0, ..Default::default() }] {
        for (_, r) in bench.reports(&w)? {
            let rel = (r.total - r.weighted_sum()).abs() / r.total.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(Outcome::new(worst, 1e-6))
}

fn o2_reduction() -> Result<Outcome> {
    let bench = ObjectiveBench::new()?;
    let w = LossWeights::default().without_temporal_terms();
    let reports = bench.reports(&w)?;
    let total = |name: &str| reports.iter().find(|(n, _)| *n == name).map(|(_, r)| r.total);
    let (fr, af) = (total("flowreg"), total("alignflow"));
    Ok(Outcome::holds(matches!((fr, af), (Some(a), Some(b)) if a.to_bits() == b.to_bits())))
}

fn o3_non_negative() -> Result<Outcome> {
    let bench = ObjectiveBench::new()?;
    let mut worst = 0.0f64;
    for (_, r) in bench.reports(&LossWeights::default())? {
        for t in &r.terms {
            if !t.value.is_finite() {
                return Ok(Outcome::new(f64::INFINITY, 0.0));
            }
            worst = worst.max(-t.value);
        }
    }
    Ok(Outcome::new(worst, 0.0))
}

fn o4_temporal_zero() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let x = test_image(seed, 12, 12);
        let g = Graph::<f64>::new();
        let center = g.constant(x.clone());
        let neighbors = [g.constant(x.clone()), g.constant(x.clone())];
        let zero = DeformationField::<f64>::zeros(1, 12, 12).into_tensor();
        let fields = [g.constant(zero.clone()), g.constant(zero)];
        worst = worst.max(temporal_reg_loss(center, &neighbors, &fields)?.item()?.abs());
    }
    Ok(Outcome::new(worst, 0.0))
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    Image::new(size, size, (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid size")
}

fn m1_symmetry() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
        worst = worst.max((ssim(&a, &b, PEAK)? - ssim(&b, &a, PEAK)?).abs());
    }
    Ok(Outcome::new(worst, 1e-9))
}

fn m2_range() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let a = random_image(&mut rng, 16);
        let b = random_image(&mut rng, 16);
        worst = worst.max((ssim(&a, &a, PEAK)? - 1.0).abs());
        let s = ssim(&a, &b, PEAK)?;
        worst = worst.max((s.abs() - 1.0).max(0.0));
        let neg = a.map(|v| -v);
        worst = worst.max((ssim(&a, &neg, PEAK)?.abs() - 1.0).max(0.0));
        if (s - 1.0).abs() <= 1e-6 {
            worst = worst.max(1.0);
        }
    }
    Ok(Outcome::new(worst, 1e-6))
}

fn m3_monotone() -> Result<Outcome> {
    let mut prev = f64::INFINITY;
    let mut ok = true;
    for i in 1..200 {
        let p = psnr(i as f64 * 1e-3, PEAK)?;
        ok &= p < prev;
        prev = p;
    }
    Ok(Outcome::holds(ok))
}

fn m4_table() -> Result<Outcome> {
    let p = psnr(0.0179, PEAK)?;
    let outside = (23.35 - p).max(p - 23.65).max(0.0);
    Ok(Outcome::new(outside, 0.0))
}

fn d1_range() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut images: Vec<Image> = (0..5)
        .map(|_| {
            let size = rng.gen_range(8..40);
            Image::new(size, size, (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("valid")
        })
        .collect();
    images.push(Image::filled(7, 7, 1.0));
    images.push(Image::filled(7, 7, 0.0));
    for img in &images {
        for target in [8, 16, 32] {
            let (lo, hi) = preprocess(img, target).min_max();
            worst = worst.max((-1.0 - lo).max(hi - 1.0)).max(0.0);
        }
    }
    Ok(Outcome::new(worst, 0.0))
}

fn d2_deterministic() -> Result<Outcome> {
    let a = generate_phantom(5, 2, 4, 16)?;
    let b = generate_phantom(5, 2, 4, 16)?;
    let c = generate_phantom(6, 2, 4, 16)?;
    Ok(Outcome::holds(a == b && a != c))
}

fn d3_disjoint() -> Result<Outcome> {
    let mut ok = true;
    for seed in 0..3 {
        let p = generate_phantom(seed, 3, 3, 16)?;
        ok &= p.train_a.iter().all(|a| p.train_b.iter().all(|b| a.subject != b.subject));
    }
    Ok(Outcome::holds(ok))
}
