#![allow(dead_code)]

pub mod bench;

use flowreg::flow::{FlowConfig, FlowModel};
use flowreg::tensor::{grad_check, Graph, Tensor, Var};
use flowreg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

/// Gradient check of `x -> sum(r * f(x))` for a fixed random `r`, so every
/// output component contributes with a distinct weight.
pub fn check_op<F>(x: &Tensor<f64>, seed: u64, f: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
    grad_check(
        |t, want| {
            let g = Graph::new();
            let v = g.leaf(t.clone());
            let out = f(&g, v)?;
            let r = weights
                .borrow_mut()
                .get_or_insert_with(|| uniform(&out.shape(), -1.0, 1.0, seed ^ 0xabcd))
                .clone();
            let loss = out.mul(g.constant(r))?.sum()?;
            let val = loss.item()?;
            if !want {
                return Ok((val, None));
            }
            g.backward(loss)?;
            Ok((val, v.grad()))
        },
        x,
        1e-5,
    )
    .unwrap()
}

/// `ln|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        assert!(p != 0.0, "singular Jacobian");
        acc += p.abs().ln();
        for row in col + 1..n {
            let factor = a[row][col] / p;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    acc
}

/// Jacobian of `f` at `x` by central differences, rows = outputs.
pub fn numeric_jacobian(x: &Tensor<f64>, eps: f64, f: impl Fn(&Tensor<f64>) -> Vec<f64>) -> Vec<Vec<f64>> {
    let n = x.numel();
    let m = f(x).len();
    let mut jac = vec![vec![0.0; n]; m];
    let mut probe = x.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[j] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[j] = orig;
        for i in 0..m {
            jac[i][j] = (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    jac
}

pub fn small_flow() -> FlowConfig {
    FlowConfig {
        hidden: 8,
        ..FlowConfig::default()
    }
}

pub fn random_flow<T: flowreg::tensor::Real>(prefix: &str, seed: u64, std: f64) -> FlowModel<T> {
    FlowModel::random(prefix, small_flow(), seed, std).unwrap()
}

/// Content of `img` moved by integer `(dx, dy)` pixels, edges replicated.
pub fn shifted(img: &Tensor<f64>, dx: i64, dy: i64) -> Tensor<f64> {
    let (b, c, h, w) = img.dims4().unwrap();
    Tensor::from_fn(vec![b, c, h, w], |i| {
        let x = (i % w) as i64;
        let y = ((i / w) % h) as i64;
        let plane = i / (h * w);
        let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
        let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
        img.data()[plane * h * w + sy * w + sx]
    })
}

/// Smooth blob image `[1,1,n,n]` on `[-1, 1]`.
pub fn blob(n: usize, cx: f64, cy: f64, r: f64) -> Tensor<f64> {
    Tensor::from_fn(vec![1, 1, n, n], |i| {
        let x = (i % n) as f64;
        let y = (i / n) as f64;
        let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
        2.0 * (-d2).exp() - 1.0
    })
}

/// Small phantom run that takes a fraction of a second per step.
pub fn tiny_config(mode: flowreg::train::Mode, out: &std::path::Path) -> flowreg::train::TrainConfig {
    flowreg::train::TrainConfig {
        mode,
        disc_width: 4,
        generator_width: 4,
        regnet_width: 4,
        regnet_levels: 1,
        flow: FlowConfig { hidden: 8, ..Default::default() },
        phantom: Some(flowreg::train::PhantomConfig { seed: 3, subjects: 2, slices: 5 }),
        seed: 21,
        out: out.to_path_buf(),
        ..Default::default()
    }
}
