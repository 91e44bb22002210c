use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Largest component-wise relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference check of a scalar function's gradient.
///
/// `f` returns the scalar value and, when asked, the analytic gradient with
/// respect to its input. Returns the worst relative error over all components.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>, bool) -> Result<(f64, Option<Tensor<f64>>)>,
{
    let (_, analytic) = f(x, true)?;
    let analytic = analytic.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe, false)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe, false)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    Ok(max_rel_error(analytic.data(), &numeric))
}

/// Directional-derivative check over several inputs at once.
///
/// For `directions` random unit directions `v` (seeded), compares
/// `<grad f, v>` with the central difference of `f` along `v`. Suited to
/// objectives whose kinks make per-coordinate differences unreliable.
/// Returns the worst relative error over the directions.
pub fn directional_grad_check<F>(mut f: F, xs: &[Tensor<f64>], directions: usize, eps: f64, seed: u64) -> Result<f64>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let (_, grads) = f(xs, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("directional check needs gradients"))?;
    if grads.len() != xs.len() {
        return Err(Error::invalid("one gradient per input expected"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut dirs: Vec<Tensor<f64>> = xs.iter().map(|x| Tensor::randn(x.shape().to_vec(), 1.0, &mut rng)).collect();
        let norm = dirs.iter().map(|d| d.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        for d in &mut dirs {
            d.data_mut().iter_mut().for_each(|v| *v /= norm);
        }
        let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let step = |sign: f64| -> Vec<Tensor<f64>> {
            xs.iter()
                .zip(&dirs)
                .map(|(x, d)| Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + sign * eps * d.data()[i]))
                .collect()
        };
        let (plus, _) = f(&step(1.0), false)?;
        let (minus, _) = f(&step(-1.0), false)?;
        worst = worst.max(max_rel_error(&[analytic], &[(plus - minus) / (2.0 * eps)]));
    }
    Ok(worst)
}
