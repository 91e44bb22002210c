//! Spatial transformation of images by displacement fields and the
//! unsupervised registration objective between neighboring slices.

use crate::error::{Error, Result};
use crate::nn::{Bound, LayerStack};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Per-pixel displacement `[B, 2, H, W]` in pixels; channel 0 is horizontal,
/// channel 1 vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    phi: Tensor<T>,
}

impl<T: Real> DeformationField<T> {
    pub fn new(phi: Tensor<T>) -> Result<Self> {
        let (_, c, _, _) = phi.dims4()?;
        if c != 2 {
            return Err(Error::ChannelMismatch {
                op: "deformation field",
                got: c,
                expected: 2,
            });
        }
        if !phi.is_finite() {
            return Err(Error::invalid("deformation field has non-finite values"));
        }
        Ok(DeformationField { phi })
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        DeformationField {
            phi: Tensor::zeros(vec![batch, 2, height, width]),
        }
    }

    /// Uniform displacement `(dx, dy)` at every pixel.
    pub fn constant(batch: usize, height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let plane = height * width;
        let phi = Tensor::from_fn(vec![batch, 2, height, width], |i| {
            T::of(if (i / plane) % 2 == 0 { dx } else { dy })
        });
        DeformationField { phi }
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.phi
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.phi
    }
}

/// `out(p) = img(p + phi(p))`, bilinear with border clamping.
pub fn warp<T: Real>(img: &Tensor<T>, field: &DeformationField<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let out = g.warp(g.constant(img.clone()), g.constant(field.phi.clone()))?;
    Ok((*out.value()).clone())
}

/// Mean squared forward difference of `phi` over all horizontally and
/// vertically adjacent pixel pairs.
pub fn smoothness<'g, T: Real>(phi: Var<'g, T>) -> Result<Var<'g, T>> {
    pair_mean(phi, |d| d.square())
}

/// Mean of `f(x[next] - x[cur])` over every adjacent pair along both axes.
pub(crate) fn pair_mean<'g, T: Real>(x: Var<'g, T>, f: impl Fn(Var<'g, T>) -> Var<'g, T>) -> Result<Var<'g, T>> {
    let dx = x.neighbor_diff(3)?;
    let dy = x.neighbor_diff(2)?;
    let count = dx.value().numel() + dy.value().numel();
    Ok(f(dx).sum()?.add(f(dy).sum()?)?.scale(1.0 / count as f64))
}

/// Registration objective for moving slice `x_k` onto fixed slice `x_t`:
/// `mean (x_t - x_k o phi)^2 + w_smooth * smoothness(phi)` with
/// `phi = regnet(concat(x_t, x_k))`. Returns the loss and the field.
pub fn registration_loss<'g, T: Real>(
    regnet: &LayerStack<T>,
    bound: &Bound<'g, T>,
    x_t: Var<'g, T>,
    x_k: Var<'g, T>,
    w_smooth: f64,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (sim, phi) = registration_terms(regnet, bound, x_t, x_k)?;
    let loss = sim.add(smoothness(phi)?.scale(w_smooth))?;
    Ok((loss, phi))
}

/// Similarity term and field of [`registration_loss`], unweighted.
pub fn registration_terms<'g, T: Real>(
    regnet: &LayerStack<T>,
    bound: &Bound<'g, T>,
    x_t: Var<'g, T>,
    x_k: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (ts, ks) = (x_t.shape(), x_k.shape());
    if ts != ks {
        return Err(Error::ShapeMismatch {
            op: "registration pair",
            left: ts,
            right: ks,
        });
    }
    if ts.get(1) != Some(&1) {
        return Err(Error::ChannelMismatch {
            op: "registration slice",
            got: ts.get(1).copied().unwrap_or(0),
            expected: 1,
        });
    }
    let g = x_t.graph();
    let phi = regnet.forward(bound, g.concat_channels(&[x_t, x_k])?)?;
    let moved = g.warp(x_k, phi)?;
    let sim = x_t.sub(moved)?.square().mean()?;
    Ok((sim, phi))
}
