//! Loss terms and the composite training objectives.
//!
//! Every composite returns an [`Objective`]: the named, weighted parts on
//! the graph plus their weighted sum. Terms are added in a fixed order so a
//! composite whose extra weights are zero produces the same total, bit for
//! bit, as the smaller composite it extends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, FlowModel};
use crate::nn::{Bound, LayerStack};
use crate::tensor::{Real, Var};
use crate::warp::{self, pair_mean};

/// Number of neighboring slices entering the temporal loss (one before, one after).
pub const TEMPORAL_NEIGHBORS: usize = 2;
/// Border excluded from the temporal comparison, in pixels.
pub const TEMPORAL_MARGIN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// MLE weight, domain X.
    pub lambda_x: f64,
    /// MLE weight, domain Y.
    pub lambda_y: f64,
    /// Cycle consistency.
    pub lambda: f64,
    /// Identity mapping.
    pub beta: f64,
    /// Temporal consistency of X -> Y.
    pub lambda_1: f64,
    /// Temporal consistency of Y -> X.
    pub lambda_2: f64,
    /// Registration, domain X.
    pub beta_1: f64,
    /// Registration, domain Y.
    pub beta_2: f64,
    /// Total variation of X -> Y output.
    pub gamma_1: f64,
    /// Total variation of Y -> X output.
    pub gamma_2: f64,
    /// Field smoothness inside each registration loss.
    pub w_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_x: 1e-5,
            lambda_y: 1e-5,
            lambda: 10.0,
            beta: 5.0,
            lambda_1: 10.0,
            lambda_2: 10.0,
            beta_1: 1.0,
            beta_2: 1.0,
            gamma_1: 1.0,
            gamma_2: 1.0,
            w_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_x", self.lambda_x),
            ("lambda_y", self.lambda_y),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("beta_1", self.beta_1),
            ("beta_2", self.beta_2),
            ("gamma_1", self.gamma_1),
            ("gamma_2", self.gamma_2),
            ("w_smooth", self.w_smooth),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Copy with the temporal, registration and TV weights set to zero.
    pub fn without_temporal_terms(&self) -> Self {
        LossWeights {
            lambda_1: 0.0,
            lambda_2: 0.0,
            beta_1: 0.0,
            beta_2: 0.0,
            gamma_1: 0.0,
            gamma_2: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<Term>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// `sum(weight * value)` recomputed from the parts.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        if let Some(t) = self.terms.iter().find(|t| !t.value.is_finite()) {
            return Some(&t.name);
        }
        (!self.total.is_finite()).then_some("total")
    }
}

/// Weighted loss terms recorded on a graph.
pub struct Objective<'g, T> {
    parts: Vec<(&'static str, f64, Var<'g, T>)>,
    total: Option<Var<'g, T>>,
}

impl<'g, T: Real> Objective<'g, T> {
    pub fn new() -> Self {
        Objective {
            parts: Vec::new(),
            total: None,
        }
    }

    pub fn push(&mut self, name: &'static str, weight: f64, value: Var<'g, T>) -> Result<()> {
        let weighted = if weight == 1.0 { value } else { value.scale(weight) };
        self.total = Some(match self.total {
            None => weighted,
            Some(t) => t.add(weighted)?,
        });
        self.parts.push((name, weight, value));
        Ok(())
    }

    pub fn total(&self) -> Result<Var<'g, T>> {
        self.total.ok_or_else(|| Error::invalid("objective has no terms"))
    }

    pub fn term(&self, name: &str) -> Option<Var<'g, T>> {
        self.parts.iter().find(|p| p.0 == name).map(|p| p.2)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.parts.iter().map(|p| p.0).collect()
    }

    pub fn report(&self) -> Result<LossReport> {
        let mut terms = Vec::with_capacity(self.parts.len());
        for &(name, weight, v) in &self.parts {
            terms.push(Term {
                name: name.to_string(),
                value: v.item()?,
                weight,
            });
        }
        Ok(LossReport {
            terms,
            total: self.total()?.item()?,
        })
    }
}

impl<T: Real> Default for Objective<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::ShapeMismatch { op, left: sa, right: sb });
    }
    Ok(())
}

/// Least-squares GAN loss `mean((d_out - target)^2)`, target 1 for real, 0 for fake.
pub fn gan_loss<'g, T: Real>(d_out: Var<'g, T>, target_real: bool) -> Result<Var<'g, T>> {
    let shifted = if target_real { d_out.shift(-1.0) } else { d_out };
    shifted.square().mean()
}

/// Mean absolute difference.
pub fn cycle_loss<'g, T: Real>(x: Var<'g, T>, reconstructed: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("cycle_loss", &x, &reconstructed)?;
    x.sub(reconstructed)?.abs().mean()
}

/// Mean absolute difference between a target-domain image and its translation.
pub fn identity_loss<'g, T: Real>(y: Var<'g, T>, mapped: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape("identity_loss", &y, &mapped)?;
    y.sub(mapped)?.abs().mean()
}

/// Sum over the neighbors `k` of `mean |g_t - g_k o phi_k|` on the interior
/// (border of [`TEMPORAL_MARGIN`] pixels excluded). Fields are treated as
/// constants.
pub fn temporal_reg_loss<'g, T: Real>(g_t: Var<'g, T>, g_neighbors: &[Var<'g, T>], fields: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    if g_neighbors.len() != TEMPORAL_NEIGHBORS || fields.len() != TEMPORAL_NEIGHBORS {
        return Err(Error::invalid(format!(
            "temporal loss needs {TEMPORAL_NEIGHBORS} neighbor slices and fields, got {} and {}",
            g_neighbors.len(),
            fields.len()
        )));
    }
    let g = g_t.graph();
    let mut total: Option<Var<'g, T>> = None;
    for (&g_k, &phi) in g_neighbors.iter().zip(fields) {
        same_shape("temporal_reg_loss", &g_t, &g_k)?;
        let warped = g.warp(g_k, phi.detach())?;
        let term = g_t.sub(warped)?.crop(TEMPORAL_MARGIN)?.abs().mean()?;
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("two neighbors"))
}

/// Mean absolute difference over all horizontally and vertically adjacent pixel pairs.
pub fn tv_loss<'g, T: Real>(img: Var<'g, T>) -> Result<Var<'g, T>> {
    pair_mean(img, |d| d.abs())
}

/// A network together with its parameters bound on the current graph.
pub struct Net<'a, 'g, M, T> {
    pub model: &'a M,
    pub bound: &'a Bound<'g, T>,
}

impl<M, T> Clone for Net<'_, '_, M, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M, T> Copy for Net<'_, '_, M, T> {}

impl<'a, 'g, M, T> Net<'a, 'g, M, T> {
    pub fn new(model: &'a M, bound: &'a Bound<'g, T>) -> Self {
        Net { model, bound }
    }
}

impl<'g, T: Real> Net<'_, 'g, LayerStack<T>, T> {
    pub fn apply(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.model.forward(self.bound, x)
    }
}

/// Discriminators of domain X and Y.
pub struct Discriminators<'a, 'g, T> {
    pub dx: Net<'a, 'g, LayerStack<T>, T>,
    pub dy: Net<'a, 'g, LayerStack<T>, T>,
}

/// Translated images produced while evaluating a generator objective.
pub struct Translations<'g, T> {
    pub fake_y: Var<'g, T>,
    pub fake_x: Var<'g, T>,
}

/// Adversarial terms of both directions, the first two parts of every generator objective.
fn push_adversarial<'g, T: Real>(
    obj: &mut Objective<'g, T>,
    d: &Discriminators<'_, 'g, T>,
    fakes: &Translations<'g, T>,
) -> Result<()> {
    obj.push("gan_xy", 1.0, gan_loss(d.dy.apply(fakes.fake_y)?, true)?)?;
    obj.push("gan_yx", 1.0, gan_loss(d.dx.apply(fakes.fake_x)?, true)?)
}

/// Discriminator objective `0.5 (D(real) - 1)^2 + 0.5 D(fake)^2` per domain;
/// fakes are detached.
pub fn discriminator_objective<'g, T: Real>(
    d: &Discriminators<'_, 'g, T>,
    real_x: Var<'g, T>,
    real_y: Var<'g, T>,
    fakes: &Translations<'g, T>,
) -> Result<Objective<'g, T>> {
    let mut obj = Objective::new();
    let one = |net: &Net<'_, 'g, LayerStack<T>, T>, real: Var<'g, T>, fake: Var<'g, T>| -> Result<Var<'g, T>> {
        let r = gan_loss(net.apply(real)?, true)?;
        let f = gan_loss(net.apply(fake.detach())?, false)?;
        r.add(f)
    };
    obj.push("d_x", 0.5, one(&d.dx, real_x, fakes.fake_x)?)?;
    obj.push("d_y", 0.5, one(&d.dy, real_y, fakes.fake_y)?)?;
    Ok(obj)
}

/// Invertible generators of both domains sharing a latent space.
pub struct FlowPair<'a, 'g, T> {
    pub gx: Net<'a, 'g, FlowModel<T>, T>,
    pub gy: Net<'a, 'g, FlowModel<T>, T>,
}

impl<'g, T: Real> FlowPair<'_, 'g, T> {
    pub fn x_to_y(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        flow::translate_var(self.gx.model, self.gx.bound, self.gy.model, self.gy.bound, x)
    }

    pub fn y_to_x(&self, y: Var<'g, T>) -> Result<Var<'g, T>> {
        flow::translate_var(self.gy.model, self.gy.bound, self.gx.model, self.gx.bound, y)
    }
}

/// Adversarial terms of both directions plus the weighted negative
/// log-likelihoods: `gan_xy + gan_yx + lambda_x nll_x + lambda_y nll_y`.
pub fn alignflow_objective<'g, T: Real>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    g: &FlowPair<'_, 'g, T>,
    d: &Discriminators<'_, 'g, T>,
    w: &LossWeights,
) -> Result<(Objective<'g, T>, Translations<'g, T>)> {
    let (fake_y, code_x) = flow::translate_with_code(g.gx.model, g.gx.bound, g.gy.model, g.gy.bound, x)?;
    let (fake_x, code_y) = flow::translate_with_code(g.gy.model, g.gy.bound, g.gx.model, g.gx.bound, y)?;
    let fakes = Translations { fake_y, fake_x };
    let mut obj = Objective::new();
    push_adversarial(&mut obj, d, &fakes)?;
    obj.push("nll_x", w.lambda_x, g.gx.model.nll_of(&code_x)?)?;
    obj.push("nll_y", w.lambda_y, g.gy.model.nll_of(&code_y)?)?;
    Ok((obj, fakes))
}

/// Consecutive slices `[x_{t-1}, x_t, x_{t+1}]` of one domain, each `[B,1,H,W]`.
#[derive(Clone, Copy)]
pub struct TripletVars<'g, T> {
    pub prev: Var<'g, T>,
    pub center: Var<'g, T>,
    pub next: Var<'g, T>,
}

impl<'g, T> TripletVars<'g, T> {
    pub fn neighbors(&self) -> [Var<'g, T>; 2] {
        [self.prev, self.next]
    }
}

/// Fields registering the previous and next slice onto the center slice.
pub type NeighborFields<'g, T> = [Var<'g, T>; 2];

/// Alignflow objective on the center slices plus weighted temporal
/// consistency and total variation of both translation directions.
/// Registration terms are not part of it; see [`registration_objective`].
#[allow(clippy::too_many_arguments)]
pub fn flowreg_objective<'g, T: Real>(
    tx: &TripletVars<'g, T>,
    ty: &TripletVars<'g, T>,
    fields_x: &NeighborFields<'g, T>,
    fields_y: &NeighborFields<'g, T>,
    g: &FlowPair<'_, 'g, T>,
    d: &Discriminators<'_, 'g, T>,
    w: &LossWeights,
) -> Result<(Objective<'g, T>, Translations<'g, T>)> {
    let (mut obj, fakes) = alignflow_objective(tx.center, ty.center, g, d, w)?;
    let gx_nb = [g.x_to_y(tx.prev)?, g.x_to_y(tx.next)?];
    let gy_nb = [g.y_to_x(ty.prev)?, g.y_to_x(ty.next)?];
    obj.push("temporal_x", w.lambda_1, temporal_reg_loss(fakes.fake_y, &gx_nb, fields_x)?)?;
    obj.push("temporal_y", w.lambda_2, temporal_reg_loss(fakes.fake_x, &gy_nb, fields_y)?)?;
    obj.push("tv_x", w.gamma_1, tv_loss(fakes.fake_y)?)?;
    obj.push("tv_y", w.gamma_2, tv_loss(fakes.fake_x)?)?;
    Ok((obj, fakes))
}

/// Registration losses of both domains, each summed over the two neighbors,
/// and the resulting fields (previous, next) per domain.
pub fn registration_objective<'g, T: Real>(
    tx: &TripletVars<'g, T>,
    ty: &TripletVars<'g, T>,
    reg_x: Net<'_, 'g, LayerStack<T>, T>,
    reg_y: Net<'_, 'g, LayerStack<T>, T>,
    w: &LossWeights,
) -> Result<(Objective<'g, T>, NeighborFields<'g, T>, NeighborFields<'g, T>)> {
    let one = |net: Net<'_, 'g, LayerStack<T>, T>, t: &TripletVars<'g, T>| -> Result<(Var<'g, T>, NeighborFields<'g, T>)> {
        let (lp, fp) = warp::registration_loss(net.model, net.bound, t.center, t.prev, w.w_smooth)?;
        let (ln, fnx) = warp::registration_loss(net.model, net.bound, t.center, t.next, w.w_smooth)?;
        Ok((lp.add(ln)?, [fp, fnx]))
    };
    let (lx, fx) = one(reg_x, tx)?;
    let (ly, fy) = one(reg_y, ty)?;
    let mut obj = Objective::new();
    obj.push("reg_x", w.beta_1, lx)?;
    obj.push("reg_y", w.beta_2, ly)?;
    Ok((obj, fx, fy))
}

/// Baseline generators of both directions.
pub struct GeneratorPair<'a, 'g, T> {
    pub gxy: Net<'a, 'g, LayerStack<T>, T>,
    pub gyx: Net<'a, 'g, LayerStack<T>, T>,
}

/// Adversarial terms, `lambda` times the cycle losses and `beta` times the
/// identity losses of both directions.
pub fn cyclegan_objective<'g, T: Real>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    g: &GeneratorPair<'_, 'g, T>,
    d: &Discriminators<'_, 'g, T>,
    w: &LossWeights,
) -> Result<(Objective<'g, T>, Translations<'g, T>)> {
    let fakes = Translations {
        fake_y: g.gxy.apply(x)?,
        fake_x: g.gyx.apply(y)?,
    };
    let mut obj = Objective::new();
    push_adversarial(&mut obj, d, &fakes)?;
    obj.push("cycle_x", w.lambda, cycle_loss(x, g.gyx.apply(fakes.fake_y)?)?)?;
    obj.push("cycle_y", w.lambda, cycle_loss(y, g.gxy.apply(fakes.fake_x)?)?)?;
    obj.push("identity_x", w.beta, identity_loss(x, g.gyx.apply(x)?)?)?;
    obj.push("identity_y", w.beta, identity_loss(y, g.gxy.apply(y)?)?)?;
    Ok((obj, fakes))
}

/// Single invertible model mapping X to Y directly; only adversarial terms,
/// cycle consistency holds by construction.
pub fn cycleflow_objective<'g, T: Real>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    f: Net<'_, 'g, FlowModel<T>, T>,
    d: &Discriminators<'_, 'g, T>,
) -> Result<(Objective<'g, T>, Translations<'g, T>)> {
    let fakes = Translations {
        fake_y: flow::direct_forward(f.model, f.bound, x)?,
        fake_x: flow::direct_inverse(f.model, f.bound, y)?,
    };
    let mut obj = Objective::new();
    push_adversarial(&mut obj, d, &fakes)?;
    Ok((obj, fakes))
}
