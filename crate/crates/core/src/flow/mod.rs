//! Invertible generators: 2x2 squeeze followed by blocks of
//! actnorm -> channel reversal -> affine coupling, with exact inverses and
//! log-determinant bookkeeping.
//!
//! Translation between two domains composes one model's forward pass with
//! another model's inverse through the shared latent space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, Layer, ParamId, ParamStore, StackBuilder, INIT_STD};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Space-to-depth factor applied before the first block.
pub const SQUEEZE_FACTOR: usize = 2;
const ACTNORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Image channels before squeezing.
    pub in_channels: usize,
    pub blocks: usize,
    /// Width of the coupling conv nets.
    pub hidden: usize,
    /// Coupling log-scales are bounded to `[-s_max, s_max]`.
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            in_channels: 1,
            blocks: 3,
            hidden: 32,
            s_max: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    logs: ParamId,
    bias: ParamId,
    coupling: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub struct FlowModel<T> {
    config: FlowConfig,
    params: ParamStore<T>,
    blocks: Vec<Block>,
    actnorm_ready: bool,
    broken_inverse: bool,
}

/// Latent code with per-sample `log|det dz/dx|`.
pub struct LatentCode<'g, T> {
    pub z: Var<'g, T>,
    /// Shape `[B]`.
    pub logdet: Var<'g, T>,
}

fn split_sizes(channels: usize) -> (usize, usize) {
    let a = channels / 2;
    (a, channels - a)
}

impl<T: Real> FlowModel<T> {
    /// Identity-initialized model: actnorm scale 1 / shift 0 and zero-initialized
    /// coupling output layers. Actnorm is re-initialized from data by
    /// [`FlowModel::init_actnorm`].
    pub fn new(prefix: &str, config: FlowConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.blocks == 0 || config.hidden == 0 {
            return Err(Error::invalid("flow needs channels, blocks and hidden width"));
        }
        if config.s_max <= 0.0 {
            return Err(Error::invalid("s_max must be positive"));
        }
        let channels = config.in_channels * SQUEEZE_FACTOR * SQUEEZE_FACTOR;
        let (c1, c2) = split_sizes(channels);
        let mut b = StackBuilder::new(prefix, seed);
        let init = Init::Normal(INIT_STD);
        let mut blocks = Vec::with_capacity(config.blocks);
        for k in 0..config.blocks {
            b.set_scope(&format!("block{k}.actnorm."));
            let logs = b.param("logs", Tensor::zeros(vec![channels]));
            let bias = b.param("bias", Tensor::zeros(vec![channels]));
            b.set_scope(&format!("block{k}.coupling."));
            let coupling = vec![
                b.conv(c1, config.hidden, 3, 1, 1, true, init),
                Layer::Relu,
                b.conv(config.hidden, config.hidden, 1, 1, 0, true, init),
                Layer::Relu,
                b.conv(config.hidden, 2 * c2, 3, 1, 1, true, Init::Zeros),
            ];
            blocks.push(Block { logs, bias, coupling });
        }
        Ok(FlowModel {
            config,
            params: b.into_params(),
            blocks,
            actnorm_ready: false,
            broken_inverse: false,
        })
    }

    /// Model with every parameter drawn from N(0, std) (actnorm log-scales
    /// included), marked as initialized. Used to exercise invertibility away
    /// from the identity.
    pub fn random(prefix: &str, config: FlowConfig, seed: u64, std: f64) -> Result<Self> {
        let mut m = Self::new(prefix, config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        m.params.map_values(|_, v| {
            let noise = Tensor::<T>::randn(v.shape().to_vec(), std, &mut rng);
            *v = noise;
        });
        m.actnorm_ready = true;
        Ok(m)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn actnorm_ready(&self) -> bool {
        self.actnorm_ready
    }

    /// Marks actnorm as initialized (e.g. after loading a checkpoint).
    pub fn set_actnorm_ready(&mut self) {
        self.actnorm_ready = true;
    }

    /// Deliberately corrupts the coupling inverse. Used by the invariant
    /// harness to prove it detects a broken flow.
    #[doc(hidden)]
    pub fn inject_inverse_fault(&mut self) {
        self.broken_inverse = true;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (_, c, h, w) = match *shape {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::invalid(format!("flow input must be rank 4, got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                op: "flow input",
                got: c,
                expected: self.config.in_channels,
            });
        }
        if h % SQUEEZE_FACTOR != 0 || w % SQUEEZE_FACTOR != 0 {
            return Err(Error::invalid(format!(
                "flow input {h}x{w} not divisible by squeeze factor {SQUEEZE_FACTOR}"
            )));
        }
        Ok(())
    }

    fn latent_channels(&self) -> usize {
        self.config.in_channels * SQUEEZE_FACTOR * SQUEEZE_FACTOR
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, _, _] if c == self.latent_channels() => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "flow latent",
                left: shape.to_vec(),
                right: vec![0, self.latent_channels(), 0, 0],
            }),
        }
    }

    fn coupling_params<'g>(&self, block: &Block, bound: &Bound<'g, T>, x1: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let c2 = self.latent_channels() - self.latent_channels() / 2;
        let out = nn::run(&block.coupling, bound, x1)?;
        let raw = out.channels(0, c2)?;
        let t = out.channels(c2, c2)?;
        let s_max = self.config.s_max;
        let s = raw.scale(1.0 / s_max).tanh().scale(s_max);
        Ok((s, t))
    }

    /// Latent code of `x` after the squeeze; runs blocks `0..upto`.
    fn forward_blocks<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>, upto: usize) -> Result<LatentCode<'g, T>> {
        let g = x.graph();
        self.check_input(&x.shape())?;
        let batch = x.shape()[0];
        let mut h = x.squeeze2x2()?;
        let mut logdet = g.constant(Tensor::zeros(vec![batch]));
        let channels = self.latent_channels();
        let (c1, c2) = split_sizes(channels);
        for block in &self.blocks[..upto] {
            let shape = h.shape();
            let plane = (shape[2] * shape[3]) as f64;
            let logs = bound[block.logs];
            let bias = bound[block.bias].broadcast_channels(&shape)?;
            let scale = logs.exp().broadcast_channels(&shape)?;
            h = h.add(bias)?.mul(scale)?;
            logdet = logdet.add(logs.sum()?.scale(plane))?;

            h = h.reverse_channels()?;

            let x1 = h.channels(0, c1)?;
            let x2 = h.channels(c1, c2)?;
            let (s, t) = self.coupling_params(block, bound, x1)?;
            let y2 = x2.mul(s.exp())?.add(t)?;
            logdet = logdet.add(s.sum_axes(&[1, 2, 3])?)?;
            h = g.concat_channels(&[x1, y2])?;
        }
        Ok(LatentCode { z: h, logdet })
    }

    /// `z = G(x)` with per-sample log-determinant.
    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Result<LatentCode<'g, T>> {
        self.forward_blocks(bound, x, self.blocks.len())
    }

    /// Exact inverse of [`FlowModel::forward`]; returns the image and the
    /// per-sample log-determinant of the inverse map.
    pub fn inverse_with_logdet<'g>(&self, bound: &Bound<'g, T>, z: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = z.graph();
        self.check_latent(&z.shape())?;
        let batch = z.shape()[0];
        let mut logdet = g.constant(Tensor::zeros(vec![batch]));
        let (c1, c2) = split_sizes(self.latent_channels());
        let mut h = z;
        for block in self.blocks.iter().rev() {
            let y1 = h.channels(0, c1)?;
            let y2 = h.channels(c1, c2)?;
            let (s, t) = self.coupling_params(block, bound, y1)?;
            let inv_scale = if self.broken_inverse { s.exp() } else { s.neg().exp() };
            let x2 = y2.sub(t)?.mul(inv_scale)?;
            logdet = logdet.sub(s.sum_axes(&[1, 2, 3])?)?;
            h = g.concat_channels(&[y1, x2])?;

            h = h.reverse_channels()?;

            let shape = h.shape();
            let plane = (shape[2] * shape[3]) as f64;
            let logs = bound[block.logs];
            let bias = bound[block.bias].broadcast_channels(&shape)?;
            let inv = logs.neg().exp().broadcast_channels(&shape)?;
            h = h.mul(inv)?.sub(bias)?;
            logdet = logdet.sub(logs.sum()?.scale(plane))?;
        }
        Ok((h.unsqueeze2x2()?, logdet))
    }

    pub fn inverse<'g>(&self, bound: &Bound<'g, T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.inverse_with_logdet(bound, z)?.0)
    }

    /// Negative log-likelihood under a standard normal prior, averaged over the batch:
    /// `0.5 * sum(z^2) + 0.5 * D * ln(2 pi) - logdet`.
    pub fn nll_of<'g>(&self, code: &LatentCode<'g, T>) -> Result<Var<'g, T>> {
        let shape = code.z.shape();
        let dims: usize = shape[1..].iter().product();
        let constant = 0.5 * dims as f64 * (2.0 * std::f64::consts::PI).ln();
        code.z
            .square()
            .sum_axes(&[1, 2, 3])?
            .scale(0.5)
            .shift(constant)
            .sub(code.logdet)?
            .mean()
    }

    pub fn nll<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let code = self.forward(bound, x)?;
        self.nll_of(&code)
    }

    /// Data-dependent actnorm initialization: each block's actnorm maps the
    /// given batch to zero mean and unit variance per channel.
    pub fn init_actnorm(&mut self, x: &Tensor<T>) -> Result<()> {
        for k in 0..self.blocks.len() {
            let g = Graph::new();
            let bound = self.params.bind(&g, false);
            let xin = g.constant(x.clone());
            let h = self.forward_blocks(&bound, xin, k)?.z;
            let hv = h.value();
            let (b, c, hh, ww) = hv.dims4()?;
            let n = (b * hh * ww) as f64;
            let mut logs = Vec::with_capacity(c);
            let mut bias = Vec::with_capacity(c);
            for ci in 0..c {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for bi in 0..b {
                    let plane = &hv.data()[(bi * c + ci) * hh * ww..(bi * c + ci + 1) * hh * ww];
                    for &v in plane {
                        let v = v.as_f64();
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / n;
                let var = (sq / n - mean * mean).max(0.0);
                bias.push(T::of(-mean));
                logs.push(T::of(-(var.sqrt() + ACTNORM_EPS).ln()));
            }
            let block = &self.blocks[k];
            *self.params.get_mut(block.logs) = Tensor::new(vec![c], logs)?;
            *self.params.get_mut(block.bias) = Tensor::new(vec![c], bias)?;
        }
        self.actnorm_ready = true;
        Ok(())
    }
}

/// Forward pass on plain tensors: latent code and per-sample log-determinant.
pub fn forward_flow<T: Real>(m: &FlowModel<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
    let g = Graph::new();
    let bound = m.params().bind(&g, false);
    let code = m.forward(&bound, g.constant(x.clone()))?;
    let z = (*code.z.value()).clone();
    Ok((z, code.logdet.value().to_f64_vec()))
}

pub fn inverse_flow<T: Real>(m: &FlowModel<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bound = m.params().bind(&g, false);
    let x = m.inverse(&bound, g.constant(z.clone()))?;
    Ok((*x.value()).clone())
}

/// `G_dst^{-1}(G_src(x))` through the shared latent space.
pub fn translate<T: Real>(src: &FlowModel<T>, dst: &FlowModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let bs = src.params().bind(&g, false);
    let bd = dst.params().bind(&g, false);
    let y = translate_var(src, &bs, dst, &bd, g.constant(x.clone()))?;
    Ok((*y.value()).clone())
}

/// Differentiable translation; also returns the source latent code so the
/// caller can reuse it for the likelihood term.
pub fn translate_var<'g, T: Real>(
    src: &FlowModel<T>,
    src_bound: &Bound<'g, T>,
    dst: &FlowModel<T>,
    dst_bound: &Bound<'g, T>,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    Ok(translate_with_code(src, src_bound, dst, dst_bound, x)?.0)
}

pub fn translate_with_code<'g, T: Real>(
    src: &FlowModel<T>,
    src_bound: &Bound<'g, T>,
    dst: &FlowModel<T>,
    dst_bound: &Bound<'g, T>,
    x: Var<'g, T>,
) -> Result<(Var<'g, T>, LatentCode<'g, T>)> {
    let code = src.forward(src_bound, x)?;
    let y = dst.inverse(dst_bound, code.z)?;
    Ok((y, code))
}

/// Direct one-model mapping `X -> Y` (no shared latent): `unsqueeze(G(x))`.
pub fn direct_forward<'g, T: Real>(m: &FlowModel<T>, bound: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    m.forward(bound, x)?.z.unsqueeze2x2()
}

/// Inverse of [`direct_forward`]: `G^{-1}(squeeze(y))`.
pub fn direct_inverse<'g, T: Real>(m: &FlowModel<T>, bound: &Bound<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    m.inverse(bound, y.squeeze2x2()?)
}

pub fn mle_nll<T: Real>(m: &FlowModel<T>, x: &Tensor<T>) -> Result<f64> {
    let g = Graph::new();
    let bound = m.params().bind(&g, false);
    m.nll(&bound, g.constant(x.clone()))?.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64) * 0.713).sin())
    }

    #[test]
    fn identity_model_is_squeeze_with_zero_logdet() {
        let m = FlowModel::<f64>::new("gx", FlowConfig::default(), 0).unwrap();
        let x = ramp(vec![2, 1, 4, 4]);
        let (z, logdet) = forward_flow(&m, &x).unwrap();
        let g = Graph::new();
        let sq = g.constant(x.clone()).squeeze2x2().unwrap();
        // Channel reversal happens an odd number of times (3 blocks).
        let expected = sq.reverse_channels().unwrap();
        assert_eq!(z, *expected.value());
        assert_eq!(logdet, vec![0.0, 0.0]);
        assert_eq!(inverse_flow(&m, &z).unwrap(), x);
    }

    #[test]
    fn nll_at_zero_is_gaussian_constant() {
        let m = FlowModel::<f64>::new("gx", FlowConfig::default(), 0).unwrap();
        let nll = mle_nll(&m, &Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        assert!((nll - 8.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((nll - 14.7030).abs() < 5e-5);
    }

    #[test]
    fn odd_sizes_are_rejected() {
        let m = FlowModel::<f64>::new("gx", FlowConfig::default(), 0).unwrap();
        assert!(forward_flow(&m, &Tensor::zeros(vec![1, 1, 5, 4])).is_err());
        assert!(inverse_flow(&m, &Tensor::zeros(vec![1, 3, 2, 2])).is_err());
    }

    #[test]
    fn random_model_round_trips_in_f64() {
        let m = FlowModel::<f64>::random("gx", FlowConfig::default(), 7, 0.3).unwrap();
        let x = ramp(vec![2, 1, 8, 8]);
        let (z, fwd) = forward_flow(&m, &x).unwrap();
        assert!(fwd.iter().all(|v| v.abs() > 1e-3));
        let back = inverse_flow(&m, &z).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);

        let g = Graph::new();
        let bound = m.params().bind(&g, false);
        let (_, inv) = m.inverse_with_logdet(&bound, g.constant(z)).unwrap();
        for (a, b) in fwd.iter().zip(inv.value().data()) {
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn actnorm_init_standardizes_first_block_input() {
        let mut m = FlowModel::<f64>::new("gx", FlowConfig::default(), 0).unwrap();
        let x = Tensor::from_fn(vec![2, 1, 4, 4], |i| 3.0 + 2.0 * ((i as f64) * 1.3).cos());
        m.init_actnorm(&x).unwrap();
        assert!(m.actnorm_ready());
        let g = Graph::new();
        let bound = m.params().bind(&g, false);
        let code = m.forward_blocks(&bound, g.constant(x), 1).unwrap();
        // after block 0 the untouched half (x1) is standardized
        let z = code.z.value();
        let (b, _, h, w) = z.dims4().unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..b)
                .flat_map(|bi| z.data()[(bi * 4 + c) * h * w..(bi * 4 + c + 1) * h * w].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }
    }

    #[test]
    fn parameter_names() {
        let m = FlowModel::<f32>::new("gx", FlowConfig::default(), 0).unwrap();
        let names = m.params().names();
        assert_eq!(names[0], "gx.block0.actnorm.logs");
        assert_eq!(names[1], "gx.block0.actnorm.bias");
        assert_eq!(names[2], "gx.block0.coupling.layer0.weight");
        assert!(names.iter().any(|n| n == "gx.block2.coupling.layer2.bias"));
    }

    #[test]
    fn broken_inverse_is_detectable() {
        let mut m = FlowModel::<f64>::random("gx", FlowConfig::default(), 3, 0.3).unwrap();
        let x = ramp(vec![1, 1, 4, 4]);
        let (z, _) = forward_flow(&m, &x).unwrap();
        m.inject_inverse_fault();
        assert!(inverse_flow(&m, &z).unwrap().max_abs_diff(&x).unwrap() > 1e-3);
    }
}
