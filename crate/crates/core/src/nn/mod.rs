//! Layer stacks and the network builders used by the trainer: PatchGAN
//! discriminator, registration U-Net, baseline encoder-decoder generator,
//! and the small conv nets inside flow couplings.

mod params;

pub use params::{Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub enum Layer {
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    /// Per-sample, per-channel normalization over H x W, no affine parameters.
    InstanceNorm,
    LeakyRelu,
    Relu,
    Tanh,
    /// `x + inner(x)`
    Residual(Vec<Layer>),
    /// `concat(x, inner(x))` along channels (U-Net skip).
    Skip(Vec<Layer>),
}

/// Ordered layers plus the registry of their parameters.
#[derive(Clone, Debug)]
pub struct LayerStack<T> {
    params: ParamStore<T>,
    layers: Vec<Layer>,
    in_channels: usize,
    out_channels: usize,
}

/// Weight initialization of a conv layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
}

/// Registers conv parameters as `<scope>layerN.{weight,bias}` with a running counter.
pub struct StackBuilder<T> {
    params: ParamStore<T>,
    rng: ChaCha8Rng,
    scope: String,
    next: usize,
}

impl<T: Real> StackBuilder<T> {
    pub fn new(prefix: &str, seed: u64) -> Self {
        StackBuilder {
            params: ParamStore::new(prefix),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: String::new(),
            next: 0,
        }
    }

    /// Prefixes subsequent names with `scope` and restarts layer numbering.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope = scope.to_string();
        self.next = 0;
    }

    /// Registers a non-conv parameter under the current scope.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.params.add(&format!("{}{name}", self.scope), value)
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn weights(&mut self, shape: Vec<usize>, bias_len: usize, bias: bool, init: Init) -> (ParamId, Option<ParamId>) {
        let n = self.next;
        self.next += 1;
        let w = match init {
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::Zeros => Tensor::zeros(shape),
        };
        let weight = self.param(&format!("layer{n}.weight"), w);
        let bias = bias.then(|| self.param(&format!("layer{n}.bias"), Tensor::zeros(vec![bias_len])));
        (weight, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool, init: Init) -> Layer {
        let (weight, bias) = self.weights(vec![cout, cin, kernel, kernel], cout, bias, init);
        Layer::Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool, init: Init) -> Layer {
        let (weight, bias) = self.weights(vec![cin, cout, kernel, kernel], cout, bias, init);
        Layer::ConvTranspose {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn finish(self, layers: Vec<Layer>, in_channels: usize, out_channels: usize) -> LayerStack<T> {
        LayerStack {
            params: self.params,
            layers,
            in_channels,
            out_channels,
        }
    }
}

/// Instance normalization of a `[B,C,H,W]` variable.
pub fn instance_norm<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let mean = x.mean_axes(&[2, 3])?.broadcast_planes(&shape)?;
    let centered = x.sub(mean)?;
    let var = centered.square().mean_axes(&[2, 3])?;
    let std = var.shift(NORM_EPS).sqrt().broadcast_planes(&shape)?;
    centered.div(std)
}

pub(crate) fn run<'g, T: Real>(layers: &[Layer], bound: &Bound<'g, T>, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
    let g = x.graph();
    for layer in layers {
        x = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                pad,
            } => g.conv2d(x, bound[*weight], bias.map(|b| bound[b]), *stride, *pad)?,
            Layer::ConvTranspose {
                weight,
                bias,
                stride,
                pad,
            } => g.conv_transpose2d(x, bound[*weight], bias.map(|b| bound[b]), *stride, *pad)?,
            Layer::InstanceNorm => instance_norm(x)?,
            Layer::LeakyRelu => x.leaky_relu(),
            Layer::Relu => x.relu(),
            Layer::Tanh => x.tanh(),
            Layer::Residual(inner) => {
                let y = run(inner, bound, x)?;
                x.add(y)?
            }
            Layer::Skip(inner) => {
                let y = run(inner, bound, x)?;
                g.concat_channels(&[x, y])?
            }
        };
    }
    Ok(x)
}

impl<T: Real> LayerStack<T> {
    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<'g>(&self, bound: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                op: "layer stack input",
                got: c,
                expected: self.in_channels,
            });
        }
        run(&self.layers, bound, x)
    }
}

/// 70x70 PatchGAN discriminator with base width 64.
pub fn build_patchgan<T: Real>(in_channels: usize) -> Result<LayerStack<T>> {
    build_patchgan_with("net", in_channels, 64, 0)
}

/// PatchGAN: C(w)-C(2w)-C(4w)-C(8w)-1, kernel 4, stride 2 for the first three
/// convs, instance norm on all but the first, leaky ReLU(0.2). Convs followed
/// by instance norm carry no bias (the norm cancels it).
pub fn build_patchgan_with<T: Real>(prefix: &str, in_channels: usize, width: usize, seed: u64) -> Result<LayerStack<T>> {
    if in_channels == 0 || width == 0 {
        return Err(Error::invalid("patchgan needs at least one input channel and width"));
    }
    let mut b = StackBuilder::new(prefix, seed);
    let init = Init::Normal(INIT_STD);
    let layers = vec![
        b.conv(in_channels, width, 4, 2, 1, true, init),
        Layer::LeakyRelu,
        b.conv(width, 2 * width, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::LeakyRelu,
        b.conv(2 * width, 4 * width, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::LeakyRelu,
        b.conv(4 * width, 8 * width, 4, 1, 1, false, init),
        Layer::InstanceNorm,
        Layer::LeakyRelu,
        b.conv(8 * width, 1, 4, 1, 1, true, init),
    ];
    Ok(b.finish(layers, in_channels, 1))
}

/// Side length of the PatchGAN output map for a square input.
pub fn patchgan_output_size(input: usize) -> Option<usize> {
    let mut s = input;
    for (stride, count) in [(2usize, 3), (1, 2)] {
        for _ in 0..count {
            let padded = s + 2;
            if padded < 4 {
                return None;
            }
            s = (padded - 4) / stride + 1;
        }
    }
    Some(s)
}

/// Receptive field (in input pixels) of one PatchGAN output unit.
pub fn patchgan_receptive_field() -> usize {
    // Walk the kernel-4 layers backwards: r <- (r - 1) * stride + 4.
    [1usize, 1, 2, 2, 2].iter().fold(1, |r, &s| (r - 1) * s + 4)
}

/// Registration U-Net with `levels` down/up stages and width 16.
pub fn build_regnet<T: Real>(levels: usize) -> Result<LayerStack<T>> {
    build_regnet_with("net", levels, 16, 0)
}

/// Registration network: input is the channel concatenation of two slices,
/// output a 2-channel displacement field at input resolution. The final conv
/// is zero-initialized so the initial field is identically zero.
pub fn build_regnet_with<T: Real>(prefix: &str, levels: usize, width: usize, seed: u64) -> Result<LayerStack<T>> {
    if levels == 0 || width == 0 {
        return Err(Error::invalid("regnet needs at least one level and nonzero width"));
    }
    let mut b = StackBuilder::new(prefix, seed);
    let init = Init::Normal(INIT_STD);
    let mut layers = vec![b.conv(2, width, 3, 1, 1, true, init), Layer::LeakyRelu];

    // Innermost stage first, wrapped outward. Each stage maps c -> c + width.
    fn stage<T: Real>(b: &mut StackBuilder<T>, depth: usize, width: usize, init: Init) -> Layer {
        let mut inner = vec![b.conv(width, width, 4, 2, 1, true, init), Layer::LeakyRelu];
        let inner_out = if depth > 1 {
            inner.push(stage(b, depth - 1, width, init));
            2 * width
        } else {
            width
        };
        inner.push(b.conv_transpose(inner_out, width, 4, 2, 1, true, init));
        inner.push(Layer::LeakyRelu);
        Layer::Skip(inner)
    }
    layers.push(stage(&mut b, levels, width, init));
    layers.push(b.conv(2 * width, width, 3, 1, 1, true, init));
    layers.push(Layer::LeakyRelu);
    layers.push(b.conv(width, 2, 3, 1, 1, true, Init::Zeros));
    Ok(b.finish(layers, 2, 2))
}

/// Baseline cycle-consistent generator with width 32.
pub fn build_baseline_generator<T: Real>(in_channels: usize) -> Result<LayerStack<T>> {
    build_baseline_generator_with("net", in_channels, 32, 0)
}

/// Encoder (two stride-2 convs), two residual blocks, decoder (two transposed
/// convs), tanh output.
pub fn build_baseline_generator_with<T: Real>(prefix: &str, in_channels: usize, width: usize, seed: u64) -> Result<LayerStack<T>> {
    if in_channels == 0 || width == 0 {
        return Err(Error::invalid("generator needs at least one channel and nonzero width"));
    }
    let mut b = StackBuilder::new(prefix, seed);
    let init = Init::Normal(INIT_STD);
    let w4 = 4 * width;
    let mut layers = vec![
        b.conv(in_channels, width, 3, 1, 1, false, init),
        Layer::InstanceNorm,
        Layer::Relu,
        b.conv(width, 2 * width, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::Relu,
        b.conv(2 * width, w4, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::Relu,
    ];
    for _ in 0..2 {
        let block = vec![
            b.conv(w4, w4, 3, 1, 1, false, init),
            Layer::InstanceNorm,
            Layer::Relu,
            b.conv(w4, w4, 3, 1, 1, false, init),
            Layer::InstanceNorm,
        ];
        layers.push(Layer::Residual(block));
    }
    layers.extend([
        b.conv_transpose(w4, 2 * width, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::Relu,
        b.conv_transpose(2 * width, width, 4, 2, 1, false, init),
        Layer::InstanceNorm,
        Layer::Relu,
        b.conv(width, in_channels, 3, 1, 1, true, init),
        Layer::Tanh,
    ]);
    Ok(b.finish(layers, in_channels, in_channels))
}
