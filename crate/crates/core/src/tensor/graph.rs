use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::{index, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    /// Fixed negative slope of 0.2.
    LeakyRelu,
    /// Subgradient 0 at 0.
    Abs,
    Square,
    Sqrt,
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Shift {
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axes: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Gather {
        a: usize,
        map: Rc<Vec<usize>>,
    },
    Concat {
        parts: Vec<usize>,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Warp {
        img: usize,
        flow: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only populated for leaves that require grad.
    grad: Option<Tensor<T>>,
}

/// Operation tape. Nodes are appended in execution order, so node ids are a
/// topological order of the computation.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let id = loss.id;
        let (shape, requires) = {
            let nodes = self.nodes.borrow();
            (nodes[id].value.shape().to_vec(), nodes[id].requires_grad)
        };
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !requires {
            return Err(Error::NoGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=id).map(|_| None).collect();
        grads[id] = Some(Tensor::full(shape, T::one()));
        for n in (0..=id).rev() {
            let Some(g) = grads[n].take() else { continue };
            let nodes = self.nodes.borrow();
            let node = &nodes[n];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                drop(nodes);
                let mut nodes = self.nodes.borrow_mut();
                let slot = &mut nodes[n].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g)?,
                    None => *slot = Some(g),
                }
                continue;
            }
            let contributions = backward_op(&nodes, node, &g)?;
            drop(nodes);
            for (input, grad) in contributions {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    pub fn conv2d<'g>(
        &'g self,
        x: Var<'g, T>,
        w: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let xv = x.value();
        let wv = w.value();
        let (batch, cin, h, wd) = xv.dims4()?;
        let (cout, wcin, k, k2) = wv.dims4()?;
        if k != k2 {
            return Err(Error::invalid(format!("non-square kernel {:?}", wv.shape())));
        }
        if cin != wcin {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                got: cin,
                expected: wcin,
            });
        }
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: bv.shape().to_vec(),
                    right: vec![cout],
                });
            }
        }
        let geom = ConvGeom::forward(cin, h, wd, k, stride, pad).ok_or_else(|| {
            Error::invalid(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"
            ))
        })?;
        let out = conv::conv2d_forward(&geom, batch, cout, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let value = Tensor::new(vec![batch, cout, geom.out_h, geom.out_w], out)?;
        let requires = x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.push(
            value,
            Op::Conv {
                x: x.id,
                w: w.id,
                b: bias.map(|b| b.id),
                geom,
            },
            requires,
        ))
    }

    /// Adjoint of [`Graph::conv2d`] with the same weight layout `[I_conv_out, O, K, K]`:
    /// output size `(H-1)*stride - 2*pad + K`.
    pub fn conv_transpose2d<'g>(
        &'g self,
        x: Var<'g, T>,
        w: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let xv = x.value();
        let wv = w.value();
        let (batch, cin, h, wd) = xv.dims4()?;
        let (wcin, cout, k, k2) = wv.dims4()?;
        if k != k2 {
            return Err(Error::invalid(format!("non-square kernel {:?}", wv.shape())));
        }
        if cin != wcin {
            return Err(Error::ChannelMismatch {
                op: "conv_transpose2d",
                got: cin,
                expected: wcin,
            });
        }
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d bias",
                    left: bv.shape().to_vec(),
                    right: vec![cout],
                });
            }
        }
        let geom = ConvGeom::transposed(cout, h, wd, k, stride, pad).ok_or_else(|| {
            Error::invalid(format!(
                "conv_transpose2d: kernel {k} stride {stride} pad {pad} invalid for {h}x{wd}"
            ))
        })?;
        let out = conv::conv_transpose2d_forward(&geom, batch, cin, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let value = Tensor::new(vec![batch, cout, geom.height, geom.width], out)?;
        let requires = x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x: x.id,
                w: w.id,
                b: bias.map(|b| b.id),
                geom,
            },
            requires,
        ))
    }

    /// Concatenates `[B,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let (b, _, h, w) = first.value().dims4()?;
        let mut channels = 0;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let (vb, vc, vh, vw) = v.dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first.value().shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            channels += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * channels * plane);
        for bi in 0..b {
            for v in &values {
                let per = v.numel() / b;
                data.extend_from_slice(&v.data()[bi * per..(bi + 1) * per]);
            }
        }
        let value = Tensor::new(vec![b, channels, h, w], data)?;
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            requires,
        ))
    }

    /// Bilinear resampling `out(p) = img(p + flow(p))` with displacements in
    /// pixels (channel 0 horizontal, channel 1 vertical) and sample
    /// coordinates clamped to the image border.
    pub fn warp<'g>(&'g self, img: Var<'g, T>, flow: Var<'g, T>) -> Result<Var<'g, T>> {
        let iv = img.value();
        let fv = flow.value();
        let (b, c, h, w) = iv.dims4()?;
        let (fb, fc, fh, fw) = fv.dims4()?;
        if (fb, fc, fh, fw) != (b, 2, h, w) {
            return Err(Error::ShapeMismatch {
                op: "warp",
                left: iv.shape().to_vec(),
                right: fv.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = vec![T::zero(); iv.numel()];
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let s = sample_point(fv.data(), bi, plane, p, x, y, w, h);
                    for ci in 0..c {
                        let src = &iv.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                        out[(bi * c + ci) * plane + p] = s.interpolate(src, w);
                    }
                }
            }
        }
        let value = Tensor::new(iv.shape().to_vec(), out)?;
        let requires = img.requires_grad() || flow.requires_grad();
        Ok(self.push(
            value,
            Op::Warp {
                img: img.id,
                flow: flow.id,
            },
            requires,
        ))
    }
}

/// Bilinear sample location for one output pixel.
struct SamplePoint<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: T,
    wy: T,
    /// Whether the unclamped coordinate lies inside the image (gradient flows to the flow field).
    free_x: bool,
    free_y: bool,
}

#[allow(clippy::too_many_arguments)]
fn sample_point<T: Real>(
    flow: &[T],
    b: usize,
    plane: usize,
    p: usize,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> SamplePoint<T> {
    let dx = flow[(b * 2) * plane + p];
    let dy = flow[(b * 2 + 1) * plane + p];
    let maxx = T::of((w - 1) as f64);
    let maxy = T::of((h - 1) as f64);
    let sx_raw = T::of(x as f64) + dx;
    let sy_raw = T::of(y as f64) + dy;
    let sx = sx_raw.max(T::zero()).min(maxx);
    let sy = sy_raw.max(T::zero()).min(maxy);
    let fx = sx.floor();
    let fy = sy.floor();
    let x0 = fx.as_f64() as usize;
    let y0 = fy.as_f64() as usize;
    SamplePoint {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: sx - fx,
        wy: sy - fy,
        free_x: sx_raw >= T::zero() && sx_raw <= maxx,
        free_y: sy_raw >= T::zero() && sy_raw <= maxy,
    }
}

fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a + t * (b - a)
    }
}

impl<T: Real> SamplePoint<T> {
    fn interpolate(&self, src: &[T], w: usize) -> T {
        let top = lerp(src[self.y0 * w + self.x0], src[self.y0 * w + self.x1], self.wx);
        if self.wy == T::zero() {
            return top;
        }
        let bottom = lerp(src[self.y1 * w + self.x0], src[self.y1 * w + self.x1], self.wx);
        lerp(top, bottom, self.wy)
    }
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn unary_forward<T: Real>(kind: UnaryKind, x: T) -> T {
    let slope = T::of(LEAKY_SLOPE);
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
        UnaryKind::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        }
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// d(out)/d(x) given input `x` and output `y`.
fn unary_derivative<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    let one = T::one();
    match kind {
        UnaryKind::Neg => -one,
        UnaryKind::Exp => y,
        UnaryKind::Log => one / x,
        UnaryKind::Tanh => one - y * y,
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Relu => {
            if x > T::zero() {
                one
            } else {
                T::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > T::zero() {
                one
            } else {
                T::of(LEAKY_SLOPE)
            }
        }
        UnaryKind::Abs => {
            if x > T::zero() {
                one
            } else if x < T::zero() {
                -one
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => x + x,
        UnaryKind::Sqrt => T::of(0.5) / y,
    }
}

/// Maps every input flat index to its output index under reduction of `axes`.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut out_index = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut o = 0;
        for d in 0..rank {
            if !axes.contains(&d) {
                o = o * shape[d] + idx[d];
            }
        }
        out_index.push(o);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out_index)
}

fn sum_to_scalar<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(g.data().iter().copied().sum())
}

type Contributions<T> = Vec<(usize, Tensor<T>)>;

fn backward_op<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Contributions<T>> {
    let req = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| nodes[id].value.clone();
    let mut out: Contributions<T> = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let shape = node.value.shape().to_vec();
            let a_bc = av.numel() == 1 && av.shape() != shape.as_slice();
            let b_bc = bv.numel() == 1 && bv.shape() != shape.as_slice();
            let a_at = |i: usize| if a_bc { av.data()[0] } else { av.data()[i] };
            let b_at = |i: usize| if b_bc { bv.data()[0] } else { bv.data()[i] };
            let finish = |full: Tensor<T>, bc: bool, target: &Tensor<T>| {
                if bc {
                    let s = sum_to_scalar(&full);
                    Tensor::new(target.shape().to_vec(), s.into_data()).expect("scalar")
                } else {
                    full
                }
            };
            if req(*a) {
                let ga = Tensor::from_fn(shape.clone(), |i| {
                    let gi = g.data()[i];
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * b_at(i),
                        BinaryKind::Div => gi / b_at(i),
                    }
                });
                out.push((*a, finish(ga, a_bc, &av)));
            }
            if req(*b) {
                let gb = Tensor::from_fn(shape.clone(), |i| {
                    let gi = g.data()[i];
                    match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * a_at(i),
                        BinaryKind::Div => {
                            let bi = b_at(i);
                            -gi * a_at(i) / (bi * bi)
                        }
                    }
                });
                out.push((*b, finish(gb, b_bc, &bv)));
            }
        }
        Op::Unary { kind, a } => {
            let av = val(*a);
            let y = &node.value;
            let ga = Tensor::from_fn(av.shape().to_vec(), |i| {
                g.data()[i] * unary_derivative(*kind, av.data()[i], y.data()[i])
            });
            out.push((*a, ga));
        }
        Op::Scale { a, factor } => out.push((*a, g.map(|v| v * *factor))),
        Op::Shift { a } => out.push((*a, g.clone())),
        Op::Reduce { kind, a, axes } => {
            let av = val(*a);
            let (_, plan) = reduce_plan(av.shape(), axes);
            let scale = match kind {
                ReduceKind::Sum => T::one(),
                ReduceKind::Mean => {
                    let count: usize = axes.iter().map(|&d| av.shape()[d]).product();
                    T::one() / T::of(count as f64)
                }
            };
            let ga = Tensor::from_fn(av.shape().to_vec(), |i| g.data()[plan[i]] * scale);
            out.push((*a, ga));
        }
        Op::Reshape { a } => {
            let av = val(*a);
            out.push((*a, Tensor::new(av.shape().to_vec(), g.data().to_vec())?));
        }
        Op::Gather { a, map } => {
            let av = val(*a);
            let mut ga = Tensor::zeros(av.shape().to_vec());
            let d = ga.data_mut();
            for (i, &src) in map.iter().enumerate() {
                d[src] = d[src] + g.data()[i];
            }
            out.push((*a, ga));
        }
        Op::Concat { parts } => {
            let (b, _, h, w) = node.value.dims4()?;
            let plane = h * w;
            let total_c = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let pc = pv.shape()[1];
                if req(p) {
                    let mut gp = Vec::with_capacity(pv.numel());
                    for bi in 0..b {
                        let start = (bi * total_c + offset) * plane;
                        gp.extend_from_slice(&g.data()[start..start + pc * plane]);
                    }
                    out.push((p, Tensor::new(pv.shape().to_vec(), gp)?));
                }
                offset += pc;
            }
        }
        Op::Conv { x, w, b, geom } => {
            let xv = val(*x);
            let wv = val(*w);
            let batch = xv.shape()[0];
            let cout = wv.shape()[0];
            let grads = conv::conv2d_backward(
                geom,
                batch,
                cout,
                xv.data(),
                wv.data(),
                g.data(),
                req(*x),
                req(*w),
                b.is_some_and(req),
            );
            if let Some(dx) = grads.dx {
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, Tensor::new(vec![cout], db)?));
            }
        }
        Op::ConvTranspose { x, w, b, geom } => {
            let xv = val(*x);
            let wv = val(*w);
            let batch = xv.shape()[0];
            let cin = xv.shape()[1];
            let grads = conv::conv_transpose2d_backward(
                geom,
                batch,
                cin,
                xv.data(),
                wv.data(),
                g.data(),
                req(*x),
                req(*w),
                b.is_some_and(req),
            );
            if let Some(dx) = grads.dx {
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            if let Some(dw) = grads.dw {
                out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if let (Some(b), Some(db)) = (b, grads.db) {
                out.push((*b, Tensor::new(vec![geom.channels], db)?));
            }
        }
        Op::Warp { img, flow } => {
            let iv = val(*img);
            let fv = val(*flow);
            let (b, c, h, w) = iv.dims4()?;
            let plane = h * w;
            let mut gi = req(*img).then(|| Tensor::zeros(iv.shape().to_vec()));
            let mut gf = req(*flow).then(|| Tensor::zeros(fv.shape().to_vec()));
            let one = T::one();
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let s = sample_point(fv.data(), bi, plane, p, x, y, w, h);
                        let w00 = (one - s.wx) * (one - s.wy);
                        let w01 = s.wx * (one - s.wy);
                        let w10 = (one - s.wx) * s.wy;
                        let w11 = s.wx * s.wy;
                        let mut dsx = T::zero();
                        let mut dsy = T::zero();
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let go = g.data()[base + p];
                            if let Some(gi) = gi.as_mut() {
                                let d = &mut gi.data_mut()[base..base + plane];
                                d[s.y0 * w + s.x0] = d[s.y0 * w + s.x0] + go * w00;
                                d[s.y0 * w + s.x1] = d[s.y0 * w + s.x1] + go * w01;
                                d[s.y1 * w + s.x0] = d[s.y1 * w + s.x0] + go * w10;
                                d[s.y1 * w + s.x1] = d[s.y1 * w + s.x1] + go * w11;
                            }
                            if gf.is_some() {
                                let src = &iv.data()[base..base + plane];
                                let i00 = src[s.y0 * w + s.x0];
                                let i01 = src[s.y0 * w + s.x1];
                                let i10 = src[s.y1 * w + s.x0];
                                let i11 = src[s.y1 * w + s.x1];
                                dsx = dsx + go * ((one - s.wy) * (i01 - i00) + s.wy * (i11 - i10));
                                dsy = dsy + go * ((one - s.wx) * (i10 - i00) + s.wx * (i11 - i01));
                            }
                        }
                        if let Some(gf) = gf.as_mut() {
                            let d = gf.data_mut();
                            if s.free_x {
                                d[(bi * 2) * plane + p] = dsx;
                            }
                            if s.free_y {
                                d[(bi * 2 + 1) * plane + p] = dsy;
                            }
                        }
                    }
                }
            }
            if let Some(gi) = gi {
                out.push((*img, gi));
            }
            if let Some(gf) = gf {
                out.push((*flow, gf));
            }
        }
    }
    Ok(out)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Scalar value as f64.
    pub fn item(&self) -> Result<f64> {
        Ok(self.value().item()?.as_f64())
    }

    /// Same value as a fresh constant leaf (stop-gradient).
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn binary(self, kind: BinaryKind, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = other.value();
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let shape = broadcast_shapes(name, av.shape(), bv.shape())?;
        let a_bc = av.numel() == 1 && av.shape() != shape.as_slice();
        let b_bc = bv.numel() == 1 && bv.shape() != shape.as_slice();
        let value = Tensor::from_fn(shape, |i| {
            let x = if a_bc { av.data()[0] } else { av.data()[i] };
            let y = if b_bc { bv.data()[0] } else { bv.data()[i] };
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            }
        });
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            requires,
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'g, T> {
        let value = self.value().map(|x| unary_forward(kind, x));
        let requires = self.requires_grad();
        self.graph.push(value, Op::Unary { kind, a: self.id }, requires)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(UnaryKind::Log)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn leaky_relu(self) -> Var<'g, T> {
        self.unary(UnaryKind::LeakyRelu)
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(UnaryKind::Square)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(UnaryKind::Sqrt)
    }

    /// Multiplication by a constant.
    pub fn scale(self, factor: f64) -> Var<'g, T> {
        let f = T::of(factor);
        let value = self.value().map(|x| x * f);
        let requires = self.requires_grad();
        self.graph.push(value, Op::Scale { a: self.id, factor: f }, requires)
    }

    /// Addition of a constant.
    pub fn shift(self, offset: f64) -> Var<'g, T> {
        let o = T::of(offset);
        let value = self.value().map(|x| x + o);
        let requires = self.requires_grad();
        self.graph.push(value, Op::Shift { a: self.id }, requires)
    }

    pub fn reduce(self, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Var<'g, T>> {
        let v = self.value();
        let rank = v.rank();
        let axes: Vec<usize> = match axes {
            Some(axes) => {
                for &a in axes {
                    if a >= rank {
                        return Err(Error::InvalidAxis { axis: a, rank });
                    }
                }
                let mut axes = axes.to_vec();
                axes.sort_unstable();
                axes.dedup();
                axes
            }
            None => (0..rank).collect(),
        };
        let (out_shape, plan) = reduce_plan(v.shape(), &axes);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (i, &o) in plan.iter().enumerate() {
            data[o] = data[o] + v.data()[i];
        }
        if kind == ReduceKind::Mean {
            let count: usize = axes.iter().map(|&d| v.shape()[d]).product();
            let inv = T::one() / T::of(count as f64);
            for d in &mut data {
                *d = *d * inv;
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let requires = self.requires_grad();
        Ok(self.graph.push(
            value,
            Op::Reduce {
                kind,
                a: self.id,
                axes,
            },
            requires,
        ))
    }

    /// Sum over all elements.
    pub fn sum(self) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Sum, None)
    }

    /// Mean over all elements.
    pub fn mean(self) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Mean, None)
    }

    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Sum, Some(axes))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'g, T>> {
        self.reduce(ReduceKind::Mean, Some(axes))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let value = self.value().reshape(shape)?;
        let requires = self.requires_grad();
        Ok(self.graph.push(value, Op::Reshape { a: self.id }, requires))
    }

    /// `out[i] = self[map[i]]`, reshaped to `shape`.
    pub fn gather(self, shape: Vec<usize>, map: Vec<usize>) -> Result<Var<'g, T>> {
        let v = self.value();
        if shape.iter().product::<usize>() != map.len() {
            return Err(Error::DataLength {
                len: map.len(),
                shape,
            });
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                v.numel()
            )));
        }
        let data = map.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let requires = self.requires_grad();
        Ok(self.graph.push(
            value,
            Op::Gather {
                a: self.id,
                map: Rc::new(map),
            },
            requires,
        ))
    }

    pub fn squeeze2x2(self) -> Result<Var<'g, T>> {
        let (shape, map) = index::squeeze2x2(&self.shape())?;
        self.gather(shape, map)
    }

    pub fn unsqueeze2x2(self) -> Result<Var<'g, T>> {
        let (shape, map) = index::unsqueeze2x2(&self.shape())?;
        self.gather(shape, map)
    }

    pub fn channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let (shape, map) = index::channel_slice(&self.shape(), start, len)?;
        self.gather(shape, map)
    }

    pub fn reverse_channels(self) -> Result<Var<'g, T>> {
        let (shape, map) = index::channel_reverse(&self.shape())?;
        self.gather(shape, map)
    }

    pub fn crop(self, margin: usize) -> Result<Var<'g, T>> {
        if margin == 0 {
            return Ok(self);
        }
        let (shape, map) = index::crop(&self.shape(), margin)?;
        self.gather(shape, map)
    }

    /// Differences `x[next] - x[cur]` between spatially adjacent pixels along axis 2 or 3.
    pub fn neighbor_diff(self, axis: usize) -> Result<Var<'g, T>> {
        let (shape, next, cur) = index::neighbor_pairs(&self.shape(), axis)?;
        let a = self.gather(shape.clone(), next)?;
        let b = self.gather(shape, cur)?;
        a.sub(b)
    }

    /// Expands a per-channel vector `[C]` to the shape of `like` (`[B,C,H,W]`).
    pub fn broadcast_channels(self, like: &[usize]) -> Result<Var<'g, T>> {
        let c = self.value().numel();
        let (shape, map) = index::channel_broadcast(c, like)?;
        self.gather(shape, map)
    }

    /// Expands per-plane values `[B,C]` to `[B,C,H,W]`.
    pub fn broadcast_planes(self, like: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.numel() != like.iter().take(2).product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_planes",
                left: v.shape().to_vec(),
                right: like.to_vec(),
            });
        }
        let (shape, map) = index::plane_broadcast(like)?;
        self.gather(shape, map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_exp_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let z = g.constant(Tensor::zeros(vec![2]));
        assert_eq!(z.exp().value().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.leaf(Tensor::scalar(2.0));
        let y = c.mul(x).unwrap().sum().unwrap();
        assert_eq!(y.item().unwrap(), 12.0);
        g.backward(y).unwrap();
        assert_eq!(c.grad().unwrap().data(), &[6.0]);
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.square().sum().unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.square().sum().unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(3.0));
        assert!(matches!(g.backward(c), Err(Error::NoGraph)));
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x.square()), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[2], &[5.0, 5.0]));
        let loss = x.sum().unwrap();
        g.backward(loss).unwrap();
        assert!(unused.grad().map_or(true, |g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn reduce_examples() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum().unwrap().item().unwrap(), 6.0);
        let z = g.leaf(Tensor::zeros(vec![4]));
        let m = z.mean().unwrap();
        assert_eq!(m.item().unwrap(), 0.0);
        g.backward(m).unwrap();
        assert_eq!(z.grad().unwrap().data(), &[0.25; 4]);
        assert!(matches!(x.sum_axes(&[1]), Err(Error::InvalidAxis { axis: 1, rank: 1 })));
    }

    #[test]
    fn reduce_over_axes_keeps_remaining_order() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 2], |i| i as f64));
        let s = x.sum_axes(&[1]).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.value().data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn abs_subgradient_is_zero_at_zero() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        g.backward(x.abs().sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let g = Graph::<f64>::new();
        let x = Tensor::from_fn(vec![1, 1, 4, 5], |i| (i as f64).sin());
        let mut k = Tensor::zeros(vec![1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = g.conv2d(g.constant(x.clone()), g.constant(k), None, 1, 1).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn conv_output_size_and_channel_check() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 9, 9]));
        let w = g.constant(Tensor::zeros(vec![3, 2, 4, 4]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        // floor((9 + 2 - 4) / 2) + 1 = 4
        assert_eq!(y.shape(), vec![1, 3, 4, 4]);
        let bad = g.constant(Tensor::zeros(vec![3, 1, 4, 4]));
        assert!(matches!(g.conv2d(x, bad, None, 1, 0), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn conv_transpose_scalar_example() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(y.value().data(), &[6.0]);
        let x = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
        let w = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        // (5 - 1) * 2 - 2 + 4 = 10
        assert_eq!(g.conv_transpose2d(x, w, None, 2, 1).unwrap().shape(), vec![1, 2, 10, 10]);
    }

    #[test]
    fn warp_zero_flow_is_bitwise_identity() {
        let g = Graph::<f32>::new();
        let mut img = Tensor::<f32>::from_fn(vec![1, 2, 4, 4], |i| (i as f32 * 0.37).sin());
        img.data_mut()[3] = -0.0;
        let y = g.warp(g.constant(img.clone()), g.constant(Tensor::zeros(vec![1, 2, 4, 4]))).unwrap();
        let same = y.value().data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let g = Graph::<f64>::new();
        let img = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
        let flow = g.constant(Tensor::zeros(vec![1, 2, 4, 5]));
        assert!(g.warp(img, flow).is_err());
    }
}
