// im2col-based convolution kernels on raw slices.
//
// Layouts: activations [B, C, H, W]; conv weights [O, I, K, K];
// transposed-conv weights [I, O, K, K] (same tensor as the conv it is adjoint to).

use super::Real;

/// Geometry of a strided, zero-padded square-kernel convolution from an
/// image of `channels x height x width` onto an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn forward(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps an `in_h x in_w` grid
    /// to the transposed-conv output.
    pub fn transposed(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let full_h = (in_h.checked_sub(1)?) * stride + kernel;
        let full_w = (in_w.checked_sub(1)?) * stride + kernel;
        let height = full_h.checked_sub(2 * pad).filter(|&h| h > 0)?;
        let width = full_w.checked_sub(2 * pad).filter(|&w| w > 0)?;
        let g = ConvGeom::forward(channels, height, width, kernel, stride, pad)?;
        (g.out_h == in_h && g.out_w == in_w).then_some(g)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *v = if iw < 0 || iw as usize >= g.width {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the (zeroed or accumulating) image.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.width {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// out[b] = W · im2col(x[b]) + bias. Returns the flat output of shape `[batch, out_ch, out_h, out_w]`.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    out_ch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); batch * out_ch * ncols];
    for b in 0..batch {
        im2col(g, &x[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
        let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_ch, rows, ncols, w, rows as isize, 1, &cols, ncols as isize, 1, beta, dst,
            ncols as isize, 1,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    out_ch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = need_x.then(|| vec![T::zero(); batch * g.image_len()]);
    let mut dw = need_w.then(|| vec![T::zero(); out_ch * rows]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); out_ch];
        for b in 0..batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * out_ch + o) * ncols;
                *acc = *acc + dout[start..start + ncols].iter().copied().sum::<T>();
            }
        }
        db
    });
    for b in 0..batch {
        let dout_b = &dout[b * out_ch * ncols..(b + 1) * out_ch * ncols];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
            // dW += dOut_b [O, P] · cols^T [P, R]
            T::gemm(
                out_ch, ncols, rows, dout_b, ncols as isize, 1, &cols, 1, ncols as isize,
                T::one(), dw, rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [R, O] · dOut_b [O, P]
            T::gemm(
                rows, out_ch, ncols, w, 1, rows as isize, dout_b, ncols as isize, 1, T::zero(),
                &mut cols, ncols as isize, 1,
            );
            col2im(g, &cols, &mut dx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution: x is `[batch, in_ch, out_h, out_w]` of the underlying
/// geometry, w is `[in_ch, g.channels, K, K]`; output is `[batch, g.channels, g.height, g.width]`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    in_ch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); batch * g.image_len()];
    let plane = g.height * g.width;
    for b in 0..batch {
        let x_b = &x[b * in_ch * ncols..(b + 1) * in_ch * ncols];
        // cols [R, P] = W^T [R, I] · x_b [I, P]
        T::gemm(
            rows, in_ch, ncols, w, 1, rows as isize, x_b, ncols as isize, 1, T::zero(), &mut cols,
            ncols as isize, 1,
        );
        let dst = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        col2im(g, &cols, dst);
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = *v + bias[c];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    in_ch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let plane = g.height * g.width;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = need_x.then(|| vec![T::zero(); batch * in_ch * ncols]);
    let mut dw = need_w.then(|| vec![T::zero(); in_ch * rows]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); g.channels];
        for b in 0..batch {
            for (c, acc) in db.iter_mut().enumerate() {
                let start = b * g.image_len() + c * plane;
                *acc = *acc + dout[start..start + plane].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { dx, dw, db };
    }
    for b in 0..batch {
        im2col(g, &dout[b * g.image_len()..(b + 1) * g.image_len()], &mut cols);
        if let Some(dx) = dx.as_mut() {
            // dx_b [I, P] = W [I, R] · dcols [R, P]
            T::gemm(
                in_ch, rows, ncols, w, rows as isize, 1, &cols, ncols as isize, 1, T::zero(),
                &mut dx[b * in_ch * ncols..(b + 1) * in_ch * ncols], ncols as isize, 1,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let x_b = &x[b * in_ch * ncols..(b + 1) * in_ch * ncols];
            // dW [I, R] += x_b [I, P] · dcols^T [P, R]
            T::gemm(
                in_ch, ncols, rows, x_b, ncols as isize, 1, &cols, 1, ncols as isize, T::one(),
                dw, rows as isize, 1,
            );
        }
    }
    ConvGrads { dx, dw, db }
}
