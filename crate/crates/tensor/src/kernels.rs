//! Numeric kernels shared by the tape and by value-level callers.
//!
//! Every kernel is single-threaded and has a fixed summation order, so
//! results are reproducible bit-for-bit across runs.

use crate::tensor::{numel, Tensor};

/// `c = beta * c + a * b` where `a` is `m x k` and `b` is `k x n`, each with
/// explicit row and column strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided views; the
    // largest touched offsets are checked below.
    let a_max = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let b_max = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(a_max >= 0 && (a_max as usize) < a.len());
    assert!(b_max >= 0 && (b_max as usize) < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "kernel larger than padded input");
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*k*k, out_h*out_w]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    let (k, s, p) = (g.kernel as isize, g.stride as isize, g.pad as isize);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * g.kernel + ki as usize) * g.kernel + kj as usize;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ki;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` sample.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncol = g.col_cols();
    let (k, s, p) = (g.kernel as isize, g.stride as isize, g.pad as isize);
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * g.kernel + ki as usize) * g.kernel + kj as usize;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ki;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = ox as isize * s - p + kj;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, C, H, W]`, `w: [O, C, k, k]` -> `[N, O, out_h, out_w]`, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, k2, "only square kernels are supported");
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut out = vec![0.0; n * o * ncol];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let xs = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        im2col(xs, &g, &mut cols);
        gemm(
            o,
            rows,
            ncol,
            w.data(),
            rows as isize,
            1,
            &cols,
            ncol as isize,
            1,
            0.0,
            &mut out[b * o * ncol..(b + 1) * o * ncol],
        );
    }
    Tensor::new(&[n, o, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let gy = &grad_out.data()[b * o * ncol..(b + 1) * o * ncol];
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
            im2col(xs, &g, &mut cols);
            // gw[o, rows] += gy[o, ncol] * cols^T
            gemm(o, ncol, rows, gy, ncol as isize, 1, &cols, 1, ncol as isize, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            // cols = w^T[rows, o] * gy[o, ncol]
            gemm(rows, o, ncol, w.data(), 1, rows as isize, gy, ncol as isize, 1, 0.0, &mut cols);
            col2im(&cols, &g, &mut gx[b * c * h * wd..(b + 1) * c * h * wd]);
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(w.shape(), d)),
    )
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size - 1) * stride + kernel - 2 * pad
}

/// `x: [N, C, H, W]`, `w: [C, O, k, k]` -> `[N, O, H', W']`; the adjoint of
/// [`conv2d`] with the same kernel geometry.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (wc, o, k, _) = w.dims4();
    assert_eq!(c, wc, "conv_transpose2d channel mismatch: input {c}, weight {wc}");
    let oh = conv_transpose_out(h, k, stride, pad);
    let ow = conv_transpose_out(wd, k, stride, pad);
    let g = ConvGeom::new(o, oh, ow, k, stride, pad);
    assert_eq!((g.out_h, g.out_w), (h, wd), "inconsistent transposed-conv geometry");
    let rows = g.col_rows();
    let ncol = g.col_cols();
    let mut out = vec![0.0; n * o * oh * ow];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let xs = &x.data()[b * c * ncol..(b + 1) * c * ncol];
        // cols[rows, ncol] = w^T[rows, c] * x[c, ncol]
        gemm(rows, c, ncol, w.data(), 1, rows as isize, xs, ncol as isize, 1, 0.0, &mut cols);
        col2im(&cols, &g, &mut out[b * o * oh * ow..(b + 1) * o * oh * ow]);
    }
    Tensor::new(&[n, o, oh, ow], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (_, o, k, _) = w.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let g = ConvGeom::new(o, oh, ow, k, stride, pad);
    let rows = g.col_rows();
    let ncol = g.col_cols();
    debug_assert_eq!(ncol, h * wd);
    let mut gx = need_x.then(|| vec![0.0; x.numel()]);
    let mut gw = need_w.then(|| vec![0.0; w.numel()]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        im2col(&grad_out.data()[b * o * oh * ow..(b + 1) * o * oh * ow], &g, &mut cols);
        if let Some(gx) = gx.as_mut() {
            // gx[c, ncol] = w[c, rows] * cols[rows, ncol]
            gemm(c, rows, ncol, w.data(), rows as isize, 1, &cols, ncol as isize, 1, 0.0, &mut gx[b * c * ncol..(b + 1) * c * ncol]);
        }
        if let Some(gw) = gw.as_mut() {
            // gw[c, rows] += x[c, ncol] * cols^T
            let xs = &x.data()[b * c * ncol..(b + 1) * c * ncol];
            gemm(c, ncol, rows, xs, ncol as isize, 1, &cols, 1, ncol as isize, 1.0, gw);
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(w.shape(), d)),
    )
}

/// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn upsample_nearest2_backward(grad_out: &Tensor) -> Tensor {
    let (n, c, h2, w2) = grad_out.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Bilinear taps for one coordinate along an axis of length `len`, with the
/// coordinate clamped to `[0, len - 1]`. Returns `(i0, i1, frac, interior)`;
/// `interior` is false when the clamp is active, in which case the sample is
/// locally constant in the coordinate.
#[inline]
pub fn bilinear_taps(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    let interior = coord > 0.0 && coord < hi;
    let c = coord.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f64, interior)
}

/// Samples `src: [N, C, Hs, Ws]` at pixel coordinates `coords: [N, 2, Ho, Wo]`
/// (channel 0 = x, channel 1 = y) with bilinear interpolation and
/// clamp-to-edge borders. Pixel centres sit on integer coordinates.
pub fn sample_bilinear(src: &Tensor, coords: &Tensor) -> Tensor {
    let (n, c, hs, ws) = src.dims4();
    let (cn, two, ho, wo) = coords.dims4();
    assert_eq!(n, cn, "sample batch mismatch");
    assert_eq!(two, 2, "coords must have 2 channels");
    let npix = ho * wo;
    let mut out = vec![0.0; n * c * npix];
    for b in 0..n {
        let cx = &coords.data()[(b * 2) * npix..(b * 2 + 1) * npix];
        let cy = &coords.data()[(b * 2 + 1) * npix..(b * 2 + 2) * npix];
        for p in 0..npix {
            let (x0, x1, ax, _) = bilinear_taps(cx[p], ws);
            let (y0, y1, ay, _) = bilinear_taps(cy[p], hs);
            for ch in 0..c {
                let plane = &src.data()[(b * c + ch) * hs * ws..(b * c + ch + 1) * hs * ws];
                let v00 = plane[y0 * ws + x0];
                let v01 = plane[y0 * ws + x1];
                let v10 = plane[y1 * ws + x0];
                let v11 = plane[y1 * ws + x1];
                out[(b * c + ch) * npix + p] =
                    (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn sample_bilinear_backward(
    src: &Tensor,
    coords: &Tensor,
    grad_out: &Tensor,
    need_src: bool,
    need_coords: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, hs, ws) = src.dims4();
    let (_, _, ho, wo) = coords.dims4();
    let npix = ho * wo;
    let mut gs = need_src.then(|| vec![0.0; src.numel()]);
    let mut gc = need_coords.then(|| vec![0.0; coords.numel()]);
    for b in 0..n {
        for p in 0..npix {
            let x = coords.data()[(b * 2) * npix + p];
            let y = coords.data()[(b * 2 + 1) * npix + p];
            let (x0, x1, ax, x_in) = bilinear_taps(x, ws);
            let (y0, y1, ay, y_in) = bilinear_taps(y, hs);
            let mut dx = 0.0;
            let mut dy = 0.0;
            for ch in 0..c {
                let g = grad_out.data()[(b * c + ch) * npix + p];
                let base = (b * c + ch) * hs * ws;
                if let Some(gs) = gs.as_mut() {
                    gs[base + y0 * ws + x0] += g * (1.0 - ay) * (1.0 - ax);
                    gs[base + y0 * ws + x1] += g * (1.0 - ay) * ax;
                    gs[base + y1 * ws + x0] += g * ay * (1.0 - ax);
                    gs[base + y1 * ws + x1] += g * ay * ax;
                }
                if gc.is_some() {
                    let plane = &src.data()[base..base + hs * ws];
                    let v00 = plane[y0 * ws + x0];
                    let v01 = plane[y0 * ws + x1];
                    let v10 = plane[y1 * ws + x0];
                    let v11 = plane[y1 * ws + x1];
                    if x_in {
                        dx += g * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10));
                    }
                    if y_in {
                        dy += g * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01));
                    }
                }
            }
            if let Some(gc) = gc.as_mut() {
                gc[(b * 2) * npix + p] = dx;
                gc[(b * 2 + 1) * npix + p] = dy;
            }
        }
    }
    (
        gs.map(|d| Tensor::new(src.shape(), d)),
        gc.map(|d| Tensor::new(coords.shape(), d)),
    )
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            da.max(db)
        })
        .collect()
}

/// Strides of `shape` laid out against `out` (right-aligned), zero on
/// broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index of a broadcast with the matching flat offsets
/// into both operands.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let total = numel(out);
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &out, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

/// Gradient of a broadcast binary op with respect to both operands, given
/// per-element partial derivatives `da(a, b)` and `db(a, b)`.
pub fn broadcast_binary_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
    da: Option<&dyn Fn(f64, f64) -> f64>,
    db: Option<&dyn Fn(f64, f64) -> f64>,
) -> (Option<Tensor>, Option<Tensor>) {
    let out = grad.shape().to_vec();
    let mut ga = da.map(|_| vec![0.0; a.numel()]);
    let mut gb = db.map(|_| vec![0.0; b.numel()]);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    for_each_broadcast(a.shape(), b.shape(), &out, |o, ia, ib| {
        if let (Some(ga), Some(da)) = (ga.as_mut(), da) {
            ga[ia] += gd[o] * da(ad[ia], bd[ib]);
        }
        if let (Some(gb), Some(db)) = (gb.as_mut(), db) {
            gb[ib] += gd[o] * db(ad[ia], bd[ib]);
        }
    });
    (
        ga.map(|d| Tensor::new(a.shape(), d)),
        gb.map(|d| Tensor::new(b.shape(), d)),
    )
}

#[inline]
fn lerp1(w: f64, a: f64, b: f64) -> f64 {
    if w == 1.0 || a == b {
        a
    } else if w == 0.0 {
        b
    } else {
        w * a + (1.0 - w) * b
    }
}

/// Elementwise `w * a + (1 - w) * b`, exact at `w` in {0, 1} and when
/// `a == b`. `a` and `b` share a shape; `w` broadcasts to it.
pub fn lerp(w: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "lerp operand shape mismatch");
    let wb = broadcast_to(w, a.shape());
    let data = wb
        .data()
        .iter()
        .zip(a.data().iter().zip(b.data()))
        .map(|(&w, (&x, &y))| lerp1(w, x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Sums over the listed axes, keeping them with size 1.
pub fn sum_axes(x: &Tensor, axes: &[usize]) -> Tensor {
    let mut out_shape = x.shape().to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let mut data = vec![0.0; numel(&out_shape)];
    let xd = x.data();
    for_each_broadcast(x.shape(), &out_shape, x.shape(), |o, _, io| data[io] += xd[o]);
    Tensor::new(&out_shape, data)
}

/// Broadcasts `x` up to `shape`.
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    if x.shape() == shape {
        return x.clone();
    }
    let mut data = vec![0.0; numel(shape)];
    let xd = x.data();
    for_each_broadcast(x.shape(), x.shape(), shape, |o, ix, _| data[o] = xd[ix]);
    Tensor::new(shape, data)
}

/// Reduces a broadcast gradient back to `shape`.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut data = vec![0.0; numel(shape)];
    let gd = grad.data();
    for_each_broadcast(shape, shape, grad.shape(), |o, i, _| data[i] += gd[o]);
    Tensor::new(shape, data)
}

/// Concatenates along `axis`.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty());
    let base = parts[0].shape();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut total_axis = 0;
    for p in parts {
        assert_eq!(p.rank(), base.len());
        for (d, (&x, &y)) in p.shape().iter().zip(base).enumerate() {
            assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", p.shape(), base);
        }
        total_axis += p.shape()[axis];
    }
    let mut shape = base.to_vec();
    shape[axis] = total_axis;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// Copies `[start, end)` along `axis`.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let shape = x.shape();
    assert!(start <= end && end <= shape[axis], "slice out of range");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = end - start;
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        let base = o * shape[axis] * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::new(&out_shape, data)
}

/// Adjoint of [`slice_axis`]: embeds `grad` into zeros of `full_shape`.
pub fn unslice_axis(grad: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let len = grad.shape()[axis];
    let mut data = vec![0.0; numel(full_shape)];
    for o in 0..outer {
        let dst = o * full_shape[axis] * inner + start * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Tensor::new(full_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4();
        let (o, _, k, _) = w.dims4();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xx * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n = numel(shape);
        Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect())
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x = ramp(&[2, 3, 7, 6], 0.1);
        let w = ramp(&[4, 3, 3, 3], 0.05);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let fast = conv2d(&x, &w, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry
        let x = ramp(&[1, 3, 8, 8], 0.1);
        let w = ramp(&[5, 3, 4, 4], 0.05);
        let y = ramp(&[1, 5, 4, 4], 0.2);
        let cx = conv2d(&x, &w, 2, 1);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // transposed conv expects weight [C_in_of_transpose, O, k, k] = [5, 3, 4, 4]
        let wt = w.clone();
        let ty = conv_transpose2d(&y, &wt, 2, 1);
        assert_eq!(ty.shape(), x.shape());
        let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn broadcast_and_reduce_roundtrip_shapes() {
        let a = ramp(&[2, 3, 4, 4], 1.0);
        let b = ramp(&[1, 3, 1, 1], 1.0);
        let s = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(s.shape(), &[2, 3, 4, 4]);
        assert_eq!(s.data()[16], a.data()[16] + b.data()[1]);
        let r = reduce_to(&Tensor::ones(&[2, 3, 4, 4]), &[1, 3, 1, 1]);
        assert_eq!(r.data(), &[32.0, 32.0, 32.0]);
    }

    #[test]
    fn bilinear_midpoint_and_clamp() {
        let src = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]);
        let coords = Tensor::new(&[1, 2, 1, 2], vec![0.5, 5.0, 0.0, 0.0]);
        let out = sample_bilinear(&src, &coords);
        assert_eq!(out.data(), &[0.5, 1.0]);
    }
}
