//! Forward and backward kernels on plain tensors.
//!
//! These carry no tape state; [`super::Graph`] records which of them ran and
//! calls the matching backward. They are also used directly for
//! augmentation and evaluation, where no gradients are needed.

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            dilation,
        }
    }

    /// "Same" padding for an odd kernel at unit stride.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::dim("conv stride and dilation must be positive"));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if kernel == 0 || padded < span {
            return Err(Error::dim(format!(
                "conv output extent is non-positive (input {input}, pad {}, kernel {kernel}, dilation {})",
                self.pad, self.dilation
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

struct ConvShape {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvShape {
    fn of<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Self> {
        let [n, cin, h, wd] = x.dims4()?;
        let [cout, wcin, kh, kw] = w.dims4()?;
        if cin != wcin {
            return Err(Error::dim(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        Ok(ConvShape {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: g.out_extent(h, kh)?,
            wo: g.out_extent(wd, kw)?,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], s: &ConvShape, g: ConvGeom, cols: &mut [T]) {
    let p = s.out_plane();
    for c in 0..s.cin {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = ((c * s.kh + ki) * s.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if iy < 0 || iy >= s.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= s.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], s: &ConvShape, g: ConvGeom, dx: &mut [T]) {
    let p = s.out_plane();
    for c in 0..s.cin {
        let plane = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = ((c * s.kh + ki) * s.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.wo {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation via im2col + GEMM. Weight is `[Cout, Cin, kh, kw]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let s = ConvShape::of(x, w, g)?;
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} does not match {} output channels",
                b.shape(),
                s.cout
            )));
        }
    }
    let (k, p) = (s.patch(), s.out_plane());
    let in_stride = s.cin * s.h * s.w;
    let mut out = vec![T::zero(); s.n * s.cout * p];
    let pointwise = g.is_pointwise(s.kh, s.kw);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..s.n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out[b * s.cout * p..(b + 1) * s.cout * p];
        if let Some(bias) = bias {
            for (c, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bias.data()[c]);
            }
        }
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &s, g, &mut cols);
            &cols
        };
        gemm(
            s.cout,
            k,
            p,
            w.data(),
            false,
            src,
            false,
            ob,
            bias.is_some(),
        );
    }
    Tensor::new([s.n, s.cout, s.ho, s.wo], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let s = ConvShape::of(x, w, g)?;
    let (k, p) = (s.patch(), s.out_plane());
    if dy.shape() != [s.n, s.cout, s.ho, s.wo] {
        return Err(Error::dim("conv2d_backward: upstream gradient shape"));
    }
    let in_stride = s.cin * s.h * s.w;
    let pointwise = g.is_pointwise(s.kh, s.kw);
    let mut dw = vec![T::zero(); s.cout * k];
    let mut db = vec![T::zero(); s.cout];
    let mut dx = if need_dx {
        Some(vec![T::zero(); x.numel()])
    } else {
        None
    };
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = vec![T::zero(); if need_dx && !pointwise { k * p } else { 0 }];
    for b in 0..s.n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let dyb = &dy.data()[b * s.cout * p..(b + 1) * s.cout * p];
        for (c, row) in dyb.chunks(p).enumerate() {
            db[c] += row.iter().copied().sum::<T>();
        }
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, &s, g, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(s.cout, p, k, dyb, false, src, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
            if pointwise {
                gemm(k, s.cout, p, w.data(), true, dyb, false, dxb, false);
            } else {
                gemm(k, s.cout, p, w.data(), true, dyb, false, &mut dcols, false);
                col2im(&dcols, &s, g, dxb);
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new([s.cout], db)?,
    })
}

/// `[M, P] × [P, Q]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, p] = a.dims2()?;
    let [p2, q] = b.dims2()?;
    if p != p2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: [{m},{p}] x [{p2},{q}]"
        )));
    }
    let mut out = vec![T::zero(); m * q];
    gemm(m, p, q, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, q], out)
}

/// Batched `[B, M, P] × [B, P, Q]`.
pub fn bmm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [nb, m, p] = a.dims3()?;
    let [nb2, p2, q] = b.dims3()?;
    if nb != nb2 || p != p2 {
        return Err(Error::dim(format!(
            "bmm extents differ: [{nb},{m},{p}] x [{nb2},{p2},{q}]"
        )));
    }
    let mut out = vec![T::zero(); nb * m * q];
    for i in 0..nb {
        gemm(
            m,
            p,
            q,
            &a.data()[i * m * p..],
            false,
            &b.data()[i * p * q..],
            false,
            &mut out[i * m * q..(i + 1) * m * q],
            false,
        );
    }
    Tensor::new([nb, m, q], out)
}

/// Gradients of `bmm` (rank-2 inputs are treated as a batch of one).
pub fn bmm_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (nb, m, p, q) = match (a.shape(), b.shape()) {
        ([m, p], [_, q]) => (1, *m, *p, *q),
        ([nb, m, p], [_, _, q]) => (*nb, *m, *p, *q),
        _ => unreachable!("bmm_backward on validated shapes"),
    };
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for i in 0..nb {
        let dyi = &dy.data()[i * m * q..(i + 1) * m * q];
        // dA = dY · Bᵀ, dB = Aᵀ · dY
        gemm(
            m,
            q,
            p,
            dyi,
            false,
            &b.data()[i * p * q..],
            true,
            &mut da[i * m * p..(i + 1) * m * p],
            false,
        );
        gemm(
            p,
            m,
            q,
            &a.data()[i * m * p..],
            true,
            dyi,
            false,
            &mut db[i * p * q..(i + 1) * p * q],
            false,
        );
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

/// Swap the last two axes of a rank-2 or rank-3 tensor.
pub fn transpose_last2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (nb, r, c) = match *x.shape() {
        [r, c] => (1, r, c),
        [nb, r, c] => (nb, r, c),
        _ => {
            return Err(Error::dim(format!(
                "transpose needs rank 2 or 3, got {:?}",
                x.shape()
            )))
        }
    };
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..nb {
        let src = &x.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out)
}

/// Softmax over contiguous rows of length `row`, max-subtracted.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, row: usize) -> Tensor<T> {
    let mut out = x.clone();
    if row == 0 {
        return out;
    }
    for r in out.data_mut().chunks_mut(row) {
        let max = r.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in r.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, row: usize) -> Tensor<T> {
    let mut dx = dy.clone();
    for (dxr, yr) in dx.data_mut().chunks_mut(row).zip(y.data().chunks(row)) {
        let dot: T = dxr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
        for (g, y) in dxr.iter_mut().zip(yr) {
            *g = *y * (*g - dot);
        }
    }
    dx
}

/// One bilinear tap: the two neighbours along an axis and the fractional
/// weight of the upper one.
#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

impl<T: Real> Tap<T> {
    /// Clamp `coord` to `[0, extent-1]` and split it.
    fn clamped(coord: T, extent: usize) -> (Self, bool) {
        let max = T::lit((extent - 1) as f64);
        let inside = coord >= T::zero() && coord <= max;
        let c = coord.max(T::zero()).min(max);
        let lo = c.floor().to_usize().unwrap_or(0).min(extent - 1);
        let hi = (lo + 1).min(extent - 1);
        let frac = c - T::lit(lo as f64);
        (Tap { lo, hi, frac }, inside)
    }
}

fn check_sample_shapes<T: Real>(
    x: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<([usize; 4], usize, usize)> {
    let dims = x.dims4()?;
    let [cn, two, ho, wo] = coords.dims4()?;
    if cn != dims[0] || two != 2 {
        return Err(Error::dim(format!(
            "bilinear_sample coords {:?} do not fit input {:?}",
            coords.shape(),
            x.shape()
        )));
    }
    Ok((dims, ho, wo))
}

/// Sample `x` at pixel-unit positions `coords[:, 0]` (x) and `coords[:, 1]`
/// (y), clamping positions to the image border.
pub fn bilinear_sample<T: Real>(x: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let ([n, c, h, w], ho, wo) = check_sample_shapes(x, coords)?;
    let po = ho * wo;
    let mut out = vec![T::zero(); n * c * po];
    for b in 0..n {
        let cx = &coords.data()[(b * 2) * po..(b * 2 + 1) * po];
        let cy = &coords.data()[(b * 2 + 1) * po..(b * 2 + 2) * po];
        for p in 0..po {
            let (tx, _) = Tap::clamped(cx[p], w);
            let (ty, _) = Tap::clamped(cy[p], h);
            let (w00, w01, w10, w11) = weights(tx.frac, ty.frac);
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                out[(b * c + ch) * po + p] = w00 * plane[ty.lo * w + tx.lo]
                    + w01 * plane[ty.lo * w + tx.hi]
                    + w10 * plane[ty.hi * w + tx.lo]
                    + w11 * plane[ty.hi * w + tx.hi];
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

fn weights<T: Real>(fx: T, fy: T) -> (T, T, T, T) {
    let (gx, gy) = (T::one() - fx, T::one() - fy);
    (gx * gy, fx * gy, gx * fy, fx * fy)
}

pub fn bilinear_sample_backward<T: Real>(
    x: &Tensor<T>,
    coords: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ([n, c, h, w], ho, wo) = check_sample_shapes(x, coords)?;
    let po = ho * wo;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dc = vec![T::zero(); coords.numel()];
    for b in 0..n {
        for p in 0..po {
            let (tx, in_x) = Tap::clamped(coords.data()[(b * 2) * po + p], w);
            let (ty, in_y) = Tap::clamped(coords.data()[(b * 2 + 1) * po + p], h);
            let (w00, w01, w10, w11) = weights(tx.frac, ty.frac);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let g = dy.data()[(b * c + ch) * po + p];
                let plane = &x.data()[base..base + h * w];
                let (v00, v01) = (plane[ty.lo * w + tx.lo], plane[ty.lo * w + tx.hi]);
                let (v10, v11) = (plane[ty.hi * w + tx.lo], plane[ty.hi * w + tx.hi]);
                gx += g * ((T::one() - ty.frac) * (v01 - v00) + ty.frac * (v11 - v10));
                gy += g * ((T::one() - tx.frac) * (v10 - v00) + tx.frac * (v11 - v01));
                let d = &mut dx[base..base + h * w];
                d[ty.lo * w + tx.lo] += w00 * g;
                d[ty.lo * w + tx.hi] += w01 * g;
                d[ty.hi * w + tx.lo] += w10 * g;
                d[ty.hi * w + tx.hi] += w11 * g;
            }
            if in_x {
                dc[(b * 2) * po + p] = gx;
            }
            if in_y {
                dc[(b * 2 + 1) * po + p] = gy;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(coords.shape().to_vec(), dc)?,
    ))
}

/// Pixel-unit sampling grid: channel 0 holds the column index, channel 1 the
/// row index. Shape `[n, 2, h, w]`.
pub fn identity_grid<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let plane = h * w;
    Tensor::from_fn([n, 2, h, w], |i| {
        let p = i % plane;
        let axis = (i / plane) % 2;
        T::lit(if axis == 0 { p % w } else { p / w } as f64)
    })
}

fn resize_taps<T: Real>(input: usize, output: usize, align_corners: bool) -> Vec<Tap<T>> {
    (0..output)
        .map(|i| {
            let src = if align_corners {
                if output > 1 {
                    i as f64 * (input - 1) as f64 / (output - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((i as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// Bilinear resize of the two trailing axes of `[N, C, H, W]`.
pub fn bilinear_resize<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = resize_taps::<T>(h, out_h, align_corners);
    let tx = resize_taps::<T>(w, out_w, align_corners);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (i, a) in ty.iter().enumerate() {
            let (r0, r1) = (
                &plane[a.lo * w..(a.lo + 1) * w],
                &plane[a.hi * w..(a.hi + 1) * w],
            );
            for (j, b) in tx.iter().enumerate() {
                let (w00, w01, w10, w11) = weights(b.frac, a.frac);
                dst[i * out_w + j] =
                    w00 * r0[b.lo] + w01 * r0[b.hi] + w10 * r1[b.lo] + w11 * r1[b.hi];
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Real>(
    in_shape: &[usize],
    dy: &Tensor<T>,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let [_, _, out_h, out_w] = dy.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    if (out_h, out_w) == (h, w) {
        return Ok(dy.clone());
    }
    let ty = resize_taps::<T>(h, out_h, align_corners);
    let tx = resize_taps::<T>(w, out_w, align_corners);
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (dst, g) in dx.chunks_mut(h * w).zip(dy.data().chunks(out_h * out_w)) {
        for (i, a) in ty.iter().enumerate() {
            for (j, b) in tx.iter().enumerate() {
                let v = g[i * out_w + j];
                let (w00, w01, w10, w11) = weights(b.frac, a.frac);
                dst[a.lo * w + b.lo] += w00 * v;
                dst[a.lo * w + b.hi] += w01 * v;
                dst[a.hi * w + b.lo] += w10 * v;
                dst[a.hi * w + b.hi] += w11 * v;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Nearest-neighbour resize of `[.., H, W]` integer maps (labels), using the
/// same corner-aligned coordinate mapping as [`bilinear_resize`].
pub fn nearest_resize_u8(x: &Tensor<u8>, out_h: usize, out_w: usize) -> Result<Tensor<u8>> {
    let nd = x.ndim();
    if nd < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::dim(
            "nearest_resize needs [.., H, W] and a positive target",
        ));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let pick = |i: usize, inp: usize, out: usize| -> usize {
        if out > 1 {
            ((i as f64 * (inp - 1) as f64 / (out - 1) as f64).round() as usize).min(inp - 1)
        } else {
            0
        }
    };
    let rows: Vec<usize> = (0..out_h).map(|i| pick(i, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|j| pick(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(x.numel() / (h * w) * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &r in &rows {
            out.extend(cols.iter().map(|&c| plane[r * w + c]));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = out_h;
    shape[nd - 1] = out_w;
    Tensor::new(shape, out)
}

/// Saved state of a training-mode batch norm.
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

/// Per-channel batch statistics over `(N, H, W)`.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(Error::Contract(format!(
            "batch_norm in train mode needs N*H*W >= 2, got {m}"
        )));
    }
    let hw = h * w;
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut var_unbiased = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = (0..n).map(|b| (b * c + ch) * hw);
        let mut sum = 0.0f64;
        for base in planes.clone() {
            sum += x.data()[base..base + hw]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for base in planes.clone() {
            sq += x.data()[base..base + hw]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / m as f64;
        let inv = T::lit(1.0 / (var + eps).sqrt());
        let (g, bt, mu) = (gamma.data()[ch], beta.data()[ch], T::lit(mean));
        for base in planes {
            for i in base..base + hw {
                let xh = (x.data()[i] - mu) * inv;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
        inv_std.push(inv);
        means.push(mu);
        var_unbiased.push(T::lit(sq / (m - 1) as f64));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            mean: means,
            var_unbiased,
        },
    ))
}

fn check_affine<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "batch_norm affine parameters {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Gradients w.r.t. `(x, gamma, beta)` of training-mode batch norm.
pub fn batch_norm_train_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dy.dims4().unwrap();
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let planes = (0..n).map(|b| (b * c + ch) * hw);
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for base in planes.clone() {
            for i in base..base + hw {
                sum_dy += dy.data()[i];
                sum_dy_xhat += dy.data()[i] * cache.xhat.data()[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch] / m;
        for base in planes {
            for i in base..base + hw {
                dx[i] = k * (m * dy.data()[i] - sum_dy - cache.xhat.data()[i] * sum_dy_xhat);
            }
        }
    }
    (
        Tensor::new(dy.shape().to_vec(), dx).unwrap(),
        Tensor::new([c], dgamma).unwrap(),
        Tensor::new([c], dbeta).unwrap(),
    )
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, h, w] = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    let inv: Vec<T> = running_var
        .data()
        .iter()
        .map(|v| T::lit(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (idx, (yp, xp)) in y
        .data_mut()
        .chunks_mut(hw)
        .zip(xhat.data_mut().chunks_mut(hw))
        .enumerate()
    {
        let ch = idx % c;
        let (mu, s, g, b) = (
            running_mean.data()[ch],
            inv[ch],
            gamma.data()[ch],
            beta.data()[ch],
        );
        for (yv, xv) in yp.iter_mut().zip(xp.iter_mut()) {
            *xv = (*xv - mu) * s;
            *yv = g * *xv + b;
        }
    }
    Ok((y, xhat))
}

/// Saved state of a cross-entropy evaluation.
pub struct CrossEntropyCache<T> {
    pub probs: Tensor<T>,
    pub valid: usize,
}

/// Mean negative log-likelihood over pixels whose label is not `ignore`.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &Tensor<u8>,
    ignore: u8,
) -> Result<(T, CrossEntropyCache<T>)> {
    let [n, k, h, w] = logits.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(Error::dim(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    let hw = h * w;
    let mut probs = vec![T::zero(); logits.numel()];
    let mut total = 0.0f64;
    let mut valid = 0usize;
    for b in 0..n {
        for p in 0..hw {
            let label = labels.data()[b * hw + p];
            if label != ignore && label as usize >= k {
                return Err(Error::Data(format!(
                    "label {label} outside [0, {k}) at pixel {p} of sample {b}"
                )));
            }
            let at = |c: usize| (b * k + c) * hw + p;
            let max = (0..k)
                .map(|c| logits.data()[at(c)])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..k {
                let e = (logits.data()[at(c)] - max).exp();
                probs[at(c)] = e;
                sum += e;
            }
            for c in 0..k {
                probs[at(c)] = probs[at(c)] / sum;
            }
            if label != ignore {
                let l = label as usize;
                total += (sum.ln() - (logits.data()[at(l)] - max)).as_f64();
                valid += 1;
            }
        }
    }
    let loss = if valid == 0 {
        0.0
    } else {
        total / valid as f64
    };
    Ok((
        T::lit(loss),
        CrossEntropyCache {
            probs: Tensor::new(logits.shape().to_vec(), probs)?,
            valid,
        },
    ))
}

pub fn cross_entropy_backward<T: Real>(
    cache: &CrossEntropyCache<T>,
    labels: &Tensor<u8>,
    ignore: u8,
    upstream: T,
) -> Tensor<T> {
    let [n, k, h, w] = cache.probs.dims4().unwrap();
    let hw = h * w;
    let mut d = vec![T::zero(); cache.probs.numel()];
    if cache.valid == 0 {
        return Tensor::new(cache.probs.shape().to_vec(), d).unwrap();
    }
    let scale = upstream / T::lit(cache.valid as f64);
    for b in 0..n {
        for p in 0..hw {
            let label = labels.data()[b * hw + p];
            if label == ignore {
                continue;
            }
            for c in 0..k {
                let i = (b * k + c) * hw + p;
                let target = if c == label as usize {
                    T::one()
                } else {
                    T::zero()
                };
                d[i] = (cache.probs.data()[i] - target) * scale;
            }
        }
    }
    Tensor::new(cache.probs.shape().to_vec(), d).unwrap()
}

/// Concatenate along axis 1; all other extents must agree.
pub fn concat_axis1<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    if first.ndim() < 2 {
        return Err(Error::dim("concat needs rank >= 2"));
    }
    let outer = first.shape()[0];
    let rest = &first.shape()[2..];
    let inner: usize = rest.iter().product();
    let mut total = 0;
    for p in parts {
        if p.ndim() != first.ndim() || p.shape()[0] != outer || &p.shape()[2..] != rest {
            return Err(Error::dim(format!(
                "concat: {:?} does not match {:?} outside axis 1",
                p.shape(),
                first.shape()
            )));
        }
        total += p.shape()[1];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for b in 0..outer {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * inner..(b + 1) * c * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Tensor::new(shape, out)
}

/// Entries `start..start+len` of axis 1.
pub fn narrow_axis1<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if x.ndim() < 2 || start + len > x.shape()[1] {
        return Err(Error::dim(format!(
            "narrow {start}+{len} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for b in 0..outer {
        out.extend_from_slice(&x.data()[(b * c + start) * inner..(b * c + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] = len;
    Tensor::new(shape, out)
}

/// Scatter a gradient of a narrowed slice back into the full axis-1 extent.
pub fn narrow_axis1_backward<T: Real>(full: &[usize], start: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (outer, c) = (full[0], full[1]);
    let len = dy.shape()[1];
    let inner: usize = full[2..].iter().product();
    let mut d = vec![T::zero(); full.iter().product()];
    for b in 0..outer {
        d[(b * c + start) * inner..(b * c + start + len) * inner]
            .copy_from_slice(&dy.data()[b * len * inner..(b + 1) * len * inner]);
    }
    Tensor::new(full.to_vec(), d).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[5., 6.])).unwrap();
        assert_eq!(r.data(), &[17.0]);
        let z = matmul(&Tensor::<f64>::zeros([2, 3]), &t(&[3, 4], &[1.5; 12])).unwrap();
        assert_eq!(z, Tensor::zeros([2, 4]));
        assert!(matches!(
            matmul(&Tensor::<f64>::zeros([2, 3]), &Tensor::zeros([2, 3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |i| i as f64);
        let id = conv2d(
            &x,
            &Tensor::ones([1, 1, 1, 1]),
            Some(&Tensor::zeros([1])),
            ConvGeom::default(),
        )
        .unwrap();
        assert_eq!(id, x);
        let ones = Tensor::<f64>::ones([1, 1, 3, 3]);
        let r = conv2d(
            &ones,
            &Tensor::ones([1, 1, 3, 3]),
            None,
            ConvGeom::default(),
        )
        .unwrap();
        assert_eq!(r.shape(), &[1, 1, 1, 1]);
        assert_eq!(r.data(), &[9.0]);
        let x5 = Tensor::<f64>::ones([1, 1, 5, 5]);
        let r = conv2d(
            &x5,
            &Tensor::ones([1, 1, 3, 3]),
            None,
            ConvGeom::new(1, 0, 2),
        )
        .unwrap();
        assert_eq!(r.shape(), &[1, 1, 1, 1]);
        let err = conv2d(
            &Tensor::<f64>::ones([1, 1, 4, 4]),
            &Tensor::ones([1, 1, 3, 3]),
            None,
            ConvGeom::new(1, 0, 2),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_strided_output_extent() {
        let g = ConvGeom::new(2, 1, 1);
        assert_eq!(g.out_extent(64, 3).unwrap(), 32);
        assert_eq!(ConvGeom::same(3, 4).out_extent(4, 3).unwrap(), 4);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0., 0.]), 2);
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&t(&[1, 2], &[2f64.ln(), 0.]), 2);
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            softmax_rows(&t(&[3, 1], &[4., -2., 7.]), 1).data(),
            &[1., 1., 1.]
        );
        let sat = softmax_rows(&t(&[1, 4], &[1000., 0., 0., 0.]), 4);
        assert!((sat.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_sample_examples() {
        let x = t(&[1, 1, 1, 4], &[0., 1., 2., 3.]);
        let at = |cx: f64| {
            let coords = t(&[1, 2, 1, 1], &[cx, 0.0]);
            bilinear_sample(&x, &coords).unwrap().data()[0]
        };
        assert_eq!(at(1.5), 1.5);
        assert_eq!(at(-5.0), 0.0);
        assert_eq!(at(10.0), 3.0);
        let row = t(&[1, 1, 1, 3], &[7., 8., 9.]);
        let coords = t(&[1, 2, 1, 1], &[-5.0, 0.0]);
        assert_eq!(bilinear_sample(&row, &coords).unwrap().data(), &[7.0]);
    }

    #[test]
    fn identity_grid_reproduces_input() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| (i as f64 * 0.37).sin());
        let y = bilinear_sample(&x, &identity_grid(2, 4, 5)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn resize_examples() {
        let r = bilinear_resize(&t(&[1, 1, 1, 2], &[0., 2.]), 1, 3, true).unwrap();
        assert_eq!(r.data(), &[0., 1., 2.]);
        let c = Tensor::<f64>::full([1, 2, 3, 3], 4.25);
        let up = bilinear_resize(&c, 7, 5, true).unwrap();
        assert!(up.data().iter().all(|&v| v == 4.25));
        let up = bilinear_resize(&c, 2, 6, false).unwrap();
        assert!(up.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn nearest_resize_keeps_value_set() {
        let l = Tensor::<u8>::new([1, 2, 2], vec![0, 1, 2, 255]).unwrap();
        let up = nearest_resize_u8(&l, 5, 7).unwrap();
        assert!(up.data().iter().all(|v| [0, 1, 2, 255].contains(v)));
        assert_eq!(nearest_resize_u8(&l, 2, 2).unwrap(), l);
    }

    #[test]
    fn batch_norm_examples() {
        // Already zero-mean unit-variance per channel.
        let x = t(&[1, 1, 2, 2], &[1., -1., 1., -1.]);
        let (y, _) = batch_norm_train(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), 1e-12).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
        let (y, _) = batch_norm_eval(
            &x,
            &t(&[1], &[1.]),
            &t(&[1], &[0.]),
            &t(&[1], &[0.]),
            &t(&[1], &[1.]),
            1e-5,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
        let single = t(&[1, 1, 1, 1], &[3.0]);
        assert!(matches!(
            batch_norm_train(&single, &t(&[1], &[1.]), &t(&[1], &[0.]), 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batch_norm_train_statistics() {
        let x = Tensor::<f64>::from_fn([3, 2, 4, 4], |i| ((i * 7919) % 101) as f64 * 0.1 - 3.0);
        let (y, _) = batch_norm_train(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 1e-5).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::zeros([1, 5, 2, 2]);
        let labels = Tensor::<u8>::new([1, 2, 2], vec![0, 1, 4, 2]).unwrap();
        let (loss, _) = cross_entropy(&logits, &labels, 255).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::<f64>::zeros([1, 2, 1, 1]);
        sharp.data_mut()[1] = 20.0;
        let lab = Tensor::<u8>::new([1, 1, 1], vec![1]).unwrap();
        assert!(cross_entropy(&sharp, &lab, 255).unwrap().0 < 1e-3);

        let ignored = Tensor::<u8>::full([1, 2, 2], 255);
        let (loss, cache) = cross_entropy(&logits, &ignored, 255).unwrap();
        assert_eq!(loss, 0.0);
        let g = cross_entropy_backward(&cache, &ignored, 255, 1.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::<u8>::new([1, 2, 2], vec![0, 9, 0, 0]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &bad, 255),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn concat_and_narrow() {
        let a = Tensor::<f64>::from_fn([2, 1, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_axis1(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        assert_eq!(narrow_axis1(&c, 0, 1).unwrap(), a);
        assert_eq!(narrow_axis1(&c, 1, 3).unwrap(), b);
        let bad = Tensor::<f64>::zeros([2, 1, 3, 2]);
        assert!(concat_axis1(&[&a, &bad]).is_err());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let tt = transpose_last2(&transpose_last2(&x).unwrap()).unwrap();
        assert_eq!(tt, x);
        assert_eq!(transpose_last2(&x).unwrap().shape(), &[2, 4, 3]);
    }
}
