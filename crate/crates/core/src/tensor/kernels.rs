//! Forward and adjoint kernels on plain tensors. The tape in `tape.rs` wires
//! these together; they are also usable directly for inference and tests.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &bd[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// `y += a * x` over equal-length slices.
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Output positions `o` for which `o * stride + offset` lands inside `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_incl = (len as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_len as isize);
    let lo = lo.clamp(0, out_len as isize);
    (lo as usize, hi.max(lo) as usize)
}

fn check_conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    expect_rank("conv1d", x, 2)?;
    expect_rank("conv1d", w, 3)?;
    let (cin, l) = (x.shape()[0], x.shape()[1]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv1d kernel width {k} must be odd")));
    }
    if wcin != cin {
        return Err(Error::shapes("conv1d", x.shape(), w.shape()));
    }
    if b.shape() != [cout] {
        return Err(Error::shapes("conv1d bias", w.shape(), b.shape()));
    }
    Ok((cin, l, cout, k))
}

/// Same-padded 1-D cross-correlation: `x: [c_in, l]`, `w: [c_out, c_in, k]`,
/// `b: [c_out]` -> `[c_out, l]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, l, cout, k) = check_conv1d(x, w, b)?;
    let pad = (k / 2) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); cout * l];
    for co in 0..cout {
        let orow = &mut out[co * l..(co + 1) * l];
        orow.iter_mut().for_each(|o| *o = b.data()[co]);
        for ci in 0..cin {
            let xrow = &xd[ci * l..(ci + 1) * l];
            for kk in 0..k {
                let wv = wd[(co * cin + ci) * k + kk];
                let off = kk as isize - pad;
                let (lo, hi) = valid_range(off, 1, l, l);
                for o in lo..hi {
                    orow[o] = orow[o] + wv * xrow[(o as isize + off) as usize];
                }
            }
        }
    }
    Tensor::new(&[cout, l], out)
}

/// Adjoint of [`conv1d`]: returns `(grad_x, grad_w, grad_b)`.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (cin, l) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut gx = vec![T::zero(); cin * l];
    let mut gw = vec![T::zero(); cout * cin * k];
    let mut gb = vec![T::zero(); cout];
    for co in 0..cout {
        let grow = &gd[co * l..(co + 1) * l];
        gb[co] = grow.iter().copied().sum();
        for ci in 0..cin {
            let xrow = &xd[ci * l..(ci + 1) * l];
            let gxrow = &mut gx[ci * l..(ci + 1) * l];
            for kk in 0..k {
                let widx = (co * cin + ci) * k + kk;
                let wv = wd[widx];
                let off = kk as isize - pad;
                let (lo, hi) = valid_range(off, 1, l, l);
                let mut acc = T::zero();
                for o in lo..hi {
                    let i = (o as isize + off) as usize;
                    acc = acc + grow[o] * xrow[i];
                    gxrow[i] = gxrow[i] + wv * grow[o];
                }
                gw[widx] = acc;
            }
        }
    }
    Ok((
        Tensor::new(&[cin, l], gx)?,
        Tensor::new(&[cout, cin, k], gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

struct Conv2dDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn check_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Conv2dDims> {
    expect_rank("conv2d", x, 3)?;
    expect_rank("conv2d", w, 4)?;
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if k != k2 {
        return Err(Error::Config(format!("conv2d kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel width {k} must be odd")));
    }
    if stride == 0 || h % stride != 0 || wd % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d extents {h}x{wd} not divisible by stride {stride}"
        )));
    }
    if wcin != cin {
        return Err(Error::shapes("conv2d", x.shape(), w.shape()));
    }
    if b.shape() != [cout] {
        return Err(Error::shapes("conv2d bias", w.shape(), b.shape()));
    }
    Ok(Conv2dDims {
        cin,
        h,
        w: wd,
        cout,
        k,
        oh: h / stride,
        ow: wd / stride,
    })
}

/// `out[m, n] += a[m, k] * b[k, n]` on row-major slices.
fn gemm_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            axpy(row, av, &b[t * n..(t + 1) * n]);
        }
    }
}

fn transpose_slice<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Unfold `x` into `[c_in * k * k, oh * ow]` patch columns (zero padded).
fn im2col<T: Scalar>(x: &[T], d: &Conv2dDims, stride: usize) -> Vec<T> {
    let pad = (d.k / 2) as isize;
    let l = d.oh * d.ow;
    let mut cols = vec![T::zero(); d.cin * d.k * d.k * l];
    for ci in 0..d.cin {
        let xplane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            let offy = ky as isize - pad;
            let (ylo, yhi) = valid_range(offy, stride, d.h, d.oh);
            for kx in 0..d.k {
                let offx = kx as isize - pad;
                let (xlo, xhi) = valid_range(offx, stride, d.w, d.ow);
                let r = (ci * d.k + ky) * d.k + kx;
                let crow = &mut cols[r * l..(r + 1) * l];
                for oy in ylo..yhi {
                    let iy = ((oy * stride) as isize + offy) as usize;
                    let xrow = &xplane[iy * d.w..(iy + 1) * d.w];
                    for ox in xlo..xhi {
                        crow[oy * d.ow + ox] = xrow[((ox * stride) as isize + offx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto the input.
fn col2im<T: Scalar>(cols: &[T], d: &Conv2dDims, stride: usize) -> Vec<T> {
    let pad = (d.k / 2) as isize;
    let l = d.oh * d.ow;
    let mut x = vec![T::zero(); d.cin * d.h * d.w];
    for ci in 0..d.cin {
        let xplane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            let offy = ky as isize - pad;
            let (ylo, yhi) = valid_range(offy, stride, d.h, d.oh);
            for kx in 0..d.k {
                let offx = kx as isize - pad;
                let (xlo, xhi) = valid_range(offx, stride, d.w, d.ow);
                let r = (ci * d.k + ky) * d.k + kx;
                let crow = &cols[r * l..(r + 1) * l];
                for oy in ylo..yhi {
                    let iy = ((oy * stride) as isize + offy) as usize;
                    let xrow = &mut xplane[iy * d.w..(iy + 1) * d.w];
                    for ox in xlo..xhi {
                        let ix = ((ox * stride) as isize + offx) as usize;
                        xrow[ix] = xrow[ix] + crow[oy * d.ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded 2-D cross-correlation with square odd kernel and optional
/// stride: `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]` -> `[c_out, h/s, w/s]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = check_conv2d(x, w, b, stride)?;
    let l = d.oh * d.ow;
    let rows = d.cin * d.k * d.k;
    let cols = im2col(x.data(), &d, stride);
    let mut out = vec![T::zero(); d.cout * l];
    for (co, plane) in out.chunks_mut(l).enumerate() {
        plane.fill(b.data()[co]);
    }
    gemm_acc(&mut out, w.data(), &cols, d.cout, rows, l);
    Tensor::new(&[d.cout, d.oh, d.ow], out)
}

/// Adjoint of [`conv2d`]: returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let b = Tensor::zeros(&[w.shape()[0]]);
    let d = check_conv2d(x, w, &b, stride)?;
    if gout.shape() != [d.cout, d.oh, d.ow] {
        return Err(Error::shapes("conv2d backward", gout.shape(), &[d.cout, d.oh, d.ow]));
    }
    let l = d.oh * d.ow;
    let rows = d.cin * d.k * d.k;
    let gd = gout.data();
    let gb: Vec<T> = gd.chunks(l).map(|p| p.iter().copied().sum()).collect();

    let cols_t = transpose_slice(&im2col(x.data(), &d, stride), rows, l);
    let mut gw = vec![T::zero(); d.cout * rows];
    gemm_acc(&mut gw, gd, &cols_t, d.cout, l, rows);

    let w_t = transpose_slice(w.data(), d.cout, rows);
    let mut gcols = vec![T::zero(); rows * l];
    gemm_acc(&mut gcols, &w_t, gd, rows, d.cout, l);
    let gx = col2im(&gcols, &d, stride);
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[d.cout], gb)?,
    ))
}

/// Per-channel mean over every trailing axis: `[c, ...] -> [c, 1]`.
pub fn avg_pool_global<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::dim(
            "avg_pool_global",
            format!("needs a channel axis and a spatial axis, got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[0];
    let n = x.len() / c;
    let inv = T::one() / T::of(n as f64);
    let out = x
        .data()
        .chunks(n)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[c, 1], out)
}

/// Shape produced by stretch-extent-1 broadcasting of two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shapes("broadcast", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shapes("broadcast", a, b)),
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` read through `out_shape`: stretched axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out_shape))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += a_strides[ax];
            ib += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= a_strides[ax] * out_shape[ax];
            ib -= b_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary op with stretch-extent-1 broadcasting.
pub fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
    Tensor::new(&out_shape, out)
}

/// Sum `grad` over the axes along which `shape` was stretched.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let s = broadcast_strides(shape, grad.shape());
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = grad.data();
    for_each_broadcast(grad.shape(), &s, &zeros, |o, i, _| out[i] = out[i] + gd[o]);
    Tensor::new(shape, out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary(a, b, |x, y| x * y)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Concatenate along axis 0; trailing extents must agree.
pub fn concat0<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(Error::shapes("concat", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::new(&shape, data)
}

/// Sum along one axis, keeping it with extent 1.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::dim("sum_axis", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    reduce_to_shape(x, &shape)
}

/// Scale each row of `x: [n, d]` to unit Euclidean norm; zero rows stay zero.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    expect_rank("normalize_rows", x, 2)?;
    let d = x.shape()[1];
    let mut norms = Vec::with_capacity(x.shape()[0]);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(n);
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / n);
        }
    }
    Ok((Tensor::new(x.shape(), out)?, norms))
}

/// Adjoint of [`normalize_rows`] given its output `y` and the row norms.
pub fn normalize_rows_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], gout: &Tensor<T>) -> Tensor<T> {
    let d = y.shape()[1];
    let mut gx = vec![T::zero(); y.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n == T::zero() {
            continue;
        }
        let yr = &y.data()[r * d..(r + 1) * d];
        let gr = &gout.data()[r * d..(r + 1) * d];
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            gx[r * d + j] = (gr[j] - yr[j] * dot) / n;
        }
    }
    Tensor::new(y.shape(), gx).expect("shape preserved")
}

/// Standardize each row of `x: [c, l]` to zero mean and unit variance
/// (population variance, `eps` added before the square root).
pub fn standardize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    expect_rank("standardize_rows", x, 2)?;
    let l = x.shape()[1];
    let inv_l = T::one() / T::of(l as f64);
    let mut out = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(x.shape()[0]);
    for row in out.chunks_mut(l) {
        let mean = row.iter().copied().sum::<T>() * inv_l;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_l;
        let s = T::one() / (var + eps).sqrt();
        inv_std.push(s);
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
    }
    Ok((Tensor::new(x.shape(), out)?, inv_std))
}

/// Adjoint of [`standardize_rows`] given its output and per-row inverse std.
pub fn standardize_rows_backward<T: Scalar>(y: &Tensor<T>, inv_std: &[T], gout: &Tensor<T>) -> Tensor<T> {
    let l = y.shape()[1];
    let inv_l = T::one() / T::of(l as f64);
    let mut gx = vec![T::zero(); y.len()];
    for (r, &s) in inv_std.iter().enumerate() {
        let yr = &y.data()[r * l..(r + 1) * l];
        let gr = &gout.data()[r * l..(r + 1) * l];
        let mean_g = gr.iter().copied().sum::<T>() * inv_l;
        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_l;
        for j in 0..l {
            gx[r * l + j] = s * (gr[j] - mean_g - yr[j] * mean_gy);
        }
    }
    Tensor::new(y.shape(), gx).expect("shape preserved")
}

/// Source taps `(i0, i1, frac)` for half-pixel-centre bilinear resampling.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `x: [c, h, w]` to `[c, out_h, out_w]` (half-pixel
/// centres, edge clamped).
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    expect_rank("upsample_bilinear", x, 3)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("upsample_bilinear", "zero output extent"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward<T: Scalar>(in_shape: &[usize], gout: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (gout.shape()[1], gout.shape()[2]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = gout.data()[(ch * out_h + oy) * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
            }
        }
    }
    Tensor::new(in_shape, gx)
}
