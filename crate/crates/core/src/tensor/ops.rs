//! Pure forward kernels. None of these record anything; see [`super::Graph`]
//! for the differentiable versions.

use super::Tensor;
use crate::error::{Error, Result};

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[lead + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary op under numpy-style broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shapes(op, a.shape(), b.shape())?;
    let n: usize = out.iter().product();
    // Trailing-suffix broadcast of b (row vectors, per-channel scales).
    if out == a.shape() && a.shape().ends_with(b.shape()) {
        let m = b.numel();
        let data = (0..n).map(|i| f(a.data()[i], b.data()[i % m])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out, data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("sub", a, b, |x, y| x - y)
}

/// Elementwise (Hadamard) product with broadcasting.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("elementwise_mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

/// Sums `grad` (shaped like a broadcast result) down to `shape`.
pub fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let target: usize = shape.iter().product();
    let mut out = vec![0.0; target];
    if grad.shape().ends_with(shape) {
        for (i, g) in grad.data().iter().enumerate() {
            out[i % target] += g;
        }
    } else {
        let s = broadcast_strides(shape, grad.shape());
        let zeros = vec![0; grad.rank()];
        let gd = grad.data();
        for_each_broadcast(grad.shape(), &s, &zeros, |i, o, _| out[o] += gd[i]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// `out[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let orow = &mut out[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,p] += a[m,k] * b[p,k]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            out[i * p + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Matrix product of `[M,N]` and `[N,P]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        _ => Err(Error::shape("matmul", a.shape(), b.shape())),
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index(format!(
            "{op}: axis {axis} for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split("softmax_axis", t.shape(), axis)?;
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[at(j)] /= denom;
            }
        }
    }
    Ok(Tensor::from_parts(t.shape().to_vec(), out))
}

/// Sum over `axis`; the axis is removed from the result shape.
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split("sum_axis", t.shape(), axis)?;
    let x = t.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, out))
}

/// Image geometry of an NHWC tensor; rank-3 inputs are a batch of one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Nhwc {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Nhwc {
    pub fn of(op: &'static str, t: &Tensor) -> Result<Nhwc> {
        match *t.shape() {
            [h, w, c] => Ok(Nhwc { n: 1, h, w, c }),
            [n, h, w, c] => Ok(Nhwc { n, h, w, c }),
            _ => Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            }),
        }
    }
}

pub(crate) fn check_dw_kernel(x: &Tensor, kernel: &Tensor) -> Result<(Nhwc, usize, usize)> {
    let g = Nhwc::of("depthwise_conv2d", x)?;
    let [kh, kw, kc] = match *kernel.shape() {
        [a, b, c] => [a, b, c],
        _ => return Err(Error::shape("depthwise_conv2d", x.shape(), kernel.shape())),
    };
    if kc != g.c {
        return Err(Error::shape("depthwise_conv2d", x.shape(), kernel.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise_conv2d needs odd kernel extents, got {kh}x{kw}"
        )));
    }
    Ok((g, kh, kw))
}

/// Visits every (output offset, input offset, kernel offset) triple of a
/// zero-padded same-size depthwise convolution, one channel run at a time.
#[inline]
pub(crate) fn dw_conv_taps(g: Nhwc, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (ph, pw) = (kh / 2, kw / 2);
    for n in 0..g.n {
        for y in 0..g.h {
            for x in 0..g.w {
                let o = ((n * g.h + y) * g.w + x) * g.c;
                for ky in 0..kh {
                    let Some(yy) = (y + ky).checked_sub(ph).filter(|&v| v < g.h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some(xx) = (x + kx).checked_sub(pw).filter(|&v| v < g.w) else {
                            continue;
                        };
                        let i = ((n * g.h + yy) * g.w + xx) * g.c;
                        f(o, i, (ky * kw + kx) * g.c);
                    }
                }
            }
        }
    }
}

/// Per-channel 2-D convolution with zero same-padding.
///
/// `x` is `[H,W,C]` or `[N,H,W,C]`; `kernel` is `[kh,kw,C]` with odd extents.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (g, kh, kw) = check_dw_kernel(x, kernel)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; xd.len()];
    dw_conv_taps(g, kh, kw, |o, i, k| {
        for c in 0..g.c {
            out[o + c] += xd[i + c] * kd[k + c];
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) struct LayerNormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_stats(x: &Tensor, eps: f64) -> LayerNormStats {
    let c = *x.shape().last().expect("layer_norm on scalar");
    let rows = x.numel() / c;
    let mut normalized = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in normalized[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    LayerNormStats {
        normalized,
        inv_std,
    }
}

pub(crate) fn check_layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<usize> {
    let c = match x.shape().last() {
        Some(&c) => c,
        None => return Err(Error::shape("layer_norm", x.shape(), gamma.shape())),
    };
    if gamma.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    Ok(c)
}

/// Normalizes each position over the trailing channel axis, then applies
/// the per-channel affine `gamma * x_hat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = check_layer_norm(x, gamma, beta, eps)?;
    let stats = layer_norm_stats(x, eps);
    let mut out = stats.normalized;
    for (i, v) in out.iter_mut().enumerate() {
        *v = *v * gamma.data()[i % c] + beta.data()[i % c];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Rearranges non-overlapping `s x s` patches into channels:
/// `[N,H,W,C] -> [N,H/s,W/s,s*s*C]` with channel order (ky, kx, c).
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let g = Nhwc::of("space_to_depth", x)?;
    if s == 0 || g.h % s != 0 || g.w % s != 0 {
        return Err(Error::Config(format!(
            "spatial extents {}x{} not divisible by patch {s}",
            g.h, g.w
        )));
    }
    let mut out = vec![0.0; x.numel()];
    s2d_offsets(g, s, |o, i| {
        out[o..o + g.c].copy_from_slice(&x.data()[i..i + g.c])
    });
    Ok(Tensor::from_parts(
        vec![g.n, g.h / s, g.w / s, s * s * g.c],
        out,
    ))
}

/// Calls `f(out_offset, in_offset)` for each contiguous channel run.
pub(crate) fn s2d_offsets(g: Nhwc, s: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (g.h / s, g.w / s);
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..s {
                    for kx in 0..s {
                        let o = (((n * ho + oy) * wo + ox) * s * s + ky * s + kx) * g.c;
                        let i = ((n * g.h + oy * s + ky) * g.w + ox * s + kx) * g.c;
                        f(o, i);
                    }
                }
            }
        }
    }
}
