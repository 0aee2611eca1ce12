//! Reference attention mechanisms: softmax self-attention, separable
//! self-attention and the sequential linear state-space scan.

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// `softmax(Q K^T) V` with the softmax taken over keys.
///
/// Scores are produced one query row at a time, so memory stays `O(L + L*D)`
/// while work is `Θ(L² D)`.
pub fn softmax_self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let [l, d] = q.dims2("softmax_self_attention")?;
    if k.shape() != q.shape() {
        return Err(Error::shape("softmax_self_attention", q.shape(), k.shape()));
    }
    let dv = match *v.shape() {
        [lv, dv] if lv == l => dv,
        _ => return Err(Error::shape("softmax_self_attention", q.shape(), v.shape())),
    };
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; l * dv];
    let mut scores = vec![0.0; l];
    for i in 0..l {
        let qi = &qd[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = ops::dot(qi, &kd[j * d..(j + 1) * d]);
            max = max.max(*s);
        }
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let orow = &mut out[i * dv..(i + 1) * dv];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / denom;
            for (o, &x) in orow.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                *o += w * x;
            }
        }
    }
    Ok(Tensor::from_parts(vec![l, dv], out))
}

/// Separable self-attention: context vector `c = Σ_i (softmax(Q) ⊙ K)_i`
/// (softmax over tokens), then `Y = c ⊙ V` broadcast over tokens.
pub fn separable_self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let [l, d] = k.dims2("separable_self_attention")?;
    if q.shape() != [l, 1] {
        return Err(Error::shape("separable_self_attention", q.shape(), &[l, 1]));
    }
    if v.shape() != k.shape() {
        return Err(Error::shape(
            "separable_self_attention",
            k.shape(),
            v.shape(),
        ));
    }
    let scores = ops::softmax_axis(q, 0)?;
    let mut context = vec![0.0; d];
    for t in 0..l {
        let s = scores.data()[t];
        for (c, &kv) in context.iter_mut().zip(&k.data()[t * d..(t + 1) * d]) {
            *c += s * kv;
        }
    }
    let out = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| context[i % d] * x)
        .collect();
    Ok(Tensor::from_parts(vec![l, d], out))
}

/// Parameters of the linear recurrence `h_i = A h_{i-1} + B x_i`, `y_i = C^T h_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    a: Tensor,
    b: Tensor,
    c: Tensor,
}

impl SsmParams {
    /// `a` is `[D,D]`, `b` and `c` are `[D,1]`.
    pub fn new(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let [d, d2] = a.dims2("ssm_params")?;
        if d != d2 {
            return Err(Error::shape("ssm_params", a.shape(), &[d, d]));
        }
        for v in [&b, &c] {
            if v.shape() != [d, 1] {
                return Err(Error::shape("ssm_params", a.shape(), v.shape()));
            }
        }
        Ok(SsmParams { a, b, c })
    }

    pub fn hidden(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Sequential scan of a one-dimensional sequence through the latent state,
/// starting from `h_0 = 0`.
pub fn ssm_scan_reference(p: &SsmParams, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::shape("ssm_scan_reference", x.shape(), &[]));
    }
    let d = p.hidden();
    let (a, b, c) = (p.a.data(), p.b.data(), p.c.data());
    let mut h = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut y = Vec::with_capacity(x.numel());
    for &xi in x.data() {
        for (r, nr) in next.iter_mut().enumerate() {
            *nr = a[r * d..(r + 1) * d]
                .iter()
                .zip(&h)
                .map(|(aa, hh)| aa * hh)
                .sum::<f64>()
                + b[r] * xi;
        }
        std::mem::swap(&mut h, &mut next);
        y.push(c.iter().zip(&h).map(|(cc, hh)| cc * hh).sum());
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}
