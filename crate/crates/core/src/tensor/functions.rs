//! Differentiable wrappers around the kernels in [`super::ops`].

use super::graph::{Function, Graph, Var};
use super::ops::{self, Nhwc};
use super::Tensor;
use crate::error::Result;

#[derive(Debug)]
struct MatMul;

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = ops::matmul_dims(a, b).expect("shapes checked in forward");
        let da = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            ops::gemm_nt(grad.data(), b.data(), &mut d, m, n, k);
            Tensor::from_parts(vec![m, k], d)
        });
        let db = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            ops::gemm_tn(a.data(), grad.data(), &mut d, m, k, n);
            Tensor::from_parts(vec![k, n], d)
        });
        vec![da, db]
    }
}

#[derive(Debug)]
struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        inputs
            .iter()
            .zip(needs)
            .map(|(x, &need)| need.then(|| ops::sum_to_shape(grad, x.shape())))
            .collect()
    }
}

#[derive(Debug)]
struct Mul;

impl Function for Mul {
    fn name(&self) -> &'static str {
        "elementwise_mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = needs[0].then(|| {
            let full = ops::elementwise_mul(grad, b).expect("broadcast checked in forward");
            ops::sum_to_shape(&full, a.shape())
        });
        let db = needs[1].then(|| {
            let full = ops::elementwise_mul(grad, a).expect("broadcast checked in forward");
            ops::sum_to_shape(&full, b.shape())
        });
        vec![da, db]
    }
}

#[derive(Debug)]
struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(ops::scale(grad, self.0))]
    }
}

#[derive(Debug)]
struct Softmax {
    axis: usize,
}

impl Function for Softmax {
    fn name(&self) -> &'static str {
        "softmax_axis"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (outer, len, inner) =
            ops::axis_split("softmax_axis", out.shape(), self.axis).expect("axis checked");
        let (y, g) = (out.data(), grad.data());
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + i + j * inner;
                let s: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                for j in 0..len {
                    dx[at(j)] = y[at(j)] * (g[at(j)] - s);
                }
            }
        }
        vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
    }
}

#[derive(Debug)]
struct SumAxis {
    axis: usize,
}

impl Function for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let (outer, len, inner) =
            ops::axis_split("sum_axis", shape, self.axis).expect("axis checked");
        let mut dx = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &grad.data()[o * inner..(o + 1) * inner];
            for j in 0..len {
                dx[(o * len + j) * inner..(o * len + j + 1) * inner].copy_from_slice(src);
            }
        }
        vec![Some(Tensor::from_parts(shape.to_vec(), dx))]
    }
}

#[derive(Debug)]
struct SumAll;

impl Function for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item()))]
    }
}

#[derive(Debug)]
struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        ))]
    }
}

#[derive(Debug)]
struct DepthwiseConv2d;

impl Function for DepthwiseConv2d {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        let (g, kh, kw) = ops::check_dw_kernel(x, k).expect("checked in forward");
        let (xd, kd, gd) = (x.data(), k.data(), grad.data());
        let mut dx = needs[0].then(|| vec![0.0; xd.len()]);
        let mut dk = needs[1].then(|| vec![0.0; kd.len()]);
        ops::dw_conv_taps(g, kh, kw, |o, i, kk| {
            if let Some(dx) = dx.as_mut() {
                for c in 0..g.c {
                    dx[i + c] += gd[o + c] * kd[kk + c];
                }
            }
            if let Some(dk) = dk.as_mut() {
                for c in 0..g.c {
                    dk[kk + c] += gd[o + c] * xd[i + c];
                }
            }
        });
        vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dk.map(|d| Tensor::from_parts(k.shape().to_vec(), d)),
        ]
    }
}

#[derive(Debug)]
struct LayerNorm {
    eps: f64,
}

impl Function for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = gamma.numel();
        let stats = ops::layer_norm_stats(x, self.eps);
        let (xh, gd, gm) = (&stats.normalized, grad.data(), gamma.data());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; x.numel()];
        for (r, &is) in stats.inv_std.iter().enumerate() {
            let span = r * c..(r + 1) * c;
            let (xr, gr) = (&xh[span.clone()], &gd[span.clone()]);
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for j in 0..c {
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
                let d = gr[j] * gm[j];
                mean_d += d;
                mean_dx += d * xr[j];
            }
            mean_d /= c as f64;
            mean_dx /= c as f64;
            for (j, o) in dx[span].iter_mut().enumerate() {
                *o = is * (gr[j] * gm[j] - mean_d - xr[j] * mean_dx);
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

#[derive(Debug)]
struct Silu;

impl Function for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let d = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| {
                let s = ops::sigmoid(v);
                g * (s + v * s * (1.0 - s))
            })
            .collect();
        vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
    }
}

#[derive(Debug)]
struct SpaceToDepth {
    patch: usize,
}

impl Function for SpaceToDepth {
    fn name(&self) -> &'static str {
        "space_to_depth"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let g = Nhwc::of("space_to_depth", x).expect("checked in forward");
        let mut dx = vec![0.0; x.numel()];
        ops::s2d_offsets(g, self.patch, |o, i| {
            dx[i..i + g.c].copy_from_slice(&grad.data()[o..o + g.c]);
        });
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(MatMul, &[a, b], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(Add, &[a, b], out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise_mul(self.value(a), self.value(b))?;
        Ok(self.record(Mul, &[a, b], out))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = ops::scale(self.value(a), s);
        self.record(Scale(s), &[a], out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax_axis(self.value(a), axis)?;
        Ok(self.record(Softmax { axis }, &[a], out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::sum_axis(self.value(a), axis)?;
        Ok(self.record(SumAxis { axis }, &[a], out))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(SumAll, &[a], out)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| crate::Error::Index(format!("mean_axis: axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(Reshape, &[a], out))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::depthwise_conv2d(self.value(x), self.value(kernel))?;
        Ok(self.record(DepthwiseConv2d, &[x, kernel], out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.record(LayerNorm { eps }, &[x, gamma, beta], out))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = ops::silu(self.value(x));
        self.record(Silu, &[x], out)
    }

    pub fn space_to_depth(&mut self, x: Var, patch: usize) -> Result<Var> {
        let out = ops::space_to_depth(self.value(x), patch)?;
        Ok(self.record(SpaceToDepth { patch }, &[x], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};
    use crate::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let l = g.sum_all(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_square_sum_is_twice_x() {
        let mut g = Graph::new();
        let xt = Tensor::randn(&[4], &mut rng());
        let x = g.param(xt.clone());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &ops::scale(&xt, 2.0));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2], 3.0));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let l = g.sum_all(x);
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        assert_eq!(a.get(x), b.get(x));
    }

    fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut r = rng();
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, &mut r)).collect();
        let report = grad_check(&f, &inputs, GradCheck::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    /// Weights the output by a fixed pseudo-random tensor so every output
    /// element contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |i| {
            ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0
        }));
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    }

    #[test]
    fn gradcheck_matmul() {
        check(&[&[3, 4], &[4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_broadcast_mul_and_add() {
        check(&[&[3, 4], &[1, 4], &[3, 1]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            let y = g.add(y, v[2])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_softmax_every_axis() {
        for axis in 0..3 {
            check(&[&[2, 3, 4]], move |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y)
            });
        }
    }

    #[test]
    fn gradcheck_sum_axis_and_mean() {
        check(&[&[2, 3, 4]], |g, v| {
            let y = g.sum_axis(v[0], 1)?;
            let y = g.mean_axis(y, 0)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_depthwise_conv() {
        check(&[&[2, 4, 5, 3], &[3, 3, 3]], |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        check(&[&[3, 5], &[5], &[5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_silu_scale_reshape() {
        check(&[&[2, 6]], |g, v| {
            let y = g.silu(v[0]);
            let y = g.scale(y, -1.5);
            let y = g.reshape(y, &[3, 4])?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn gradcheck_space_to_depth() {
        check(&[&[1, 4, 4, 2]], |g, v| {
            let y = g.space_to_depth(v[0], 2)?;
            weighted_sum(g, y)
        });
    }
}
