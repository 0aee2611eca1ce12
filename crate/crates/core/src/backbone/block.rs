//! Attention block, conv-only ablation block and patch downsampling.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{AttentionForm, GateVector, Mask};
use crate::error::{Error, Result};
use crate::tensor::{ops::Nhwc, Graph, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Convolution kernels are scaled by fan-in so feature magnitudes survive
/// narrow desk-scale widths; dense projections keep the fixed 0.02.
pub(crate) fn conv_init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
const DEFAULT_EPS: f64 = 1e-6;

/// Learnable state of one attention block with base width `C` and
/// projection width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct VmiSaBlockParams {
    /// `[k, k, C]`
    pub dw_kernel: Tensor,
    /// `[C, D]`
    pub w_q: Tensor,
    /// `[C, D]`
    pub w_k: Tensor,
    /// `[D, C]`
    pub w_out: Tensor,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub gates: GateVector,
}

impl VmiSaBlockParams {
    /// Truncated-normal depthwise kernel and Q/K projections, zero output
    /// projection, unit norm scale, gates `alpha = 1/L`, `beta = 1`.
    pub fn init<R: Rng + ?Sized>(
        c: usize,
        d: usize,
        tokens: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        VmiSaBlockParams {
            dw_kernel: Tensor::trunc_normal(
                &[kernel, kernel, c],
                conv_init_std(kernel * kernel),
                rng,
            ),
            w_q: Tensor::trunc_normal(&[c, d], INIT_STD, rng),
            w_k: Tensor::trunc_normal(&[c, d], INIT_STD, rng),
            w_out: Tensor::zeros(&[d, c]),
            norm_gamma: Tensor::ones(&[c]),
            norm_beta: Tensor::zeros(&[c]),
            gates: GateVector::init(tokens),
        }
    }
}

/// Graph handles for an attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub dw_kernel: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_out: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// `x + silu(VMI-SA(Q, K) W_out)` with `Q, K = DW-Conv(norm(x)) W_{q,k}`.
/// Spatial positions are flattened row-major into the token axis only for
/// the attention step.
pub(crate) fn attention_block(
    g: &mut Graph,
    x: Var,
    p: &AttentionVars,
    mask: &Arc<Mask>,
    form: AttentionForm,
    eps: f64,
) -> Result<Var> {
    let geo = Nhwc::of("vmi_sa_block", g.value(x))?;
    let l = geo.h * geo.w;
    let gate_len = g.value(p.alpha).numel();
    if gate_len != l {
        return Err(Error::Config(format!(
            "gate length {gate_len} does not match {}x{} = {l} tokens",
            geo.h, geo.w
        )));
    }
    let d = g.value(p.w_q).shape()[1];
    let rows = geo.n * l;
    let xn = g.layer_norm(x, p.norm_gamma, p.norm_beta, eps)?;
    let u = g.depthwise_conv2d(xn, p.dw_kernel)?;
    let u = g.reshape(u, &[rows, geo.c])?;
    let q = g.matmul(u, p.w_q)?;
    let k = g.matmul(u, p.w_k)?;
    let q = g.reshape(q, &[geo.n, l, d])?;
    let k = g.reshape(k, &[geo.n, l, d])?;
    let y = g.vmi_sa(form, q, k, p.alpha, p.beta, mask)?;
    let y = g.reshape(y, &[rows, d])?;
    let o = g.matmul(y, p.w_out)?;
    let o = g.silu(o);
    let o = g.reshape(o, g.value(x).shape().to_vec().as_slice())?;
    g.add(x, o)
}

fn attention_vars(g: &mut Graph, p: &VmiSaBlockParams) -> AttentionVars {
    AttentionVars {
        norm_gamma: g.constant(p.norm_gamma.clone()),
        norm_beta: g.constant(p.norm_beta.clone()),
        dw_kernel: g.constant(p.dw_kernel.clone()),
        w_q: g.constant(p.w_q.clone()),
        w_k: g.constant(p.w_k.clone()),
        w_out: g.constant(p.w_out.clone()),
        alpha: g.constant(Tensor::from_parts(
            vec![p.gates.len()],
            p.gates.alpha.clone(),
        )),
        beta: g.constant(Tensor::from_parts(
            vec![p.gates.len()],
            p.gates.beta.clone(),
        )),
    }
}

/// Forward pass of one attention block (matrix form) on `[H,W,C]` or `[N,H,W,C]`.
pub fn vmi_sa_block_forward(x: &Tensor, p: &VmiSaBlockParams, mask: &Mask) -> Result<Tensor> {
    vmi_sa_block_forward_with(x, p, mask, AttentionForm::Matrix)
}

pub fn vmi_sa_block_forward_with(
    x: &Tensor,
    p: &VmiSaBlockParams,
    mask: &Mask,
    form: AttentionForm,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = attention_vars(&mut g, p);
    let out = attention_block(
        &mut g,
        xv,
        &vars,
        &Arc::new(mask.clone()),
        form,
        DEFAULT_EPS,
    )?;
    Ok(g.value(out).clone())
}

/// Conv-only ablation block: the attention block with the elementwise
/// product and context vector removed, leaving a single pointwise branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    pub dw_kernel: Tensor,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[C, D]`
    pub w_expand: Tensor,
    /// `[D, C]`
    pub w_reduce: Tensor,
}

impl ConvBlockParams {
    pub fn init<R: Rng + ?Sized>(c: usize, d: usize, kernel: usize, rng: &mut R) -> Self {
        ConvBlockParams {
            dw_kernel: Tensor::trunc_normal(
                &[kernel, kernel, c],
                conv_init_std(kernel * kernel),
                rng,
            ),
            norm_gamma: Tensor::ones(&[c]),
            norm_beta: Tensor::zeros(&[c]),
            w_expand: Tensor::trunc_normal(&[c, d], INIT_STD, rng),
            w_reduce: Tensor::zeros(&[d, c]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvVars {
    pub dw_kernel: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub w_expand: Var,
    pub w_reduce: Var,
}

/// `x + silu(norm(DW-Conv(x)) W_expand) W_reduce`.
pub(crate) fn conv_block(g: &mut Graph, x: Var, p: &ConvVars, eps: f64) -> Result<Var> {
    let geo = Nhwc::of("conv_only_block", g.value(x))?;
    let rows = geo.n * geo.h * geo.w;
    let u = g.depthwise_conv2d(x, p.dw_kernel)?;
    let u = g.layer_norm(u, p.norm_gamma, p.norm_beta, eps)?;
    let u = g.reshape(u, &[rows, geo.c])?;
    let h = g.matmul(u, p.w_expand)?;
    let h = g.silu(h);
    let o = g.matmul(h, p.w_reduce)?;
    let o = g.reshape(o, g.value(x).shape().to_vec().as_slice())?;
    g.add(x, o)
}

pub fn conv_only_block_forward(x: &Tensor, p: &ConvBlockParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = ConvVars {
        dw_kernel: g.constant(p.dw_kernel.clone()),
        norm_gamma: g.constant(p.norm_gamma.clone()),
        norm_beta: g.constant(p.norm_beta.clone()),
        w_expand: g.constant(p.w_expand.clone()),
        w_reduce: g.constant(p.w_reduce.clone()),
    };
    let out = conv_block(&mut g, xv, &vars, DEFAULT_EPS)?;
    Ok(g.value(out).clone())
}

/// Non-overlapping `s x s` stride-`s` convolution, `weight` `[s,s,C_in,C_out]`,
/// `bias` `[C_out]`.
pub(crate) fn patch_conv_graph(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (s, cin, cout) = match *g.value(weight).shape() {
        [s, s2, cin, cout] if s == s2 => (s, cin, cout),
        _ => {
            return Err(Error::shape(
                "downsample",
                g.value(x).shape(),
                g.value(weight).shape(),
            ))
        }
    };
    let geo = Nhwc::of("downsample", g.value(x))?;
    if geo.c != cin {
        return Err(Error::shape(
            "downsample",
            g.value(x).shape(),
            g.value(weight).shape(),
        ));
    }
    let patches = g.space_to_depth(x, s)?;
    let (ho, wo) = (geo.h / s, geo.w / s);
    let patches = g.reshape(patches, &[geo.n * ho * wo, s * s * cin])?;
    let w2 = g.reshape(weight, &[s * s * cin, cout])?;
    let y = g.matmul(patches, w2)?;
    let y = g.add(y, bias)?;
    if g.value(x).rank() == 3 {
        g.reshape(y, &[ho, wo, cout])
    } else {
        g.reshape(y, &[geo.n, ho, wo, cout])
    }
}

/// Downsampling convolution: `[N,H,W,C_in] -> [N,H/s,W/s,C_out]` where `s`
/// is the kernel extent (2 between stages, 4 or 2 for the stem).
pub fn downsample(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(weight.clone());
    let bv = g.constant(bias.clone());
    let out = patch_conv_graph(&mut g, xv, wv, bv)?;
    Ok(g.value(out).clone())
}
