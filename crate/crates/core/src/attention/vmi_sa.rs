//! Mask-gated separable self-attention in recurrent and matrix forms.
//!
//! Both forms take post-projection `Q`, `K` of shape `[L, D]` (or a batch
//! `[N, L, D]`), per-token gates `alpha`, `beta` of length `L`, and an
//! `L x D` mask. No softmax is involved.

use std::sync::Arc;

use super::mask::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

/// Per-token gates: `alpha` weights each token's contribution to the
/// context, `beta` scales the local `Q ⊙ K` term.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GateVector {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::shape("gate_vector", &[alpha.len()], &[beta.len()]));
        }
        Ok(GateVector { alpha, beta })
    }

    /// `alpha = 1/L`, `beta = 1`.
    pub fn init(l: usize) -> Self {
        GateVector {
            alpha: vec![1.0 / l as f64; l],
            beta: vec![1.0; l],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Batch, token and feature extents shared by `q` and `k`.
#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    l: usize,
    d: usize,
}

fn dims(op: &'static str, q: &Tensor, k: &Tensor, gate_len: usize, mask: &Mask) -> Result<Dims> {
    if q.shape() != k.shape() {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    let dims = match *q.shape() {
        [l, d] => Dims { batch: 1, l, d },
        [batch, l, d] => Dims { batch, l, d },
        _ => return Err(Error::shape(op, q.shape(), &[])),
    };
    if gate_len != dims.l {
        return Err(Error::shape(op, &[dims.l], &[gate_len]));
    }
    if mask.rows() != dims.l || mask.cols() != dims.d {
        return Err(Error::shape(
            op,
            &[dims.l, dims.d],
            &[mask.rows(), mask.cols()],
        ));
    }
    Ok(dims)
}

/// Recurrent form, token by token from `h_0 = 0`:
///
/// ```text
/// h_i = h_{i-1} + alpha_i (Q_i ⊙ K_i)
/// y_i = M_i ⊙ h_i + beta_i (Q_i ⊙ K_i)
/// ```
pub fn vmi_sa_recurrent(q: &Tensor, k: &Tensor, g: &GateVector, m: &Mask) -> Result<Tensor> {
    let dm = dims("vmi_sa_recurrent", q, k, g.len(), m)?;
    if g.beta.len() != dm.l {
        return Err(Error::shape("vmi_sa_recurrent", &[dm.l], &[g.beta.len()]));
    }
    let mut out = vec![0.0; q.numel()];
    recurrent_forward(dm, q.data(), k.data(), &g.alpha, &g.beta, m, &mut out);
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

fn recurrent_forward(
    dm: Dims,
    q: &[f64],
    k: &[f64],
    alpha: &[f64],
    beta: &[f64],
    m: &Mask,
    out: &mut [f64],
) {
    let Dims { batch, l, d } = dm;
    let mut h = vec![0.0; d];
    for b in 0..batch {
        h.fill(0.0);
        for t in 0..l {
            let base = (b * l + t) * d;
            let mrow = m.row(t);
            for n in 0..d {
                let p = q[base + n] * k[base + n];
                h[n] += alpha[t] * p;
                out[base + n] = f64::from(mrow[n]) * h[n] + beta[t] * p;
            }
        }
    }
}

/// Context vector `c[n] = Σ_t alpha_t M[t][n] Q[t][n] K[t][n]`, shaped
/// `[1, D]` (or `[N, 1, D]` for batched input).
pub fn context_vector(q: &Tensor, k: &Tensor, alpha: &[f64], m: &Mask) -> Result<Tensor> {
    let dm = dims("context_vector", q, k, alpha.len(), m)?;
    let ctx = contexts(dm, q.data(), k.data(), alpha, m);
    let shape = if q.rank() == 2 {
        vec![1, dm.d]
    } else {
        vec![dm.batch, 1, dm.d]
    };
    Ok(Tensor::from_parts(shape, ctx))
}

fn contexts(dm: Dims, q: &[f64], k: &[f64], alpha: &[f64], m: &Mask) -> Vec<f64> {
    let Dims { batch, l, d } = dm;
    let mut ctx = vec![0.0; batch * d];
    for b in 0..batch {
        let c = &mut ctx[b * d..(b + 1) * d];
        for t in 0..l {
            let base = (b * l + t) * d;
            let mrow = m.row(t);
            for n in 0..d {
                if mrow[n] == 1 {
                    c[n] += alpha[t] * (q[base + n] * k[base + n]);
                }
            }
        }
    }
    ctx
}

/// Matrix form: `Y = Expand_L(c) + diag(beta) (Q ⊙ K)` where `c` is the
/// [`context_vector`] and `Expand_L` repeats it for every token.
pub fn vmi_sa_matrix(q: &Tensor, k: &Tensor, g: &GateVector, m: &Mask) -> Result<Tensor> {
    let dm = dims("vmi_sa_matrix", q, k, g.len(), m)?;
    if g.beta.len() != dm.l {
        return Err(Error::shape("vmi_sa_matrix", &[dm.l], &[g.beta.len()]));
    }
    let mut out = vec![0.0; q.numel()];
    matrix_forward(dm, q.data(), k.data(), &g.alpha, &g.beta, m, &mut out);
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

fn matrix_forward(
    dm: Dims,
    q: &[f64],
    k: &[f64],
    alpha: &[f64],
    beta: &[f64],
    m: &Mask,
    out: &mut [f64],
) {
    let Dims { batch, l, d } = dm;
    let ctx = contexts(dm, q, k, alpha, m);
    for b in 0..batch {
        let c = &ctx[b * d..(b + 1) * d];
        for t in 0..l {
            let base = (b * l + t) * d;
            for n in 0..d {
                out[base + n] = c[n] + beta[t] * (q[base + n] * k[base + n]);
            }
        }
    }
}

/// Which VMI-SA formulation a block uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionForm {
    #[default]
    Matrix,
    Recurrent,
}

#[derive(Debug)]
struct VmiSaOp {
    form: AttentionForm,
    mask: Arc<Mask>,
    dims: Dims,
}

impl Function for VmiSaOp {
    fn name(&self) -> &'static str {
        match self.form {
            AttentionForm::Matrix => "vmi_sa_matrix",
            AttentionForm::Recurrent => "vmi_sa_recurrent",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let Dims { batch, l, d } = self.dims;
        let (q, k, alpha, beta) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
        );
        let gy = grad.data();
        let m = &*self.mask;
        let mut dp = vec![0.0; q.len()];
        let mut dalpha = vec![0.0; l];
        let mut dbeta = vec![0.0; l];
        // `r` is what each token's alpha-weighted product feeds into: the
        // token-summed output gradient (matrix form) or its reverse cumulative
        // sum over later tokens (recurrent form), masked by the token's row.
        let mut acc = vec![0.0; d];
        for b in 0..batch {
            acc.fill(0.0);
            if self.form == AttentionForm::Matrix {
                for t in 0..l {
                    for n in 0..d {
                        acc[n] += gy[(b * l + t) * d + n];
                    }
                }
            }
            for t in (0..l).rev() {
                let base = (b * l + t) * d;
                let mrow = m.row(t);
                for n in 0..d {
                    let i = base + n;
                    let p = q[i] * k[i];
                    let r = match self.form {
                        AttentionForm::Matrix => f64::from(mrow[n]) * acc[n],
                        AttentionForm::Recurrent => {
                            acc[n] += f64::from(mrow[n]) * gy[i];
                            acc[n]
                        }
                    };
                    dalpha[t] += r * p;
                    dbeta[t] += gy[i] * p;
                    dp[i] = alpha[t] * r + beta[t] * gy[i];
                }
            }
        }
        let shape = inputs[0].shape().to_vec();
        let dq = needs[0].then(|| {
            Tensor::from_parts(
                shape.clone(),
                dp.iter().zip(k).map(|(g, kk)| g * kk).collect(),
            )
        });
        let dk = needs[1]
            .then(|| Tensor::from_parts(shape, dp.iter().zip(q).map(|(g, qq)| g * qq).collect()));
        vec![
            dq,
            dk,
            needs[2].then(|| Tensor::from_parts(vec![l], dalpha)),
            needs[3].then(|| Tensor::from_parts(vec![l], dbeta)),
        ]
    }
}

impl Graph {
    /// Differentiable VMI-SA. `alpha` and `beta` are `[L]` tensors.
    pub fn vmi_sa(
        &mut self,
        form: AttentionForm,
        q: Var,
        k: Var,
        alpha: Var,
        beta: Var,
        mask: &Arc<Mask>,
    ) -> Result<Var> {
        let (a, bt) = (self.value(alpha), self.value(beta));
        if a.rank() != 1 || a.shape() != bt.shape() {
            return Err(Error::shape("vmi_sa", a.shape(), bt.shape()));
        }
        let (qt, kt) = (self.value(q), self.value(k));
        let dm = dims("vmi_sa", qt, kt, a.numel(), mask)?;
        let mut out = vec![0.0; qt.numel()];
        match form {
            AttentionForm::Matrix => matrix_forward(
                dm,
                qt.data(),
                kt.data(),
                a.data(),
                bt.data(),
                mask,
                &mut out,
            ),
            AttentionForm::Recurrent => recurrent_forward(
                dm,
                qt.data(),
                kt.data(),
                a.data(),
                bt.data(),
                mask,
                &mut out,
            ),
        }
        let out = Tensor::from_parts(qt.shape().to_vec(), out);
        let op = VmiSaOp {
            form,
            mask: Arc::clone(mask),
            dims: dm,
        };
        Ok(self.record(op, &[q, k, alpha, beta], out))
    }
}
