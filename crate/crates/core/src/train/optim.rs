use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            weight_decay: 0.025,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    /// Zeroed buffers mirroring `shapes`.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        OptState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step over every parameter:
/// `p <- p - lr*wd*p`, then `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    s: &mut OptState,
    lr: f64,
    h: &AdamW,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != s.m.len() || params.len() != s.v.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            s.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != s.m[i].shape() || p.shape() != s.v[i].shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    s.step += 1;
    let (b1, b2) = h.betas;
    let t = s.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let shrink = lr * h.weight_decay;
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(s.m.iter_mut().zip(s.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pi, &gi), (mi, vi)) in it {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *pi -= shrink * *pi;
            *pi -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + h.eps));
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_base` over `warmup` steps, then a half cosine
/// down to 0 at `total`.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, lr_base: f64) -> f64 {
    if step < warmup {
        return lr_base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_base;
    }
    let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
    lr_base * 0.5 * (1.0 + (PI * progress).cos())
}
