use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{
    attention_block, conv_block, conv_init_std, patch_conv_graph, AttentionVars, ConvVars, INIT_STD,
};
use super::config::VmiNetConfig;
use crate::attention::{build_mask, Mask};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    TruncNormal,
    /// Truncated normal with std `1 / sqrt(fan_in)`, for convolution kernels.
    FanIn(usize),
    Zeros,
    Ones,
    /// `1 / L` for a gate over `L` tokens.
    InverseLen,
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter layout in forward-consumption order.
fn layout(cfg: &VmiNetConfig) -> Vec<Slot> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: &[usize], init| {
        out.push(Slot {
            name,
            shape: shape.to_vec(),
            init,
        })
    };
    let widths = cfg.stage_widths();
    let tokens = cfg.stage_tokens();
    let kk = cfg.kernel_size;
    let s = cfg.stem_patch;
    push(
        "stem.weight".into(),
        &[s, s, 3, widths[0]],
        Init::FanIn(s * s * 3),
    );
    push("stem.bias".into(), &[widths[0]], Init::Zeros);
    push("stem.norm_gamma".into(), &[widths[0]], Init::Ones);
    push("stem.norm_beta".into(), &[widths[0]], Init::Zeros);
    for stage in 0..4 {
        let c = widths[stage];
        let d = cfg.expansion * c;
        let l = tokens[stage];
        if stage > 0 {
            let p = format!("down{stage}");
            push(
                format!("{p}.weight"),
                &[2, 2, widths[stage - 1], c],
                Init::FanIn(4 * widths[stage - 1]),
            );
            push(format!("{p}.bias"), &[c], Init::Zeros);
            push(format!("{p}.norm_gamma"), &[c], Init::Ones);
            push(format!("{p}.norm_beta"), &[c], Init::Zeros);
        }
        for b in 0..cfg.stage_depths[stage] {
            let p = format!("stage{stage}.block{b}");
            if cfg.ablation_conv_only {
                push(format!("{p}.dw_kernel"), &[kk, kk, c], Init::FanIn(kk * kk));
                push(format!("{p}.norm_gamma"), &[c], Init::Ones);
                push(format!("{p}.norm_beta"), &[c], Init::Zeros);
                push(format!("{p}.w_expand"), &[c, d], Init::TruncNormal);
                push(format!("{p}.w_reduce"), &[d, c], Init::Zeros);
            } else {
                push(format!("{p}.norm_gamma"), &[c], Init::Ones);
                push(format!("{p}.norm_beta"), &[c], Init::Zeros);
                push(format!("{p}.dw_kernel"), &[kk, kk, c], Init::FanIn(kk * kk));
                push(format!("{p}.w_q"), &[c, d], Init::TruncNormal);
                push(format!("{p}.w_k"), &[c, d], Init::TruncNormal);
                push(format!("{p}.w_out"), &[d, c], Init::Zeros);
                push(format!("{p}.alpha"), &[l], Init::InverseLen);
                push(format!("{p}.beta"), &[l], Init::Ones);
            }
        }
    }
    push(
        "head.weight".into(),
        &[widths[3], cfg.num_classes],
        Init::TruncNormal,
    );
    push("head.bias".into(), &[cfg.num_classes], Init::Zeros);
    out
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[N, num_classes]`
    pub logits: Var,
    /// One handle per parameter, in [`VmiNet::params`] order.
    pub params: Vec<Var>,
    /// Output of the last block of each stage.
    pub stages: [Var; 4],
}

/// The four-stage hierarchical backbone with a linear classifier head.
#[derive(Clone, Debug)]
pub struct VmiNet {
    cfg: VmiNetConfig,
    params: Vec<Param>,
    masks: Vec<Option<Arc<Mask>>>,
}

/// Validates `cfg` and initializes a model from `seed`.
pub fn build_vminet(cfg: &VmiNetConfig, seed: u64) -> Result<VmiNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = layout(cfg)
        .into_iter()
        .map(|s| {
            let value = match s.init {
                Init::TruncNormal => Tensor::trunc_normal(&s.shape, INIT_STD, &mut rng),
                Init::FanIn(f) => Tensor::trunc_normal(&s.shape, conv_init_std(f), &mut rng),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::InverseLen => Tensor::full(&s.shape, 1.0 / s.shape[0] as f64),
            };
            Param {
                name: s.name,
                value,
            }
        })
        .collect();
    VmiNet::assemble(cfg.clone(), params)
}

/// Number of learnable scalars.
pub fn count_params(m: &VmiNet) -> usize {
    m.params.iter().map(|p| p.value.numel()).sum()
}

impl VmiNet {
    fn assemble(cfg: VmiNetConfig, params: Vec<Param>) -> Result<Self> {
        let widths = cfg.stage_widths();
        let tokens = cfg.stage_tokens();
        let masks = (0..cfg.total_blocks())
            .map(|i| {
                if cfg.ablation_conv_only {
                    return Ok(None);
                }
                let s = cfg.stage_of_block(i);
                let (l, d) = (tokens[s], cfg.expansion * widths[s]);
                build_mask(cfg.mask_schedule[i].resolve(l, d), l, d).map(|m| Some(Arc::new(m)))
            })
            .collect::<Result<_>>()?;
        Ok(VmiNet { cfg, params, masks })
    }

    /// Rebuilds a model from stored tensors, which must match the layout
    /// implied by `cfg` in name, order and shape.
    pub fn from_params(cfg: VmiNetConfig, params: Vec<Param>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (slot, p) in expected.iter().zip(&params) {
            if slot.name != p.name || slot.shape != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    p.name,
                    p.value.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        Self::assemble(cfg, params)
    }

    pub fn config(&self) -> &VmiNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable parameter access. Shapes must be preserved by the caller.
    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    /// Replaces a parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect()
    }

    pub fn count_params(&self) -> usize {
        count_params(self)
    }

    /// Records the full forward pass on `x` (`[N,H,W,3]` or `[H,W,3]`).
    /// Parameters enter the graph as trainable leaves.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let (h, w) = self.cfg.input_resolution;
        let xs = g.value(x).shape();
        let ok = match *xs {
            [hh, ww, 3] | [_, hh, ww, 3] => (hh, ww) == (h, w),
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "input shape {xs:?} does not match configured {h}x{w}x3"
            )));
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.param(p.value.clone()))
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter layout matches forward order");
        let eps = self.cfg.norm_eps;

        let (sw, sb, sg, sn) = (next(), next(), next(), next());
        let mut cur = patch_conv_graph(g, x, sw, sb)?;
        cur = g.layer_norm(cur, sg, sn, eps)?;
        let mut stages = [cur; 4];
        let mut block = 0;
        for stage in 0..4 {
            if stage > 0 {
                let (dw, db, dg, dn) = (next(), next(), next(), next());
                cur = patch_conv_graph(g, cur, dw, db)?;
                cur = g.layer_norm(cur, dg, dn, eps)?;
            }
            for _ in 0..self.cfg.stage_depths[stage] {
                cur = match &self.masks[block] {
                    None => {
                        let v = ConvVars {
                            dw_kernel: next(),
                            norm_gamma: next(),
                            norm_beta: next(),
                            w_expand: next(),
                            w_reduce: next(),
                        };
                        conv_block(g, cur, &v, eps)?
                    }
                    Some(mask) => {
                        let v = AttentionVars {
                            norm_gamma: next(),
                            norm_beta: next(),
                            dw_kernel: next(),
                            w_q: next(),
                            w_k: next(),
                            w_out: next(),
                            alpha: next(),
                            beta: next(),
                        };
                        attention_block(g, cur, &v, mask, self.cfg.attention_form, eps)?
                    }
                };
                block += 1;
            }
            stages[stage] = cur;
        }

        let shape = g.value(cur).shape().to_vec();
        let (n, l, c) = match *shape {
            [hh, ww, c] => (1, hh * ww, c),
            [n, hh, ww, c] => (n, hh * ww, c),
            _ => unreachable!("blocks preserve rank"),
        };
        let pooled = g.reshape(cur, &[n, l, c])?;
        let pooled = g.mean_axis(pooled, 1)?;
        let (hw, hb) = (next(), next());
        let logits = g.matmul(pooled, hw)?;
        let logits = g.add(logits, hb)?;
        Ok(ForwardVars {
            logits,
            params: vars,
            stages,
        })
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, xv)?;
        Ok(g.value(f.logits).clone())
    }

    /// Output feature map of each stage.
    pub fn stage_features(&self, x: &Tensor) -> Result<[Tensor; 4]> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, xv)?;
        Ok(f.stages.map(|v| g.value(v).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MaskFamily;
    use crate::backbone::config::Variant;

    fn tiny() -> VmiNetConfig {
        VmiNetConfig::desk(4, 2, [1, 1, 1, 1], 3)
    }

    #[test]
    fn head_of_ti_is_193k() {
        let m = build_vminet(&VmiNetConfig::variant(Variant::Ti).unwrap(), 0).unwrap();
        let head = m.param("head.weight").unwrap().numel() + m.param("head.bias").unwrap().numel();
        assert_eq!(head, 193_000);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = build_vminet(&tiny(), 5).unwrap();
        let x = Tensor::from_fn(&[2, 32, 32, 3], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let a = m.forward(&x).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a, m.forward(&x).unwrap());
        assert_eq!(build_vminet(&tiny(), 5).unwrap().params(), m.params());
    }

    #[test]
    fn unbatched_input_matches_batch_of_one() {
        let m = build_vminet(&tiny(), 2).unwrap();
        let x = Tensor::from_fn(&[32, 32, 3], |i| (i % 7) as f64 * 0.1);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x.reshape(&[1, 32, 32, 3]).unwrap()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn wrong_resolution_is_config_error() {
        let m = build_vminet(&tiny(), 0).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[1, 16, 16, 3])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn from_params_round_trip_and_rejects_mismatch() {
        let m = build_vminet(&tiny(), 1).unwrap();
        let again = VmiNet::from_params(tiny(), m.params().to_vec()).unwrap();
        assert_eq!(again.params(), m.params());
        let mut ps = m.params().to_vec();
        ps.pop();
        assert!(VmiNet::from_params(tiny(), ps).is_err());
    }

    #[test]
    fn conv_only_has_no_gates_and_fewer_params() {
        let mut cfg = tiny();
        let full = build_vminet(&cfg, 0).unwrap();
        cfg.ablation_conv_only = true;
        let conv = build_vminet(&cfg, 0).unwrap();
        assert!(conv.params().iter().all(|p| !p.name.ends_with("alpha")));
        assert!(conv.count_params() < full.count_params());
    }

    #[test]
    fn no_mask_schedule_builds() {
        let cfg = tiny().with_uniform_mask(MaskFamily::None);
        build_vminet(&cfg, 0).unwrap();
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny();
        cfg.mask_schedule.pop();
        assert!(matches!(build_vminet(&cfg, 0), Err(Error::Config(_))));
    }
}
