//! Binary checkpoint format.
//!
//! ```text
//! "VMIN"  u32 version  u64 count
//! count x { u32 name_len, name bytes, u32 rank, rank x u64 extent, f64 payload }
//! ```
//!
//! All integers and floats are little-endian. Model configuration is stored
//! as `meta.*` tensors, optimizer moments as `opt.m.<param>` / `opt.v.<param>`.

use std::fs;
use std::path::Path;

use crate::attention::{AttentionForm, MaskFamily};
use crate::backbone::{Param, Variant, VmiNet, VmiNetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::optim::OptState;

pub const MAGIC: &[u8; 4] = b"VMIN";
pub const VERSION: u32 = 1;

pub fn encode_tensors(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"VMIN\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version}"),
        ));
    }
    let count = r.u64("record count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(start, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u64("extent")? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::format(start, format!("{name}: extent overflow")))?;
            shape.push(e);
        }
        let nbytes = numel
            .checked_mul(8)
            .ok_or_else(|| Error::format(start, format!("{name}: payload overflow")))?;
        let payload = r.take(nbytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::format(start, format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            "trailing bytes after last record",
        ));
    }
    Ok(out)
}

/// Writes via a temporary sibling and a rename, so a crash never leaves a
/// half-written file under `path`.
pub fn write_tensors(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_tensors(records))
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_tensors(&bytes)
}

/// Model, optimizer state and the last completed epoch.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VmiNet,
    pub opt: OptState,
    pub epoch: usize,
}

fn vector(v: &[usize]) -> Tensor {
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("non-empty")
}

fn config_records(cfg: &VmiNetConfig) -> Vec<(String, Tensor)> {
    let s = |v: f64| Tensor::scalar(v);
    let form = match cfg.attention_form {
        AttentionForm::Matrix => 0.0,
        AttentionForm::Recurrent => 1.0,
    };
    let masks: Vec<usize> = cfg
        .mask_schedule
        .iter()
        .map(|m| usize::from(m.code()))
        .collect();
    vec![
        ("meta.variant".into(), s(f64::from(cfg.variant.code()))),
        ("meta.base_width".into(), s(cfg.base_width as f64)),
        ("meta.expansion".into(), s(cfg.expansion as f64)),
        ("meta.stage_depths".into(), vector(&cfg.stage_depths)),
        ("meta.mask_schedule".into(), vector(&masks)),
        (
            "meta.input_resolution".into(),
            vector(&[cfg.input_resolution.0, cfg.input_resolution.1]),
        ),
        ("meta.num_classes".into(), s(cfg.num_classes as f64)),
        (
            "meta.conv_only".into(),
            s(if cfg.ablation_conv_only { 1.0 } else { 0.0 }),
        ),
        ("meta.stem_patch".into(), s(cfg.stem_patch as f64)),
        ("meta.attention_form".into(), s(form)),
        ("meta.kernel_size".into(), s(cfg.kernel_size as f64)),
        ("meta.norm_eps".into(), s(cfg.norm_eps)),
    ]
}

pub fn checkpoint_records(model: &VmiNet, opt: &OptState, epoch: usize) -> Vec<(String, Tensor)> {
    let mut out = config_records(model.config());
    out.extend(
        model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone())),
    );
    for (p, m) in model.params().iter().zip(&opt.m) {
        out.push((format!("opt.m.{}", p.name), m.clone()));
    }
    for (p, v) in model.params().iter().zip(&opt.v) {
        out.push((format!("opt.v.{}", p.name), v.clone()));
    }
    out.push(("opt.step".into(), Tensor::scalar(opt.step as f64)));
    out.push(("train.epoch".into(), Tensor::scalar(epoch as f64)));
    out
}

pub fn save_checkpoint(model: &VmiNet, opt: &OptState, epoch: usize, path: &Path) -> Result<()> {
    write_tensors(path, &checkpoint_records(model, opt, epoch))
}

fn as_usize(name: &str, t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
                Ok(v as usize)
            } else {
                Err(Error::format(0, format!("{name} holds non-integer {v}")))
            }
        })
        .collect()
}

fn decode_config(meta: &dyn Fn(&str) -> Result<Tensor>) -> Result<VmiNetConfig> {
    let int = |name: &str| -> Result<usize> {
        let t = meta(name)?;
        as_usize(name, &t)?
            .first()
            .copied()
            .ok_or_else(|| Error::format(0, format!("{name} is empty")))
    };
    let variant = Variant::from_code(int("meta.variant")? as u8)
        .ok_or_else(|| Error::format(0, "unknown variant code"))?;
    let depths = as_usize("meta.stage_depths", &meta("meta.stage_depths")?)?;
    let stage_depths: [usize; 4] = depths
        .try_into()
        .map_err(|_| Error::format(0, "meta.stage_depths must hold 4 entries"))?;
    let mask_schedule = as_usize("meta.mask_schedule", &meta("meta.mask_schedule")?)?
        .into_iter()
        .map(|c| {
            MaskFamily::from_code(c as u8)
                .ok_or_else(|| Error::format(0, format!("unknown mask code {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let res = as_usize("meta.input_resolution", &meta("meta.input_resolution")?)?;
    if res.len() != 2 {
        return Err(Error::format(
            0,
            "meta.input_resolution must hold 2 entries",
        ));
    }
    let attention_form = match int("meta.attention_form")? {
        0 => AttentionForm::Matrix,
        1 => AttentionForm::Recurrent,
        c => return Err(Error::format(0, format!("unknown attention form code {c}"))),
    };
    Ok(VmiNetConfig {
        variant,
        base_width: int("meta.base_width")?,
        expansion: int("meta.expansion")?,
        stage_depths,
        mask_schedule,
        input_resolution: (res[0], res[1]),
        num_classes: int("meta.num_classes")?,
        ablation_conv_only: int("meta.conv_only")? != 0,
        stem_patch: int("meta.stem_patch")?,
        attention_form,
        kernel_size: int("meta.kernel_size")?,
        norm_eps: meta("meta.norm_eps")?.data()[0],
    })
}

pub fn checkpoint_from_records(records: Vec<(String, Tensor)>) -> Result<Checkpoint> {
    let lookup = |name: &str| -> Result<Tensor> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format(0, format!("missing record {name:?}")))
    };
    let cfg = decode_config(&lookup)?;
    let step = as_usize("opt.step", &lookup("opt.step")?)?[0] as u64;
    let epoch = as_usize("train.epoch", &lookup("train.epoch")?)?[0];
    let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for (name, t) in records {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.push((rest.to_string(), t));
        } else if !(name.starts_with("meta.")
            || name.starts_with("opt.")
            || name.starts_with("train."))
        {
            params.push(Param { name, value: t });
        }
    }
    let model = VmiNet::from_params(cfg, params).map_err(|e| Error::format(0, e.to_string()))?;
    let order_ok = |buf: &[(String, Tensor)]| {
        buf.len() == model.params().len()
            && buf
                .iter()
                .zip(model.params())
                .all(|((n, t), p)| *n == p.name && t.shape() == p.value.shape())
    };
    if !order_ok(&m) || !order_ok(&v) {
        return Err(Error::format(
            0,
            "optimizer buffers do not mirror the model parameters",
        ));
    }
    let opt = OptState {
        m: m.into_iter().map(|(_, t)| t).collect(),
        v: v.into_iter().map(|(_, t)| t).collect(),
        step,
    };
    Ok(Checkpoint { model, opt, epoch })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_records(read_tensors(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_matrix_round_trip() {
        let recs = vec![
            ("a".to_string(), Tensor::scalar(-0.0)),
            (
                "b.c".to_string(),
                Tensor::from_rows(&[[1.5, f64::MIN_POSITIVE], [3.0, -1e300]]),
            ),
        ];
        let bytes = encode_tensors(&recs);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1.item().to_bits(), (-0.0f64).to_bits());
        assert_eq!(back[1], recs[1]);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let recs = vec![("w".to_string(), Tensor::ones(&[2, 3]))];
        let bytes = encode_tensors(&recs);
        for cut in 0..bytes.len() {
            assert!(
                matches!(decode_tensors(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_tensors(&[]);
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensors(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = encode_tensors(&[]);
        bytes[4] = 9;
        assert!(matches!(
            decode_tensors(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
