use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, AugmentConfig};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DataSource, TrainConfig};
use super::data::{load_cifar_batches, synthetic, Dataset, Split, IMAGE_SIDE};
use super::optim::{adamw_step, cosine_lr, AdamW, OptState};
use crate::backbone::{build_vminet, VmiNet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "step",
    "lr",
    "train_loss",
    "train_acc",
    "val_acc",
    "seconds",
];
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.vmin";

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's minibatches.
    pub train_acc: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_run(&self, other: &EpochMetrics) -> bool {
        let strip = |m: &EpochMetrics| EpochMetrics {
            seconds: 0.0,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
    pub model: VmiNet,
    pub opt: OptState,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl History {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_acc)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Bytes to network input: `(b / 255 - 0.5) / 0.25`.
pub fn normalize_pixel(b: u8) -> f64 {
    (f64::from(b) / 255.0 - 0.5) / 0.25
}

/// `[B, 32, 32, 3]` network input from HWC byte images.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a [u8]>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for img in images {
        data.extend(img.iter().map(|&b| normalize_pixel(b)));
        n += 1;
    }
    Tensor::new(vec![n, IMAGE_SIDE, IMAGE_SIDE, 3], data).expect("batch of 32x32x3 images")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row of `[B, K]` logits.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(model: &VmiNet, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    if data.num_classes() > model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk.iter().map(|&i| data.image(i)));
        let pred = predictions(&model.forward(&x)?);
        correct += chunk
            .iter()
            .zip(&pred)
            .filter(|(&i, &p)| data.label(i) == p)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn load_source(src: &DataSource, cfg: &TrainConfig, split: Split) -> Result<Dataset> {
    match src {
        DataSource::Cifar(p) => load_cifar_batches(p, split),
        DataSource::Synthetic => {
            let (n, stream) = match split {
                Split::Train => (cfg.synthetic_train, 0),
                _ => (cfg.synthetic_val, 1),
            };
            synthetic(
                n,
                cfg.synthetic_classes,
                cfg.seed.wrapping_mul(2).wrapping_add(stream),
                split,
            )
        }
    }
}

/// Training and validation sets described by `cfg`.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    let mut train = load_source(&cfg.data, cfg, Split::Train)?;
    if let Some(n) = cfg.subset {
        train = train.take(n);
    }
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let val = cfg
        .val_data
        .as_ref()
        .map(|v| load_source(v, cfg, Split::Val))
        .transpose()?;
    Ok((train, val))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

fn non_finite_report(g: &Graph, model: &VmiNet, epoch: usize, step: u64) -> Error {
    let where_ = match model.params().iter().find(|p| !p.value.is_finite()) {
        Some(p) => format!("parameter {}", p.name),
        None => match g.first_non_finite() {
            Some((v, op)) => format!("graph node {} ({op})", v.index()),
            None => "loss".into(),
        },
    };
    Error::NonFinite(format!(
        "loss is not finite at epoch {epoch}, step {step}; first non-finite tensor: {where_}"
    ))
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_acc.to_string(),
            r.val_acc.to_string(),
            format!("{:.6}", r.seconds),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a metrics CSV written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::format(
            0,
            format!("unexpected metrics header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                Error::format(
                    rec.position().map_or(0, |p| p.byte()),
                    format!("bad field {i}"),
                )
            })
        };
        out.push(EpochMetrics {
            epoch: f(0)? as usize,
            step: f(1)? as u64,
            lr: f(2)?,
            train_loss: f(3)?,
            train_acc: f(4)?,
            val_acc: f(5)?,
            seconds: f(6)?,
        });
    }
    Ok(out)
}

/// Runs the configured epochs, writing `metrics.csv` and `checkpoint.vmin`
/// under `cfg.output_dir`. A resumed run continues at the epoch after the
/// checkpoint and logs only the epochs it runs.
pub fn train(cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let (train_set, val_set) = load_data(cfg)?;
    let model_cfg = cfg.model_config(train_set.num_classes())?;
    let (mut model, mut opt, start) = match &cfg.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if *ck.model.config() != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            (ck.model, ck.opt, ck.epoch)
        }
        None => {
            let m = build_vminet(&model_cfg, cfg.seed)?;
            let o = OptState::new(m.params().iter().map(|p| p.value.shape()));
            (m, o, 0)
        }
    };
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(format!("creating {}", cfg.output_dir.display()), e))?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let checkpoint_path = cfg.output_dir.join(CHECKPOINT_FILE);

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let hyper = AdamW {
        weight_decay: cfg.weight_decay,
        betas: cfg.betas,
        eps: 1e-8,
    };
    let aug = AugmentConfig::default();
    let mut rows = Vec::new();

    for epoch in start + 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(opt.step, total_steps, cfg.warmup_iters, cfg.lr_base);
            let x = if cfg.augment {
                let imgs: Vec<Vec<u8>> = batch
                    .iter()
                    .map(|&i| augment(train_set.image(i), &mut rng, &aug))
                    .collect();
                batch_tensor(imgs.iter().map(Vec::as_slice))
            } else {
                batch_tensor(batch.iter().map(|&i| train_set.image(i)))
            };
            let targets: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();

            let mut g = Graph::new();
            let xv = g.constant(x);
            let f = model.forward_graph(&mut g, xv)?;
            let loss = g.cross_entropy(f.logits, &targets, cfg.label_smoothing)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(non_finite_report(&g, &model, epoch, opt.step));
            }
            let pred = predictions(g.value(f.logits));
            correct += pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
            loss_sum += lv * batch.len() as f64;

            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = f.params.iter().map(|&v| grads.wrt(&g, v)).collect();
            adamw_step(
                model.params_mut().iter_mut().map(|p| &mut p.value),
                &grads,
                &mut opt,
                lr,
                &hyper,
            )?;
            if let Some(p) = model.params().iter().find(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter {} became non-finite at epoch {epoch}, step {}",
                    p.name, opt.step
                )));
            }
        }
        let train_acc = correct as f64 / n as f64;
        let val_acc = evaluate(
            &model,
            val_set.as_ref().unwrap_or(&train_set),
            cfg.batch_size,
        )?;
        let row = EpochMetrics {
            epoch,
            step: opt.step,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc,
            val_acc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train_acc {:.4} val_acc {:.4} ({:.2}s)",
            row.train_loss,
            row.train_acc,
            row.val_acc,
            row.seconds
        );
        rows.push(row);
        write_metrics(&metrics_path, &rows)?;
        let stop =
            cfg.early_stop_acc.is_some_and(|a| train_acc >= a) || cfg.stop_after == Some(epoch);
        let periodic = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
        if periodic || stop || epoch == cfg.epochs {
            save_checkpoint(&model, &opt, epoch, &checkpoint_path)?;
        }
        if stop {
            break;
        }
    }
    if rows.is_empty() {
        write_metrics(&metrics_path, &rows)?;
    }
    Ok(History {
        epochs: rows,
        model,
        opt,
        metrics_path,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::IMAGE_BYTES;

    #[test]
    fn pixel_normalization_range() {
        assert_eq!(normalize_pixel(0), -2.0);
        assert_eq!(normalize_pixel(255), 2.0);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(
            predictions(&Tensor::from_rows(&[[0.0, -1.0], [2.0, 5.0]])),
            vec![0, 1]
        );
    }

    #[test]
    fn batch_tensor_shape() {
        let img = vec![0u8; IMAGE_BYTES];
        let t = batch_tensor([img.as_slice(), img.as_slice()]);
        assert_eq!(t.shape(), &[2, 32, 32, 3]);
    }
}
