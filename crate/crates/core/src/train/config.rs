//! Plain-text `key = value` training configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{AttentionForm, MaskFamily};
use crate::backbone::{hybrid_schedule, Variant, VmiNetConfig, DEFAULT_DEPTHS};
use crate::error::{Error, Result};

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// CIFAR-10 binary file or directory of `*.bin` files.
    Cifar(PathBuf),
    /// Generated shapes; sizes and class count come from the `synthetic_*` keys.
    Synthetic,
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::Config("empty data path".into())),
            "synthetic" => Ok(DataSource::Synthetic),
            p => Ok(DataSource::Cifar(PathBuf::from(p))),
        }
    }
}

/// Per-block mask assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSchedule {
    /// Banded in the first two stages, alternating lower-triangular and
    /// banded afterwards.
    Hybrid,
    Uniform(MaskFamily),
}

impl FromStr for MaskSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "hybrid" {
            Ok(MaskSchedule::Hybrid)
        } else {
            Ok(MaskSchedule::Uniform(s.parse()?))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub warmup_iters: u64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    pub variant: Variant,
    pub data: DataSource,
    /// Validation data. When absent, validation accuracy is measured on the
    /// (unaugmented) training set.
    pub val_data: Option<DataSource>,
    pub output_dir: PathBuf,
    /// Use only the first `n` training samples.
    pub subset: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_val: usize,
    pub synthetic_classes: usize,
    /// Width and expansion for the custom variant.
    pub base_width: usize,
    pub expansion: usize,
    pub stage_depths: Option<[usize; 4]>,
    pub masks: MaskSchedule,
    pub conv_only: bool,
    pub stem_patch: usize,
    pub attention_form: AttentionForm,
    pub augment: bool,
    /// Save a checkpoint every `n` epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop once running train accuracy reaches this fraction.
    pub early_stop_acc: Option<f64>,
    /// End this invocation after the given epoch, checkpointing it. The
    /// schedule still spans `epochs`, so a later resume continues the same run.
    pub stop_after: Option<usize>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 2e-3,
            weight_decay: 0.025,
            betas: (0.9, 0.999),
            epochs: 10,
            warmup_iters: 20,
            batch_size: 32,
            label_smoothing: 0.1,
            seed: 0,
            variant: Variant::Custom,
            data: DataSource::Synthetic,
            val_data: None,
            output_dir: PathBuf::from("run"),
            subset: None,
            synthetic_train: 512,
            synthetic_val: 256,
            synthetic_classes: 4,
            base_width: 8,
            expansion: 2,
            stage_depths: None,
            masks: MaskSchedule::Hybrid,
            conv_only: false,
            stem_patch: 2,
            attention_form: AttentionForm::Matrix,
            augment: true,
            checkpoint_every: 0,
            early_stop_acc: None,
            stop_after: None,
            resume: None,
        }
    }
}

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("lr_base", "peak learning rate (> 0)"),
    ("weight_decay", "decoupled weight decay, default 0.025"),
    ("beta1", "first-moment decay, default 0.9"),
    ("beta2", "second-moment decay, default 0.999"),
    ("epochs", "number of epochs"),
    ("warmup_iters", "linear warmup steps"),
    ("batch_size", "minibatch size"),
    ("label_smoothing", "smoothing eps in [0, 1), default 0.1"),
    ("seed", "seed for init, data order and augmentation"),
    ("variant", "ti | xs | s | b | custom"),
    ("data", "CIFAR-10 binary file or directory, or `synthetic`"),
    (
        "val_data",
        "validation file, directory or `synthetic`; default: training set",
    ),
    (
        "output_dir",
        "directory for metrics.csv and checkpoint.vmin",
    ),
    ("subset", "use only the first n training samples"),
    ("synthetic_train", "synthetic training samples, default 512"),
    ("synthetic_val", "synthetic validation samples, default 256"),
    ("synthetic_classes", "synthetic class count, default 4"),
    ("base_width", "stage-1 width C for the custom variant"),
    ("expansion", "Q/K expansion k for the custom variant"),
    ("stage_depths", "four comma-separated block counts"),
    ("masks", "hybrid | lower | banded | block | none"),
    (
        "conv_only",
        "replace attention blocks with the conv-only block",
    ),
    ("stem_patch", "stem patch size, default 2 for 32x32 inputs"),
    ("attention_form", "matrix | recurrent"),
    ("augment", "random crop and flip, default true"),
    (
        "checkpoint_every",
        "epochs between checkpoints, 0 for final only",
    ),
    (
        "early_stop_acc",
        "stop once running train accuracy reaches this fraction",
    ),
    (
        "stop_after",
        "end this invocation after epoch n; the schedule still spans `epochs`",
    ),
    ("resume", "checkpoint to continue from"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse {key} = {v:?} as a boolean"
        ))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr_base" => self.lr_base = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.betas.0 = parse(key, v)?,
            "beta2" => self.betas.1 = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "data" => self.data = v.parse()?,
            "val_data" => self.val_data = Some(v.parse()?),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "subset" => self.subset = Some(parse(key, v)?),
            "synthetic_train" => self.synthetic_train = parse(key, v)?,
            "synthetic_val" => self.synthetic_val = parse(key, v)?,
            "synthetic_classes" => self.synthetic_classes = parse(key, v)?,
            "base_width" => self.base_width = parse(key, v)?,
            "expansion" => self.expansion = parse(key, v)?,
            "stage_depths" => {
                let d = v
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                let d: [usize; 4] = d.try_into().map_err(|_| {
                    Error::Config(format!("stage_depths needs 4 entries, got {v:?}"))
                })?;
                self.stage_depths = Some(d);
            }
            "masks" => self.masks = v.parse()?,
            "conv_only" => self.conv_only = parse_bool(key, v)?,
            "stem_patch" => self.stem_patch = parse(key, v)?,
            "attention_form" => {
                self.attention_form = match v {
                    "matrix" => AttentionForm::Matrix,
                    "recurrent" => AttentionForm::Recurrent,
                    _ => return Err(Error::Config(format!("unknown attention_form {v:?}"))),
                }
            }
            "augment" => self.augment = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "early_stop_acc" => self.early_stop_acc = Some(parse(key, v)?),
            "stop_after" => self.stop_after = Some(parse(key, v)?),
            "resume" => self.resume = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; unknown or repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    i + 1
                )));
            }
            seen.push(k);
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse_str(&text)
    }

    /// Round-trips through [`TrainConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let src = |d: &DataSource| match d {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Cifar(p) => p.display().to_string(),
        };
        let masks = match self.masks {
            MaskSchedule::Hybrid => "hybrid".to_string(),
            MaskSchedule::Uniform(f) => f.to_string(),
        };
        let form = match self.attention_form {
            AttentionForm::Matrix => "matrix",
            AttentionForm::Recurrent => "recurrent",
        };
        let _ = writeln!(s, "lr_base = {}", self.lr_base);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "beta1 = {}", self.betas.0);
        let _ = writeln!(s, "beta2 = {}", self.betas.1);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "warmup_iters = {}", self.warmup_iters);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "label_smoothing = {}", self.label_smoothing);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "data = {}", src(&self.data));
        if let Some(v) = &self.val_data {
            let _ = writeln!(s, "val_data = {}", src(v));
        }
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        if let Some(n) = self.subset {
            let _ = writeln!(s, "subset = {n}");
        }
        let _ = writeln!(s, "synthetic_train = {}", self.synthetic_train);
        let _ = writeln!(s, "synthetic_val = {}", self.synthetic_val);
        let _ = writeln!(s, "synthetic_classes = {}", self.synthetic_classes);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "expansion = {}", self.expansion);
        if let Some(d) = self.stage_depths {
            let _ = writeln!(s, "stage_depths = {},{},{},{}", d[0], d[1], d[2], d[3]);
        }
        let _ = writeln!(s, "masks = {masks}");
        let _ = writeln!(s, "conv_only = {}", self.conv_only);
        let _ = writeln!(s, "stem_patch = {}", self.stem_patch);
        let _ = writeln!(s, "attention_form = {form}");
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        if let Some(a) = self.early_stop_acc {
            let _ = writeln!(s, "early_stop_acc = {a}");
        }
        if let Some(n) = self.stop_after {
            let _ = writeln!(s, "stop_after = {n}");
        }
        if let Some(r) = &self.resume {
            let _ = writeln!(s, "resume = {}", r.display());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if !(self.lr_base > 0.0) {
            p.push(format!("lr_base must be > 0, got {}", self.lr_base));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            p.push(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if !(self.weight_decay >= 0.0) {
            p.push("weight_decay must be non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            p.push(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            p.push("epochs must be positive".into());
        }
        if self.stop_after.is_some_and(|n| n == 0 || n > self.epochs) {
            p.push(format!("stop_after must lie in 1..={}", self.epochs));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Backbone for 32x32 inputs with `num_classes` outputs.
    pub fn model_config(&self, num_classes: usize) -> Result<VmiNetConfig> {
        let (c, k) = self
            .variant
            .widths()
            .unwrap_or((self.base_width, self.expansion));
        let depths = self
            .stage_depths
            .unwrap_or(if self.variant == Variant::Custom {
                [1, 1, 1, 1]
            } else {
                DEFAULT_DEPTHS
            });
        let mut cfg = VmiNetConfig::desk(c, k, depths, num_classes);
        cfg.variant = self.variant;
        cfg.stem_patch = self.stem_patch;
        cfg.ablation_conv_only = self.conv_only;
        cfg.attention_form = self.attention_form;
        cfg.mask_schedule = match self.masks {
            MaskSchedule::Hybrid => hybrid_schedule(depths),
            MaskSchedule::Uniform(f) => vec![f; depths.iter().sum()],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
