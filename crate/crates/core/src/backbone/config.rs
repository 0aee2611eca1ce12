use std::fmt;
use std::str::FromStr;

use crate::attention::{build_mask, AttentionForm, MaskFamily};
use crate::error::{Error, Result};

/// Total block count shared by all named variants.
pub const TOTAL_BLOCKS: usize = 24;

/// Default per-stage depth split.
pub const DEFAULT_DEPTHS: [usize; 4] = [3, 3, 15, 3];

/// Named backbone sizes, plus `Custom` for reduced desk-scale models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Ti,
    Xs,
    S,
    B,
    Custom,
}

impl Variant {
    pub const NAMED: [Variant; 4] = [Variant::Ti, Variant::Xs, Variant::S, Variant::B];

    /// `(base width C, expansion k)`.
    pub fn widths(self) -> Option<(usize, usize)> {
        match self {
            Variant::Ti => Some((24, 2)),
            Variant::Xs => Some((48, 2)),
            Variant::S => Some((48, 4)),
            Variant::B => Some((96, 2)),
            Variant::Custom => None,
        }
    }

    /// Published parameter budget in millions.
    pub fn reported_params_millions(self) -> Option<f64> {
        match self {
            Variant::Ti => Some(2.0),
            Variant::Xs => Some(7.4),
            Variant::S => Some(13.3),
            Variant::B => Some(28.4),
            Variant::Custom => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Ti => 0,
            Variant::Xs => 1,
            Variant::S => 2,
            Variant::B => 3,
            Variant::Custom => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [
            Variant::Ti,
            Variant::Xs,
            Variant::S,
            Variant::B,
            Variant::Custom,
        ]
        .get(usize::from(c))
        .copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ti => "ti",
            Variant::Xs => "xs",
            Variant::S => "s",
            Variant::B => "b",
            Variant::Custom => "custom",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ti" => Ok(Variant::Ti),
            "xs" => Ok(Variant::Xs),
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Backbone descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct VmiNetConfig {
    pub variant: Variant,
    pub base_width: usize,
    /// Q/K width multiplier: `D = expansion * stage width`.
    pub expansion: usize,
    pub stage_depths: [usize; 4],
    /// One mask family per block, in network order.
    pub mask_schedule: Vec<MaskFamily>,
    pub input_resolution: (usize, usize),
    pub num_classes: usize,
    /// Replace every attention block with the conv-only ablation block.
    pub ablation_conv_only: bool,
    /// Stem patch size (stride); later downsamples are always 2.
    pub stem_patch: usize,
    pub attention_form: AttentionForm,
    pub kernel_size: usize,
    pub norm_eps: f64,
}

impl VmiNetConfig {
    /// A named variant at 224x224 with 1000 classes and the hybrid mask schedule.
    pub fn variant(v: Variant) -> Result<Self> {
        let (c, k) = v
            .widths()
            .ok_or_else(|| Error::Config("custom variant has no preset widths".into()))?;
        Ok(VmiNetConfig {
            variant: v,
            base_width: c,
            expansion: k,
            stage_depths: DEFAULT_DEPTHS,
            mask_schedule: hybrid_schedule(DEFAULT_DEPTHS),
            input_resolution: (224, 224),
            num_classes: 1000,
            ablation_conv_only: false,
            stem_patch: 4,
            attention_form: AttentionForm::Matrix,
            kernel_size: 3,
            norm_eps: 1e-6,
        })
    }

    /// Reduced model for 32x32 inputs with a stride-2 stem, so stage 4 still
    /// sees a 2x2 grid.
    pub fn desk(
        base_width: usize,
        expansion: usize,
        stage_depths: [usize; 4],
        num_classes: usize,
    ) -> Self {
        VmiNetConfig {
            variant: Variant::Custom,
            base_width,
            expansion,
            stage_depths,
            mask_schedule: hybrid_schedule(stage_depths),
            input_resolution: (32, 32),
            num_classes,
            ablation_conv_only: false,
            stem_patch: 2,
            attention_form: AttentionForm::Matrix,
            kernel_size: 3,
            norm_eps: 1e-6,
        }
    }

    /// Same mask family for every block.
    pub fn with_uniform_mask(mut self, family: MaskFamily) -> Self {
        self.mask_schedule = vec![family; self.total_blocks()];
        self
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let c = self.base_width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Spatial extents after the stem and each downsample.
    pub fn stage_resolutions(&self) -> [(usize, usize); 4] {
        let (h, w) = self.input_resolution;
        let (h, w) = (h / self.stem_patch.max(1), w / self.stem_patch.max(1));
        [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8)]
    }

    /// Token count `L = H * W` of each stage.
    pub fn stage_tokens(&self) -> [usize; 4] {
        self.stage_resolutions().map(|(h, w)| h * w)
    }

    /// Checks every invariant and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Some((c, k)) = self.variant.widths() {
            if self.total_blocks() != TOTAL_BLOCKS {
                problems.push(format!(
                    "stage depths {:?} sum to {}, named variants need {TOTAL_BLOCKS}",
                    self.stage_depths,
                    self.total_blocks()
                ));
            }
            if (self.base_width, self.expansion) != (c, k) {
                problems.push(format!(
                    "variant {} needs (C, k) = ({c}, {k}), got ({}, {})",
                    self.variant, self.base_width, self.expansion
                ));
            }
        }
        if self.stage_depths.contains(&0) {
            problems.push(format!(
                "every stage needs at least one block, got {:?}",
                self.stage_depths
            ));
        }
        if self.base_width == 0 || self.expansion == 0 || self.num_classes == 0 {
            problems.push("base width, expansion and class count must be positive".into());
        }
        if self.mask_schedule.len() != self.total_blocks() {
            problems.push(format!(
                "mask schedule has {} entries for {} blocks",
                self.mask_schedule.len(),
                self.total_blocks()
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            problems.push(format!(
                "depthwise kernel size {} must be odd",
                self.kernel_size
            ));
        }
        if !(self.norm_eps > 0.0) {
            problems.push("norm eps must be positive".into());
        }
        let (h, w) = self.input_resolution;
        let stride = self.stem_patch * 8;
        if self.stem_patch == 0 || h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            problems.push(format!(
                "input {h}x{w} must be a positive multiple of stem patch {} x 8",
                self.stem_patch
            ));
        } else if problems.is_empty() {
            let widths = self.stage_widths();
            let tokens = self.stage_tokens();
            for (i, fam) in self.mask_schedule.iter().enumerate() {
                let s = self.stage_of_block(i);
                let d = self.expansion * widths[s];
                if !self.ablation_conv_only {
                    if let Err(e) = build_mask(fam.resolve(tokens[s], d), tokens[s], d) {
                        problems.push(format!("block {i} (stage {}): {e}", s + 1));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Stage index (0-based) of the `i`-th block in network order.
    pub fn stage_of_block(&self, i: usize) -> usize {
        let mut acc = 0;
        for (s, &d) in self.stage_depths.iter().enumerate() {
            acc += d;
            if i < acc {
                return s;
            }
        }
        3
    }
}

/// Banded masks in stages 1-2; stages 3-4 alternate lower-triangular and
/// banded, starting with lower-triangular in each stage.
pub fn hybrid_schedule(depths: [usize; 4]) -> Vec<MaskFamily> {
    let mut out = Vec::with_capacity(depths.iter().sum());
    for (s, &d) in depths.iter().enumerate() {
        for b in 0..d {
            out.push(if s < 2 || b % 2 == 1 {
                MaskFamily::Banded
            } else {
                MaskFamily::LowerTriangular
            });
        }
    }
    out
}
