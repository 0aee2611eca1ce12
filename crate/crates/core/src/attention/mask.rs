use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Concrete mask family with its size parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Row `t` keeps columns `n <= t`; rows past the diagonal are all ones.
    LowerTriangular,
    /// Causal band of `bandwidth` columns ending at the row's diagonal column.
    Banded { bandwidth: usize },
    /// Rows split into contiguous groups, each owning `block` adjacent columns.
    BlockDiagonal { block: usize },
    /// All ones.
    NoMask,
}

/// Mask family without sizes, as used in per-block schedules. Sizes are
/// resolved against each stage's token count and width by [`MaskFamily::resolve`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskFamily {
    LowerTriangular,
    Banded,
    BlockDiagonal,
    None,
}

impl MaskFamily {
    /// Default sizing with `B = min(L, D)`: bandwidth `B/2` and 2-column blocks.
    pub fn resolve(self, l: usize, d: usize) -> MaskKind {
        let b = l.min(d);
        match self {
            MaskFamily::LowerTriangular => MaskKind::LowerTriangular,
            MaskFamily::Banded => MaskKind::Banded {
                bandwidth: (b / 2).max(1),
            },
            MaskFamily::BlockDiagonal => MaskKind::BlockDiagonal { block: 2 },
            MaskFamily::None => MaskKind::NoMask,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            MaskFamily::None => 0,
            MaskFamily::LowerTriangular => 1,
            MaskFamily::Banded => 2,
            MaskFamily::BlockDiagonal => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => MaskFamily::None,
            1 => MaskFamily::LowerTriangular,
            2 => MaskFamily::Banded,
            3 => MaskFamily::BlockDiagonal,
            _ => return None,
        })
    }
}

impl fmt::Display for MaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskFamily::LowerTriangular => "lower",
            MaskFamily::Banded => "banded",
            MaskFamily::BlockDiagonal => "block",
            MaskFamily::None => "none",
        })
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lower" | "lower_triangular" => Ok(MaskFamily::LowerTriangular),
            "banded" => Ok(MaskFamily::Banded),
            "block" | "block_diagonal" => Ok(MaskFamily::BlockDiagonal),
            "none" | "nomask" => Ok(MaskFamily::None),
            other => Err(Error::Config(format!("unknown mask family {other:?}"))),
        }
    }
}

/// `L x D` binary matrix applied elementwise inside the context sum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    kind: MaskKind,
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl Mask {
    /// Wraps an explicit 0/1 matrix. Every row must keep at least one column.
    pub fn from_bits(kind: MaskKind, rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[bits.len()]));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Config("mask entries must be 0 or 1".into()));
        }
        if let Some(t) = (0..rows).find(|&t| bits[t * cols..(t + 1) * cols].iter().all(|&b| b == 0))
        {
            return Err(Error::Config(format!("mask row {t} masks every feature")));
        }
        Ok(Mask {
            kind,
            rows,
            cols,
            bits,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Token count `L`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Feature width `D`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, t: usize, n: usize) -> bool {
        self.bits[t * self.cols + n] == 1
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.bits[t * self.cols..(t + 1) * self.cols]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.rows, self.cols], |i| f64::from(self.bits[i]))
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().map(|&b| usize::from(b)).sum()
    }
}

/// Builds the `L x D` mask of the given family.
///
/// Non-square conventions (0-based `t`, `n`):
/// - banded: `d(t) = ceil((t+1) * D / L) - 1` is the row's diagonal column and
///   the row keeps `n` with `0 <= d(t) - n < bandwidth`;
/// - block diagonal: `G = min(L, D) / block` groups of `ceil(L / G)` rows,
///   group `g` keeping columns `g*block .. (g+1)*block`.
pub fn build_mask(kind: MaskKind, l: usize, d: usize) -> Result<Mask> {
    if l == 0 || d == 0 {
        return Err(Error::Config(format!(
            "mask needs L, D >= 1, got L={l}, D={d}"
        )));
    }
    let b = l.min(d);
    let mut bits = vec![0u8; l * d];
    match kind {
        MaskKind::NoMask => bits.fill(1),
        MaskKind::LowerTriangular => {
            for t in 0..l {
                for n in 0..=t.min(d - 1) {
                    bits[t * d + n] = 1;
                }
            }
        }
        MaskKind::Banded { bandwidth } => {
            if b < 2 {
                return Err(Error::Config(format!(
                    "banded mask needs min(L, D) >= 2, got {b}"
                )));
            }
            if bandwidth == 0 || bandwidth > d {
                return Err(Error::Config(format!(
                    "banded mask bandwidth {bandwidth} outside 1..={d}"
                )));
            }
            for t in 0..l {
                let diag = ((t + 1) * d).div_ceil(l) - 1;
                let lo = (diag + 1).saturating_sub(bandwidth);
                for n in lo..=diag {
                    bits[t * d + n] = 1;
                }
            }
        }
        MaskKind::BlockDiagonal { block } => {
            if b < 2 {
                return Err(Error::Config(format!(
                    "block-diagonal mask needs min(L, D) >= 2, got {b}"
                )));
            }
            if block == 0 || block > b {
                return Err(Error::Config(format!("block size {block} outside 1..={b}")));
            }
            let groups = b / block;
            let per_group = l.div_ceil(groups);
            for t in 0..l {
                let g = (t / per_group).min(groups - 1);
                for n in g * block..(g + 1) * block {
                    bits[t * d + n] = 1;
                }
            }
        }
    }
    Mask::from_bits(kind, l, d, bits)
}
