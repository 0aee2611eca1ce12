//! CIFAR-10 binary batches and a synthetic labeled-shapes generator.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * 3;
/// One label byte followed by a channel-planar 32x32x3 image.
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images stored interleaved (`[N, 32, 32, 3]`, HWC) as raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, num_classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Config(format!(
                "{} image bytes for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// HWC bytes of sample `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

fn parse_records(
    bytes: &[u8],
    base_offset: u64,
    images: &mut Vec<u8>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    let whole = bytes.len() / RECORD_BYTES;
    if whole * RECORD_BYTES != bytes.len() {
        let offset = base_offset + (whole * RECORD_BYTES) as u64;
        return Err(Error::format(
            offset,
            format!(
                "truncated record: {} trailing bytes, expected {RECORD_BYTES}",
                bytes.len() - whole * RECORD_BYTES
            ),
        ));
    }
    const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if usize::from(label) >= CIFAR_CLASSES {
            return Err(Error::format(
                base_offset + (r * RECORD_BYTES) as u64,
                format!("label byte {label} outside 0..{CIFAR_CLASSES}"),
            ));
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..PLANE {
            images.extend_from_slice(&[planes[p], planes[PLANE + p], planes[2 * PLANE + p]]);
        }
    }
    Ok(())
}

/// Reads one CIFAR-10 binary file, or every `*.bin` file of a directory in
/// name order. Error offsets are relative to the offending file.
pub fn load_cifar_batches(path: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(format!("listing {}", path.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(format!("reading {}", f.display()), e))?;
        parse_records(&bytes, 0, &mut images, &mut labels).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", f.display()),
            },
            other => other,
        })?;
    }
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Parses CIFAR-10 records from memory.
pub fn parse_cifar_bytes(bytes: &[u8], split: Split) -> Result<Dataset> {
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    parse_records(bytes, 0, &mut images, &mut labels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Serializes to the CIFAR-10 binary layout.
pub fn to_cifar_bytes(d: &Dataset) -> Vec<u8> {
    const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = Vec::with_capacity(d.len() * RECORD_BYTES);
    for i in 0..d.len() {
        out.push(d.labels[i]);
        let img = d.image(i);
        for ch in 0..3 {
            out.extend((0..PLANE).map(|p| img[p * 3 + ch]));
        }
    }
    out
}

pub fn write_cifar_file(d: &Dataset, path: &Path) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&to_cifar_bytes(d))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Labeled geometric patterns on a noisy background. Class `c` fixes the
/// shape (`c % 3`: filled square, hollow ring, plus sign), the vertical half
/// it sits in (`(c / 3) % 2`) and the dominant color channel (`(c / 6) % 3`).
/// Position, size, color and noise vary per sample. Horizontal flips and
/// small crops preserve the class.
pub fn synthetic(n: usize, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if classes == 0 || classes > 18 {
        return Err(Error::Config(format!(
            "synthetic data supports 1..=18 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0u8; n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in images.chunks_exact_mut(IMAGE_BYTES).enumerate() {
        let c = if i < classes {
            i
        } else {
            rng.random_range(0..classes)
        };
        labels.push(c as u8);
        for v in img.iter_mut() {
            *v = rng.random_range(0..64);
        }
        let shape = c % 3;
        let lower = (c / 3) % 2 == 1;
        let dominant = (c / 6) % 3;
        let size = rng.random_range(7..=11usize);
        let x0 = rng.random_range(2..=IMAGE_SIDE - size - 2);
        let y_lo = if lower { IMAGE_SIDE / 2 + 1 } else { 2 };
        let y0 = rng.random_range(y_lo..=y_lo + IMAGE_SIDE / 2 - size - 3);
        let mut color = [0u8; 3];
        for (ch, col) in color.iter_mut().enumerate() {
            *col = if ch == dominant {
                rng.random_range(200..=255)
            } else {
                rng.random_range(60..=150)
            };
        }
        let mid = size / 2;
        for dy in 0..size {
            for dx in 0..size {
                let on = match shape {
                    0 => true,
                    1 => dy < 2 || dx < 2 || dy + 2 >= size || dx + 2 >= size,
                    _ => dy.abs_diff(mid) <= 1 || dx.abs_diff(mid) <= 1,
                };
                if on {
                    let o = ((y0 + dy) * IMAGE_SIDE + x0 + dx) * 3;
                    img[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Dataset::new(images, labels, classes, split)
}
