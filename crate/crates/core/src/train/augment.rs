use rand::Rng;

use super::data::IMAGE_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    /// Zero padding on each side before the random crop.
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 4, flip: true }
    }
}

/// Crops a `32x32` window at offset `(oy, ox)` out of the image zero-padded
/// by `pad` on every side, then optionally mirrors it horizontally.
pub fn crop_flip(img: &[u8], pad: usize, oy: usize, ox: usize, flip: bool) -> Vec<u8> {
    let s = IMAGE_SIDE;
    let mut out = vec![0u8; img.len()];
    for y in 0..s {
        let sy = (y + oy).checked_sub(pad).filter(|&v| v < s);
        let Some(sy) = sy else { continue };
        for x in 0..s {
            let sx = (x + ox).checked_sub(pad).filter(|&v| v < s);
            let Some(sx) = sx else { continue };
            let dx = if flip { s - 1 - x } else { x };
            let (o, i) = ((y * s + dx) * 3, (sy * s + sx) * 3);
            out[o..o + 3].copy_from_slice(&img[i..i + 3]);
        }
    }
    out
}

/// Pad-then-random-crop to the original size, then a horizontal flip with
/// probability 0.5. Draws exactly three values from `rng`.
pub fn augment<R: Rng + ?Sized>(img: &[u8], rng: &mut R, cfg: &AugmentConfig) -> Vec<u8> {
    let oy = rng.random_range(0..=2 * cfg.pad);
    let ox = rng.random_range(0..=2 * cfg.pad);
    let flip = rng.random_bool(0.5) && cfg.flip;
    crop_flip(img, cfg.pad, oy, ox, flip)
}
