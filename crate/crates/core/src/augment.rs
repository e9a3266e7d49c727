//! Joint training-time augmentation for image and mask.
//!
//! The geometric draws are sampled once per sample and applied to both the
//! image and its mask, so attention supervision stays aligned with the
//! pixels it describes. Order of operations: shifted crop, horizontal
//! flip, random erase. The erase patch zeroes the mask as well as the
//! image, which tells the attention target that the erased region carries
//! no foreground anymore.
//!
//! Masks stay exactly binary through every step: crops fill with zeros,
//! flips permute, erases write zeros.

use rand::Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding for the shifted crop, as a fraction of each side length.
const CROP_PAD_FRACTION: f64 = 0.125;
const FLIP_PROBABILITY: f64 = 0.5;
const ERASE_PROBABILITY: f64 = 0.5;
/// Erase patch area range, as a fraction of the image area.
const ERASE_AREA: (f64, f64) = (0.02, 0.2);
/// Erase patch aspect-ratio range (height over width).
const ERASE_RATIO: (f64, f64) = (0.3, 3.3);
const ERASE_ATTEMPTS: usize = 10;

/// One set of augmentation decisions. Public fields so tests can construct
/// exact transforms; normal use samples via [`sample_draw`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    /// Crop window offsets into the zero-padded canvas, in [0, 2 * pad].
    /// A value equal to the padding leaves the axis unshifted.
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
    /// Erase rectangle (x, y, width, height) in output coordinates.
    pub erase: Option<(usize, usize, usize, usize)>,
}

pub fn pad_for(side: usize) -> usize {
    (side as f64 * CROP_PAD_FRACTION).round() as usize
}

/// Samples the augmentation decisions for one HxW sample.
pub fn sample_draw<R: Rng>(height: usize, width: usize, rng: &mut R) -> AugmentDraw {
    let (pad_y, pad_x) = (pad_for(height), pad_for(width));
    let dy = rng.gen_range(0..=2 * pad_y);
    let dx = rng.gen_range(0..=2 * pad_x);
    let flip = rng.gen_bool(FLIP_PROBABILITY);
    let erase = if rng.gen_bool(ERASE_PROBABILITY) {
        sample_erase(height, width, rng)
    } else {
        None
    };
    AugmentDraw {
        dx,
        dy,
        flip,
        erase,
    }
}

/// Draws an erase rectangle with area and aspect ratio in the configured
/// ranges. Oversized draws are retried a few times; if none fits, the
/// sample goes through without an erase.
fn sample_erase<R: Rng>(height: usize, width: usize, rng: &mut R) -> Option<(usize, usize, usize, usize)> {
    let area = (height * width) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let target = rng.gen_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let ratio = rng.gen_range(ERASE_RATIO.0..ERASE_RATIO.1);
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > height || ew > width {
            continue;
        }
        let ey = rng.gen_range(0..=height - eh);
        let ex = rng.gen_range(0..=width - ew);
        return Some((ex, ey, ew, eh));
    }
    None
}

/// Applies a draw to one sample. The image and the mask (when present) get
/// the same geometry.
pub fn apply_draw(sample: &Sample, draw: &AugmentDraw) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (pad_y, pad_x) = (pad_for(h), pad_for(w));
    if draw.dy > 2 * pad_y || draw.dx > 2 * pad_x {
        return Err(Error::config(format!(
            "crop offset ({}, {}) exceeds the padded range ({}, {})",
            draw.dx,
            draw.dy,
            2 * pad_x,
            2 * pad_y
        )));
    }
    if let Some((ex, ey, ew, eh)) = draw.erase {
        if ex + ew > w || ey + eh > h || ew == 0 || eh == 0 {
            return Err(Error::config(format!(
                "erase rectangle {}x{} at ({ex}, {ey}) leaves the {w}x{h} image",
                ew, eh
            )));
        }
    }

    let channels = sample.image.shape()[0];
    let mut planes: Vec<&[f64]> = Vec::with_capacity(channels + 1);
    for c in 0..channels {
        planes.push(&sample.image.data()[c * h * w..(c + 1) * h * w]);
    }
    if let Some(mask) = &sample.mask {
        planes.push(mask.data());
    }

    let mut out_planes: Vec<Vec<f64>> = planes
        .iter()
        .map(|plane| transform_plane(plane, h, w, pad_y, pad_x, draw))
        .collect();

    let mask = if sample.mask.is_some() {
        let mask_plane = out_planes.pop().expect("mask plane pushed above");
        Some(Tensor::new(&[h, w], mask_plane)?)
    } else {
        None
    };
    let image = Tensor::new(&[channels, h, w], out_planes.concat())?;
    Ok(Sample {
        image,
        mask,
        label: sample.label,
    })
}

/// Crop, flip and erase one HxW plane.
fn transform_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    pad_y: usize,
    pad_x: usize,
    draw: &AugmentDraw,
) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        // Position in the padded canvas, then back into source coordinates.
        let sy = (y + draw.dy) as isize - pad_y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + draw.dx) as isize - pad_x as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let ox = if draw.flip { w - 1 - x } else { x };
            out[y * w + ox] = plane[sy as usize * w + sx as usize];
        }
    }
    if let Some((ex, ey, ew, eh)) = draw.erase {
        for y in ey..ey + eh {
            out[y * w + ex..y * w + ex + ew].fill(0.0);
        }
    }
    out
}

/// Samples a draw and applies it.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let draw = sample_draw(sample.height(), sample.width(), rng);
    apply_draw(sample, &draw)
}
