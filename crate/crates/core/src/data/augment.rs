//! Training-time patch augmentation: brightness, quarter-turn rotation,
//! clamped offset, horizontal flip and crop-and-resize, in that order.

use ndarray::{s, Array2};
use rand::Rng;

use crate::data::resample::resize_bilinear;
use crate::data::Patch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub brightness: (f32, f32),
    pub rotate: bool,
    pub max_offset: i32,
    pub flip_prob: f64,
    /// Smallest retained fraction of each side during crop-and-resize.
    pub min_crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: (0.8, 1.2),
            rotate: true,
            max_offset: 16,
            flip_prob: 0.5,
            min_crop_fraction: 0.875,
        }
    }
}

impl AugmentConfig {
    /// Draws that never change a patch.
    pub fn identity() -> Self {
        AugmentConfig {
            brightness: (1.0, 1.0),
            rotate: false,
            max_offset: 0,
            flip_prob: 0.0,
            min_crop_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("brightness range {lo}..{hi}")));
        }
        if self.max_offset < 0 || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("offset must be >= 0 and flip probability in [0, 1]"));
        }
        if !(self.min_crop_fraction > 0.0 && self.min_crop_fraction <= 1.0) {
            return Err(Error::invalid(format!("crop fraction {}", self.min_crop_fraction)));
        }
        Ok(())
    }
}

/// One concrete set of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub brightness: f32,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    /// `(dy, dx)` content shift.
    pub offset: (i32, i32),
    pub flip: bool,
    /// `(rows, cols, top, left)` of the retained window.
    pub crop: (usize, usize, usize, usize),
}

impl AugmentDraw {
    pub fn identity(size: usize) -> Self {
        AugmentDraw {
            brightness: 1.0,
            quarter_turns: 0,
            offset: (0, 0),
            flip: false,
            crop: (size, size, 0, 0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(config: &AugmentConfig, size: usize, rng: &mut R) -> Self {
        let (lo, hi) = config.brightness;
        let brightness = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let quarter_turns = if config.rotate { rng.gen_range(0..4) } else { 0 };
        let m = config.max_offset;
        let offset = if m > 0 {
            (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
        } else {
            (0, 0)
        };
        let flip = config.flip_prob > 0.0 && rng.gen_bool(config.flip_prob);
        let min_side = ((size as f64 * config.min_crop_fraction).ceil() as usize).clamp(1, size);
        let mut side = || {
            let len = if min_side < size { rng.gen_range(min_side..=size) } else { size };
            let start = if len < size { rng.gen_range(0..=size - len) } else { 0 };
            (len, start)
        };
        let (rows, top) = side();
        let (cols, left) = side();
        AugmentDraw {
            brightness,
            quarter_turns,
            offset,
            flip,
            crop: (rows, cols, top, left),
        }
    }

    pub fn apply(&self, pixels: &Array2<f32>) -> Array2<f32> {
        let size = pixels.nrows();
        let mut img = pixels.mapv(|v| v * self.brightness);
        img = rotate_quarter(&img, self.quarter_turns);
        img = shift_clamped(&img, self.offset);
        if self.flip {
            img.invert_axis(ndarray::Axis(1));
            img = img.as_standard_layout().to_owned();
        }
        let (rows, cols, top, left) = self.crop;
        if (rows, cols) != (size, size) {
            let window = img.slice(s![top..top + rows, left..left + cols]).to_owned();
            img = resize_bilinear(&window, size, size);
        }
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        img
    }
}

/// Counter-clockwise rotation of a square image by `turns` quarter turns.
pub fn rotate_quarter(img: &Array2<f32>, turns: u8) -> Array2<f32> {
    let n = img.nrows();
    match turns % 4 {
        0 => img.clone(),
        1 => Array2::from_shape_fn((n, n), |(r, c)| img[[c, n - 1 - r]]),
        2 => Array2::from_shape_fn((n, n), |(r, c)| img[[n - 1 - r, n - 1 - c]]),
        _ => Array2::from_shape_fn((n, n), |(r, c)| img[[n - 1 - c, r]]),
    }
}

/// Moves content by `(dy, dx)`, filling uncovered pixels from the nearest
/// edge.
pub fn shift_clamped(img: &Array2<f32>, (dy, dx): (i32, i32)) -> Array2<f32> {
    let (h, w) = img.dim();
    if (dy, dx) == (0, 0) {
        return img.clone();
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = (r as i64 - dy as i64).clamp(0, h as i64 - 1) as usize;
        let sc = (c as i64 - dx as i64).clamp(0, w as i64 - 1) as usize;
        img[[sr, sc]]
    })
}

/// Augments a square patch; the label and provenance are carried over.
pub fn augment<R: Rng + ?Sized>(patch: &Patch, config: &AugmentConfig, rng: &mut R) -> Patch {
    let draw = AugmentDraw::sample(config, patch.size(), rng);
    Patch {
        pixels: draw.apply(&patch.pixels),
        ..patch.clone()
    }
}
