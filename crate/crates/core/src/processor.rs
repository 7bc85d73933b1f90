//! Image front end: 8-bit quantization and 4×4 patch extraction.
//!
//! Deploy mode quantizes pixels to the 8-bit grid before patching — exactly
//! what happens when a protected image is written to disk and read back.
//! Differentiable mode produces bit-identical forward values but routes
//! gradients through a straight-through estimator (see `tape::quantize_ste`),
//! so pixel gradients are defined while the released artifact stays faithful.

use alloc::vec::Vec;

use crate::tensor::Mat;

pub const IMG_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMG_SIDE * IMG_SIDE * CHANNELS;
pub const PATCH: usize = 4;
pub const PATCH_GRID: usize = IMG_SIDE / PATCH; // 8 per axis
pub const N_PATCHES: usize = PATCH_GRID * PATCH_GRID; // 64
pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS; // 48

/// How pixels reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcMode {
    /// Quantize up front; pixels are not a gradient leaf.
    Deploy,
    /// Same forward values, straight-through gradient to the raw pixels.
    Differentiable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageError {
    WrongLength { got: usize },
    OutOfRange { index: usize, value_milli: i64 },
}

impl core::fmt::Display for ImageError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ImageError::WrongLength { got } => {
                write!(f, "image must hold {} values, got {}", PIXELS, got)
            }
            ImageError::OutOfRange { index, value_milli } => {
                write!(f, "pixel {} out of [0,1] (~{} / 1000)", index, value_milli)
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ImageError {}

/// 32×32 RGB image, HWC row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self, ImageError> {
        if pixels.len() != PIXELS {
            return Err(ImageError::WrongLength { got: pixels.len() });
        }
        for (i, &p) in pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(ImageError::OutOfRange {
                    index: i,
                    value_milli: (p * 1000.0) as i64,
                });
            }
        }
        Ok(Image { pixels })
    }

    pub fn zeros() -> Self {
        Image { pixels: alloc::vec![0.0; PIXELS] }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * IMG_SIDE + x) * CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * IMG_SIDE + x) * CHANNELS + c] = v;
    }
}

/// Round to nearest integer, ties to even.
pub fn round_half_even(v: f64) -> f64 {
    let f = libm::floor(v);
    let d = v - f;
    if d < 0.5 {
        f
    } else if d > 0.5 {
        f + 1.0
    } else if (f as i64) % 2 == 0 {
        f
    } else {
        f + 1.0
    }
}

/// Snap a unit-range value to the 8-bit grid k/255.
pub fn quantize_unit(x: f64) -> f64 {
    round_half_even(x * 255.0) / 255.0
}

pub fn quantize_pixels(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|&p| quantize_unit(p)).collect()
}

/// Flat pixel indices of patch `p`, in feature order (dy, dx, channel).
pub fn patch_pixel_indices(p: usize) -> [usize; PATCH_DIM] {
    debug_assert!(p < N_PATCHES);
    let py = p / PATCH_GRID;
    let px = p % PATCH_GRID;
    let mut out = [0usize; PATCH_DIM];
    let mut i = 0;
    for dy in 0..PATCH {
        for dx in 0..PATCH {
            for c in 0..CHANNELS {
                out[i] = ((py * PATCH + dy) * IMG_SIDE + px * PATCH + dx) * CHANNELS + c;
                i += 1;
            }
        }
    }
    out
}

/// Rearrange flat pixels into the 64×48 patch matrix.
pub fn patchify(pixels: &[f64]) -> Mat {
    debug_assert_eq!(pixels.len(), PIXELS);
    let mut out = Mat::zeros(N_PATCHES, PATCH_DIM);
    for p in 0..N_PATCHES {
        let idx = patch_pixel_indices(p);
        let row = out.row_mut(p);
        for (j, &src) in idx.iter().enumerate() {
            row[j] = pixels[src];
        }
    }
    out
}

/// Quantize then patchify. Both modes produce the same values; the mode only
/// matters once gradients are requested (see the traced forward in `model`).
pub fn process_image(img: &Image, _mode: ProcMode) -> Mat {
    patchify(&quantize_pixels(img.pixels()))
}
