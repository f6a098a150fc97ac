//! RGB image buffer with intensities in `[0, 1]`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest accepted height or width in pixels.
pub const MIN_SIDE: usize = 8;

/// Row-major `H x W x 3` image with `f64` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: height * width * 3,
                actual: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    /// Builds an image from samples that may stray outside `[0, 1]`,
    /// clipping each one. NaN maps to 0.
    pub(crate) fn from_unclipped(
        height: usize,
        width: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self> {
        for v in pixels.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    /// Two-tone checkerboard with square cells of `cell` pixels; the top-left
    /// cell is black.
    pub fn checkerboard(height: usize, width: usize, cell: usize) -> Result<Self> {
        let cell = cell.max(1);
        Self::from_fn(height, width, |y, x, _| {
            if ((y / cell) + (x / cell)).is_multiple_of(2) {
                0.0
            } else {
                1.0
            }
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Photometric negative.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// Rec. 601 luma plane.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Canonical byte serialization: `height u32 LE ‖ width u32 LE ‖ samples f64 LE`.
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len() * 8);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Hex SHA-256 of [`Self::raw_bytes`].
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.raw_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = ::image::load_from_memory(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Writes an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::data("pixel buffer does not match dimensions"))?;
        buf.save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}
