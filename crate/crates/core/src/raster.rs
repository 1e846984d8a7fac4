//! Raster types shared by the whole pipeline.
//!
//! All grids are row-major. Gray intensities are unit-normalized: 8-bit
//! inputs are divided by 255 on load and multiplied back (rounded) on save.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{KistError, Result};

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(KistError::InvalidRaster(format!(
            "zero-sized raster {width}x{height}"
        )));
    }
    if width * height != len {
        return Err(KistError::InvalidRaster(format!(
            "data length {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KistError::InvalidRaster(format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        Ok(Self::from_luma8(&img))
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| quantize_u8(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma8().save(path.as_ref())?;
        Ok(())
    }

    /// Rounds every intensity onto the 8-bit grid, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| f64::from(quantize_u8(v)) / 255.0)
                .collect(),
        }
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary mask with values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(KistError::InvalidRaster(format!(
                "mask value {v} is not 0 or 1"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    /// Number of 1-pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        mask_logic(self, other, MaskOp::And)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        mask_logic(self, other, MaskOp::Or)
    }

    /// `true` when every 1-pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a <= b)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_luma8(&image::open(path.as_ref())?.to_luma8()))
    }

    /// Pixels above 127 are on.
    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&v| u8::from(v > 127)).collect(),
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma8().save(path.as_ref())?;
        Ok(())
    }
}

/// Per-pixel anomaly scores. Maps produced by [`residual`](crate::model::Model::residual)
/// are squared differences and therefore non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ResidualMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(KistError::InvalidRaster(format!(
                "residual {v} is negative or non-finite"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Squared difference between two equally sized images.
    pub fn squared_difference(a: &GrayImage, b: &GrayImage) -> Result<Self> {
        if a.dims() != b.dims() {
            return Err(KistError::DimensionMismatch {
                expected: a.dims(),
                actual: b.dims(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .collect();
        Ok(Self {
            width: a.width(),
            height: a.height(),
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Writes a 16-bit visualization scaled by the map maximum and returns that maximum.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<f64> {
        let max = self.max();
        let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
        let raw: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer length matches dimensions");
        img.save(path.as_ref())?;
        Ok(max)
    }

    /// Raw little-endian `f32` values, row-major, no header.
    pub fn save_f32(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_f32(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        if bytes.len() != width * height * 4 {
            return Err(KistError::InvalidRaster(format!(
                "{}: expected {} bytes for {width}x{height}, found {}",
                path.as_ref().display(),
                width * height * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(width, height, data)
    }

    /// Rounds every value through `f32`, matching a sidecar round trip.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v as f32)).collect(),
        }
    }
}

/// Pixel-wise strict threshold: 1 where `r > t`.
pub fn binarize(r: &ResidualMap, t: f64) -> Mask {
    Mask {
        width: r.width,
        height: r.height,
        data: r.data.iter().map(|&v| u8::from(v > t)).collect(),
    }
}

pub fn mask_count(m: &Mask) -> usize {
    m.count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOp {
    And,
    Or,
}

pub fn mask_logic(a: &Mask, b: &Mask, op: MaskOp) -> Result<Mask> {
    if a.dims() != b.dims() {
        return Err(KistError::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&p, &q)| match op {
            MaskOp::And => p.min(q),
            MaskOp::Or => p.max(q),
        })
        .collect();
    Ok(Mask {
        width: a.width,
        height: a.height,
        data,
    })
}
