//! Procedural image corpus: generator families with distinct spectral
//! artifacts, post-processing perturbations, and split/few-shot samplers.

mod perturb;
mod ppm;
mod splits;
mod synth;

pub use perturb::{blur_kernel, gaussian_blur, jpeg_roundtrip, psnr, scaled_quant_tables};
pub use ppm::{read_ppm, write_ppm};
pub use splits::{build_splits, kshot_subset, manifest_lines, parse_manifest, SampleKey, SplitSpec, Splits};
pub use synth::{caption_vocabulary, generate_sample, GeneratorFamily, SampleRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("pixel buffer length {got} does not match {width}x{height}x3 = {expected}")]
    PixelCount {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite pixel value")]
    NonFinitePixel,
    #[error("jpeg quality must be in [1, 100], got {0}")]
    QualityOutOfRange(u32),
    #[error("blur sigma must be positive, got {0}")]
    SigmaOutOfRange(f64),
    #[error("split sizes must be even for exact class balance, got {0}")]
    OddSplitSize(usize),
    #[error("category count must be positive")]
    NoCategories,
    #[error("k-shot needs {needed} samples per class for category {category}, only {available} available (short by {shortfall})")]
    KshotShortfall {
        category: u32,
        needed: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("unknown generator family '{0}'")]
    UnknownFamily(String),
    #[error("malformed ppm: {0}")]
    MalformedPpm(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// RGB image, f32 values in [0, 1], stored planar: the full R plane
/// (row-major), then G, then B.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DataError::EmptyImage { width, height });
        }
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(DataError::PixelCount {
                width,
                height,
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DataError::NonFinitePixel);
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
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, y: usize, x: usize, v: f32) {
        self.data[channel * self.width * self.height + y * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing() {
        let mut img = Image::zeros(4, 2);
        img.set(2, 1, 3, 0.5);
        assert_eq!(img.get(2, 1, 3), 0.5);
        assert_eq!(img.data()[2 * 8 + 1 * 4 + 3], 0.5);
    }

    #[test]
    fn rejects_bad_dimensions_and_nan() {
        assert!(Image::new(0, 4, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.0; 2]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }
}
