//! Baseline JFIF codec with IJG quality scaling.
//!
//! The encoder writes 4:2:0 baseline streams with the Annex K Huffman tables.
//! The decoder reads those back and upsamples chroma by nearest neighbour.

mod dct;
mod decode;
mod encode;
mod tables;

use thiserror::Error;

use crate::data::{ImageRecord, CHANNELS, SIDE};

pub use decode::decode;
pub use encode::encode;
pub use tables::{quality_to_tables, QuantTables, BASE_CHROMA, BASE_LUMA, ZIGZAG};

/// Bumped whenever encoder output bytes may change; part of cache keys.
pub const CODEC_VERSION: u32 = 1;

/// Largest frame the decoder will allocate for.
pub const MAX_PIXELS: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JpegError {
    #[error("quality {0} outside 1..=100")]
    Quality(u8),
    #[error("unsupported image size {width}x{height}")]
    Dimensions { width: usize, height: usize },
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    Buffer { expected: usize, got: usize },
    #[error("stream truncated")]
    Truncated,
    #[error("malformed stream: {0}")]
    Malformed(&'static str),
    #[error("bad huffman data: {0}")]
    Huffman(&'static str),
    #[error("unsupported stream: {0}")]
    Unsupported(&'static str),
}

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, JpegError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(JpegError::Buffer { expected, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_record(r: &ImageRecord) -> Self {
        Self { width: SIDE, height: SIDE, data: r.to_interleaved() }
    }

    /// Planar record with `label`; the image must be Cifar-sized.
    pub fn to_record(&self, label: usize) -> Result<ImageRecord, JpegError> {
        if self.width != SIDE || self.height != SIDE {
            return Err(JpegError::Dimensions { width: self.width, height: self.height });
        }
        debug_assert_eq!(self.data.len(), SIDE * SIDE * CHANNELS);
        ImageRecord::from_interleaved(&self.data, label)
            .map_err(|_| JpegError::Buffer { expected: SIDE * SIDE * CHANNELS, got: self.data.len() })
    }
}

/// Compress and decompress; quality 100 returns the input untouched.
pub fn jpeg_round(img: &RgbImage, q: u8) -> Result<RgbImage, JpegError> {
    quality_to_tables(q)?;
    if q == 100 {
        return Ok(img.clone());
    }
    decode(&encode(img, q)?)
}

/// [`jpeg_round`] on a Cifar record, keeping its label.
pub fn jpeg_round_record(r: &ImageRecord, q: u8) -> Result<ImageRecord, JpegError> {
    if q == 100 {
        quality_to_tables(q)?;
        return Ok(r.clone());
    }
    jpeg_round(&RgbImage::from_record(r), q)?.to_record(r.label())
}

/// Mean squared error between two equally sized images.
pub fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "image sizes differ");
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    s / a.data.len() as f64
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    10.0 * (255.0f64 * 255.0 / mse(a, b)).log10()
}
