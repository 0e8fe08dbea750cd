//! Cifar-10 binary batches, channel statistics and synthetic stand-in sets.
//!
//! The canonical binary distribution stores each image as one label byte
//! followed by 3072 channel-planar pixel bytes (1024 red, 1024 green,
//! 1024 blue, rows top to bottom).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = CHANNELS * PLANE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";
pub const TRAIN_COUNT: usize = 50_000;
pub const TEST_COUNT: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated record at byte offset {offset}: {available} of {RECORD_BYTES} bytes present")]
    Truncated { offset: usize, available: usize },
    #[error("label {label} at byte offset {offset} exceeds {}", NUM_CLASSES - 1)]
    Label { offset: usize, label: u8 },
    #[error("{what}: expected {expected} records, found {found}")]
    Count { what: String, expected: usize, found: usize },
    #[error("channel {channel} has zero standard deviation")]
    ConstantChannel { channel: usize },
    #[error("{0}")]
    Invalid(String),
}

/// One 32×32 RGB image with its class label.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageRecord {
    pixels: Box<[u8]>,
    label: u8,
}

impl std::fmt::Debug for ImageRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageRecord").field("label", &self.label).finish_non_exhaustive()
    }
}

impl ImageRecord {
    /// `pixels` is channel-planar, `IMAGE_BYTES` long.
    pub fn new(pixels: Vec<u8>, label: u8) -> Result<Self, DataError> {
        if pixels.len() != IMAGE_BYTES {
            return Err(DataError::Invalid(format!("image must have {IMAGE_BYTES} bytes, got {}", pixels.len())));
        }
        if label as usize >= NUM_CLASSES {
            return Err(DataError::Label { offset: 0, label });
        }
        Ok(Self { pixels: pixels.into_boxed_slice(), label })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> usize {
        self.label as usize
    }

    /// Pixel at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[c * PLANE + y * SIDE + x]
    }

    /// Interleaved RGB rows, the layout image codecs expect.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let mut out = vec![0; IMAGE_BYTES];
        for i in 0..PLANE {
            for c in 0..CHANNELS {
                out[i * CHANNELS + c] = self.pixels[c * PLANE + i];
            }
        }
        out
    }

    pub fn from_interleaved(rgb: &[u8], label: usize) -> Result<Self, DataError> {
        if rgb.len() != IMAGE_BYTES {
            return Err(DataError::Invalid(format!(
                "interleaved image must have {IMAGE_BYTES} bytes, got {}",
                rgb.len()
            )));
        }
        let label = u8::try_from(label).map_err(|_| DataError::Invalid(format!("label {label} out of range")))?;
        let mut pixels = vec![0; IMAGE_BYTES];
        for i in 0..PLANE {
            for c in 0..CHANNELS {
                pixels[c * PLANE + i] = rgb[i * CHANNELS + c];
            }
        }
        Self::new(pixels, label)
    }

    pub fn with_pixels(&self, pixels: Vec<u8>) -> Result<Self, DataError> {
        Self::new(pixels, self.label)
    }
}

/// Parses a buffer of concatenated binary records.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<ImageRecord>, DataError> {
    let mut out = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut offset = 0;
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        if rest.len() < RECORD_BYTES {
            return Err(DataError::Truncated { offset, available: rest.len() });
        }
        let label = rest[0];
        if label as usize >= NUM_CLASSES {
            return Err(DataError::Label { offset, label });
        }
        out.push(ImageRecord { pixels: rest[1..RECORD_BYTES].into(), label });
        offset += RECORD_BYTES;
    }
    Ok(out)
}

/// Inverse of [`parse_records`].
pub fn serialize_records(records: &[ImageRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn load_batch_file(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_owned(), source })?;
    parse_records(&bytes)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), DataError> {
    let mut train = Vec::with_capacity(TRAIN_COUNT);
    for name in TRAIN_FILES {
        train.extend(load_batch_file(&dir.join(name))?);
    }
    let test = load_batch_file(&dir.join(TEST_FILE))?;
    for (what, found, expected) in [("training set", train.len(), TRAIN_COUNT), ("test set", test.len(), TEST_COUNT)] {
        if found != expected {
            return Err(DataError::Count { what: format!("{what} in {}", dir.display()), expected, found });
        }
    }
    Ok((train, test))
}

/// Per-channel mean and population std on the [0,1] pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub fn new(mean: [f64; CHANNELS], std: [f64; CHANNELS]) -> Result<Self, DataError> {
        for (channel, s) in std.iter().enumerate() {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(DataError::ConstantChannel { channel });
            }
        }
        Ok(Self { mean, std })
    }

    /// Normalized value of byte `v` in channel `c`.
    #[inline]
    pub fn normalize(&self, c: usize, v: f64) -> f64 {
        (v / 255.0 - self.mean[c]) / self.std[c]
    }
}

pub fn compute_channel_stats(records: &[ImageRecord]) -> Result<ChannelStats, DataError> {
    if records.is_empty() {
        return Err(DataError::Invalid("channel statistics of an empty set".into()));
    }
    let mut sum = [0u64; CHANNELS];
    let mut sq = [0u64; CHANNELS];
    for r in records {
        for c in 0..CHANNELS {
            for &p in &r.pixels[c * PLANE..(c + 1) * PLANE] {
                sum[c] += p as u64;
                sq[c] += (p as u64) * (p as u64);
            }
        }
    }
    let n = (records.len() * PLANE) as f64;
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        let m = sum[c] as f64 / n;
        let var = (sq[c] as f64 / n - m * m).max(0.0);
        mean[c] = m / 255.0;
        std[c] = var.sqrt() / 255.0;
    }
    ChannelStats::new(mean, std)
}

/// Writes the normalized image into `out` (`IMAGE_BYTES` values, planar).
pub fn normalize_into<T: Scalar>(record: &ImageRecord, stats: &ChannelStats, out: &mut [T]) {
    for c in 0..CHANNELS {
        let plane = &record.pixels[c * PLANE..(c + 1) * PLANE];
        for (o, &p) in out[c * PLANE..(c + 1) * PLANE].iter_mut().zip(plane) {
            *o = T::from_f64_lossy(stats.normalize(c, p as f64));
        }
    }
}

/// Stacks normalized images into an `[n, 3, 32, 32]` tensor.
pub fn to_tensor<'a, T: Scalar>(
    records: impl IntoIterator<Item = &'a ImageRecord>,
    stats: &ChannelStats,
) -> Result<Tensor<T>, DataError> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in records {
        data.resize((n + 1) * IMAGE_BYTES, T::zero());
        normalize_into(r, stats, &mut data[n * IMAGE_BYTES..]);
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Invalid("cannot batch zero images".into()));
    }
    Ok(Tensor::new(&[n, CHANNELS, SIDE, SIDE], data).expect("shape matches data"))
}

/// SHA-256 over the serialized records, hex encoded.
pub fn dataset_hash(records: &[ImageRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update([r.label]);
        h.update(&r.pixels);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded class-conditional images: a class mean color, an oriented grating
/// whose angle and frequency depend on the class, and pixel noise.
/// Labels cycle through the classes in order.
pub fn synthetic_dataset(n: usize, classes: usize, seed: u64) -> Result<Vec<ImageRecord>, DataError> {
    if classes == 0 || classes > NUM_CLASSES {
        return Err(DataError::Invalid(format!("classes must be in 1..={NUM_CLASSES}, got {classes}")));
    }
    if n < classes {
        return Err(DataError::Invalid(format!("need at least one image per class ({n} < {classes})")));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let noise = Normal::new(0.0, 18.0).expect("valid sigma");
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let hue = tau * label as f64 / classes as f64;
        let theta = std::f64::consts::PI * label as f64 / classes as f64;
        let freq = (2 + label % 3) as f64 / SIDE as f64;
        let phase = rng.gen_range(0.0..tau);
        let amp = rng.gen_range(25.0..45.0);
        let (ct, st) = (theta.cos(), theta.sin());
        let mut base = [0.0; CHANNELS];
        for (c, b) in base.iter_mut().enumerate() {
            *b = 128.0 + 45.0 * (hue + c as f64 * tau / 3.0).cos() + rng.gen_range(-20.0..20.0);
        }
        let mut pixels = vec![0u8; IMAGE_BYTES];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let wave = amp * (tau * freq * (x as f64 * ct + y as f64 * st) + phase).sin();
                for c in 0..CHANNELS {
                    let v = base[c] + wave + noise.sample(&mut rng);
                    pixels[c * PLANE + y * SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        out.push(ImageRecord { pixels: pixels.into_boxed_slice(), label: label as u8 });
    }
    Ok(out)
}
