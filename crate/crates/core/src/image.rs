//! Modality-tagged person images and training batches.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Camera id carried by generated images.
pub const SYNTHETIC_CAMERA: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    /// Channels as stored; IR is replicated to three only at encoder input.
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Ir => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Ir => "IR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One normalised image. `pixels` is `[channels, height, width]` in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonImage {
    pub pixels: Tensor,
    /// Contiguous identity index within the owning dataset.
    pub identity: usize,
    pub camera: u32,
    pub modality: Modality,
}

impl PersonImage {
    pub fn new(pixels: Tensor, identity: usize, camera: u32, modality: Modality) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[0] != modality.channels() {
            return Err(Error::ModalityMismatch {
                expected: modality.name(),
                actual: channel_label(shape.first().copied().unwrap_or(0)),
            });
        }
        if !pixels.all_finite() {
            return Err(Error::NonFinite("image pixels"));
        }
        Ok(Self {
            pixels,
            identity,
            camera,
            modality,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}

fn channel_label(c: usize) -> &'static str {
    match c {
        1 => "1-channel",
        3 => "3-channel",
        _ => "other channel count",
    }
}

/// Map raw 8-bit values `[channels × h × w]` linearly onto `[-1, 1]`.
pub fn normalize_image(
    raw: &[u8],
    (channels, height, width): (usize, usize, usize),
    modality: Modality,
    identity: usize,
    camera: u32,
) -> Result<PersonImage> {
    if channels != modality.channels() {
        return Err(Error::ModalityMismatch {
            expected: modality.name(),
            actual: channel_label(channels),
        });
    }
    if raw.len() != channels * height * width {
        return Err(Error::shape(
            "normalize_image",
            format!("{} bytes for {channels}x{height}x{width}", raw.len()),
        ));
    }
    let pixels = Tensor::new(
        &[channels, height, width],
        raw.iter().map(|&v| normalize_value(f64::from(v))).collect(),
    )?;
    PersonImage::new(pixels, identity, camera, modality)
}

#[inline]
pub fn normalize_value(v: f64) -> f64 {
    v / 127.5 - 1.0
}

/// Inverse of [`normalize_image`], rounding to the nearest 8-bit value.
pub fn denormalize(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&p| {
            let v = (p + 1.0) * 127.5;
            // round half away from zero without std
            let r = if v < 0.0 { 0.0 } else { (v + 0.5) as u64 as f64 };
            r.min(255.0) as u8
        })
        .collect()
}

/// Shape of a P×K training batch: `p` RGB-IR pairs for each of `k` identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub p: usize,
    pub k: usize,
}

impl BatchLayout {
    pub fn per_modality(&self) -> usize {
        self.p * self.k
    }

    pub fn total(&self) -> usize {
        2 * self.p * self.k
    }
}

/// A P×K mini-batch. Row `i` of `rgb` and row `i` of `ir` share `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `[P·K, 3, h, w]`
    pub rgb: Tensor,
    /// `[P·K, 1, h, w]`
    pub ir: Tensor,
    pub labels: Vec<usize>,
    pub rgb_items: Vec<usize>,
    pub ir_items: Vec<usize>,
    pub layout: BatchLayout,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.layout.total()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stack same-modality images into `[n, c, h, w]`.
pub fn stack(images: &[&PersonImage]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::Empty("stack"))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        if img.pixels.shape() != shape.as_slice() {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", img.pixels.shape(), shape),
            ));
        }
        data.extend_from_slice(img.pixels.data());
    }
    Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
}

/// Which encoder produced a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    StudentFE,
    TeacherFE,
}

/// What was fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    RealRgb,
    RealIr,
    FakeIr,
}

/// Middle-layer activation `[n, C, H', W']` of a former encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub source: FeatureSource,
    pub input_kind: InputKind,
}
