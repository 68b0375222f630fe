//! Attribute-labelled image sets and the pixel conventions shared by every
//! loader.

mod attributes;
pub mod manifest;
pub mod synth;

pub use attributes::{diff_vector, sample_targets, stack, AttributeVector, TargetPolicy};
pub use manifest::{load_manifest, write_manifest, MANIFEST_FILE};

use image::RgbImage;
use stgan_tensor::{Float, Tensor};

use crate::error::{Error, Result};

/// Maps an 8-bit level to the open interval (-1, 1), at bin centres.
pub fn level_to_unit(v: u8) -> f32 {
    (2.0 * v as f32 + 1.0) / 256.0 - 1.0
}

/// Continuous 0-255 value of a unit-range pixel; inverse of [`level_to_unit`].
pub fn unit_to_255(x: f64) -> f64 {
    ((x + 1.0) * 256.0 - 1.0) / 2.0
}

pub fn unit_to_level(x: f64) -> u8 {
    unit_to_255(x).round().clamp(0.0, 255.0) as u8
}

/// (3, h, w) tensor in (-1, 1).
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        level_to_unit(raw[p * 3 + c])
    })
}

/// Accepts (3, h, w) or (1, 3, h, w).
pub fn tensor_to_image<T: Float>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = match t.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        s => return Err(Error::Contract(format!("expected one RGB image, got shape {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Contract(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + ch] = unit_to_level(d[ch * h * w + p].as_f64());
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("buffer size mismatch".into()))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// (3, h, w) in (-1, 1).
    pub image: Tensor<f32>,
    pub attrs: AttributeVector,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub attribute_names: Vec<String>,
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

/// A batch as the trainer consumes it.
#[derive(Clone, Debug)]
pub struct Batch {
    /// (n, 3, h, w).
    pub images: Tensor<f32>,
    pub attrs: Vec<AttributeVector>,
}

impl Dataset {
    pub fn empty(attribute_names: Vec<String>, image_size: usize) -> Self {
        Self {
            attribute_names,
            image_size,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    /// Images and labels for `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let s = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut attrs = Vec::with_capacity(indices.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample index {i} out of range ({})", self.len())))?;
            data.extend_from_slice(sample.image.data());
            attrs.push(sample.attrs.clone());
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), 3, s, s], data)?,
            attrs,
        })
    }

    /// Fails unless every image has the configured shape and lies in (-1, 1)
    /// and every label is binary with the registry's length.
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        for sample in &self.samples {
            if sample.image.shape() != [3, s, s] {
                return Err(Error::Contract(format!(
                    "sample {} has shape {:?}, expected [3, {s}, {s}]",
                    sample.id,
                    sample.image.shape()
                )));
            }
            if sample.image.data().iter().any(|v| v.is_nan() || v.abs() >= 1.0) {
                return Err(Error::Contract(format!("sample {} has pixels outside (-1, 1)", sample.id)));
            }
            if sample.attrs.len() != self.num_attributes() || !sample.attrs.is_binary() {
                return Err(Error::Contract(format!("sample {} has invalid labels", sample.id)));
            }
        }
        Ok(())
    }
}

/// Train and test partitions sharing one attribute registry.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}
