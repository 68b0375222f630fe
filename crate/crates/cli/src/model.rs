//! A loaded checkpoint ready for single-image edits, shared by the `edit`
//! command and the service.

use std::path::Path;

use image::RgbImage;
use stgan_core::checkpoint;
use stgan_core::data::{image_to_tensor, tensor_to_image, AttributeVector};
use stgan_core::networks::{Conditioning, Discriminator, Generator};
use stgan_core::train::Trainer;
use stgan_tensor::Tensor;

/// Why an edit request was refused.
#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("{0}")]
    TooLarge(String),
    #[error(transparent)]
    Model(#[from] stgan_core::Error),
}

pub fn invalid(field: &'static str, message: impl Into<String>) -> RequestError {
    RequestError::Invalid {
        field,
        message: message.into(),
    }
}

/// What to change.
#[derive(Clone, Debug, PartialEq)]
pub enum EditSpec {
    /// Per-attribute change in [-1, 1].
    Diff(Vec<f32>),
    /// Binary source and target labels.
    Pair { source: Vec<f32>, target: Vec<f32> },
}

pub struct EditOutput {
    pub image: RgbImage,
    /// Attribute-head probabilities of the discriminator on the result.
    pub probabilities: Vec<f32>,
    /// The conditioning vector actually fed to the generator.
    pub condition: Vec<f32>,
}

/// Immutable inference snapshot of a trained model.
pub struct EditModel {
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub attribute_names: Vec<String>,
    pub checkpoint_id: String,
    pub iteration: u64,
}

impl EditModel {
    pub fn load(path: &Path) -> stgan_core::Result<Self> {
        let c = checkpoint::read(path)?;
        let t = checkpoint::trainer_from(&c)?;
        Ok(Self::from_trainer(t, c.id))
    }

    pub fn from_trainer(t: Trainer, checkpoint_id: String) -> Self {
        let attribute_names = if t.attribute_names.is_empty() {
            (0..t.config.model.num_attributes).map(|i| format!("attribute_{i}")).collect()
        } else {
            t.attribute_names
        };
        Self {
            gen: t.gen,
            disc: t.disc,
            attribute_names,
            checkpoint_id,
            iteration: t.iteration,
        }
    }

    pub fn image_size(&self) -> usize {
        self.gen.config.image_size
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    /// Decodes PNG bytes, requiring the model's square size.
    pub fn decode_png(&self, bytes: &[u8]) -> Result<RgbImage, RequestError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| invalid("image", format!("not a decodable PNG: {e}")))?
            .to_rgb8();
        let s = self.image_size() as u32;
        let (w, h) = img.dimensions();
        if w > s || h > s {
            return Err(RequestError::TooLarge(format!("image is {w}x{h}, the model accepts {s}x{s}")));
        }
        if (w, h) != (s, s) {
            return Err(invalid("image", format!("image is {w}x{h}, the model accepts {s}x{s}")));
        }
        Ok(img)
    }

    fn check_vector(&self, field: &'static str, v: &[f32], binary: bool) -> Result<(), RequestError> {
        let c = self.num_attributes();
        if v.len() != c {
            return Err(invalid(field, format!("expected {c} values, got {}", v.len())));
        }
        for (i, &x) in v.iter().enumerate() {
            let ok = if binary { x == 0.0 || x == 1.0 } else { x.is_finite() && (-1.0..=1.0).contains(&x) };
            if !ok {
                let want = if binary { "0 or 1" } else { "within [-1, 1]" };
                return Err(invalid(field, format!("value {x} at index {i} ({}) must be {want}", self.attribute_names[i])));
            }
        }
        Ok(())
    }

    /// Validates `spec` and builds the generator's conditioning vector.
    pub fn condition(&self, image: &Tensor<f32>, spec: &EditSpec, intensity: f32) -> Result<Vec<f32>, RequestError> {
        if !intensity.is_finite() {
            return Err(invalid("intensity", "must be finite"));
        }
        match spec {
            EditSpec::Diff(d) => self.check_vector("diff", d, false)?,
            EditSpec::Pair { source, target } => {
                self.check_vector("source", source, true)?;
                self.check_vector("target", target, true)?;
            }
        }
        let base = match (self.gen.config.conditioning, spec) {
            (Conditioning::Difference, EditSpec::Diff(d)) => d.clone(),
            (Conditioning::Difference, EditSpec::Pair { source, target }) => {
                target.iter().zip(source).map(|(t, s)| t - s).collect()
            }
            (Conditioning::Target, EditSpec::Pair { target, .. }) => target.iter().map(|t| 2.0 * t - 1.0).collect(),
            (Conditioning::Target, EditSpec::Diff(d)) => {
                // a target-conditioned model needs absolute labels: estimate the
                // source from the attribute head, then apply the change
                let (_, probs) = self.disc.discriminate(image)?;
                probs
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&p, &dv)| {
                        let s = if p > 0.5 { 1.0 } else { 0.0 };
                        2.0 * (s + dv).clamp(0.0, 1.0) - 1.0
                    })
                    .collect()
            }
        };
        Ok(base.into_iter().map(|v| v * intensity).collect())
    }

    /// Edits one image. Pure: the model is never mutated.
    pub fn edit(&self, image: &RgbImage, spec: &EditSpec, intensity: f32) -> Result<EditOutput, RequestError> {
        let s = self.image_size();
        if image.dimensions() != (s as u32, s as u32) {
            return Err(invalid("image", format!("expected {s}x{s}")));
        }
        let x = image_to_tensor(image).reshape(&[1, 3, s, s]).map_err(stgan_core::Error::from)?;
        let condition = self.condition(&x, spec, intensity)?;
        let cond = Tensor::new(&[1, condition.len()], condition.clone()).map_err(stgan_core::Error::from)?;
        let y = self.gen.edit(&x, &cond)?;
        let (_, probs) = self.disc.discriminate(&y)?;
        let out = y.reshape(&[3, s, s]).map_err(stgan_core::Error::from)?;
        Ok(EditOutput {
            image: tensor_to_image(&out)?,
            probabilities: probs.into_data(),
            condition,
        })
    }

    /// Zero-change reconstruction conditioning for `source` labels.
    pub fn identity_spec(&self, source: &AttributeVector) -> EditSpec {
        EditSpec::Pair {
            source: source.values().to_vec(),
            target: source.values().to_vec(),
        }
    }
}

pub fn encode_png(img: &RgbImage) -> stgan_core::Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| stgan_core::Error::Image(e.to_string()))?;
    Ok(buf.into_inner())
}
