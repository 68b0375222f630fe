use rand::Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, ParamStore, Tape, Tensor, Var};

use super::layers::{Conv, Dense};
use super::{scaled_widths, KERNEL, LEAK, NUM_LAYERS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub num_attributes: usize,
    pub width: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_attributes: 5,
            width: 0.25,
        }
    }
}

impl DiscriminatorConfig {
    pub fn fc_width(&self) -> usize {
        ((1024.0 * self.width).round() as usize).max(1)
    }
}

/// Critic score and attribute logits of one batch.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// (n, 1), unbounded.
    pub adv: Var,
    /// (n, c) logits; the attribute probabilities are their sigmoid.
    pub att_logits: Var,
}

/// Shared convolutional trunk with a critic head and an attribute head.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Float> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    trunk: Vec<Conv>,
    adv: [Dense; 2],
    att: [Dense; 2],
}

impl<T: Float> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.image_size == 0 || !config.image_size.is_multiple_of(1 << NUM_LAYERS) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {}, got {}",
                1 << NUM_LAYERS,
                config.image_size
            )));
        }
        let widths = scaled_widths(config.width);
        let mut params = ParamStore::new();
        let mut trunk = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            trunk.push(Conv::new(&mut params, &format!("discriminator/trunk/{i}"), cin, cout, KERNEL, false, true, rng)?);
            cin = cout;
        }
        let side = config.image_size >> NUM_LAYERS;
        let feat = cin * side * side;
        let fc = config.fc_width();
        let c = config.num_attributes;
        let adv = [
            Dense::new(&mut params, "discriminator/adv/0", feat, fc, rng)?,
            Dense::new(&mut params, "discriminator/adv/1", fc, 1, rng)?,
        ];
        let att = [
            Dense::new(&mut params, "discriminator/att/0", feat, fc, rng)?,
            Dense::new(&mut params, "discriminator/att/1", fc, c, rng)?,
        ];
        Ok(Self {
            config,
            params,
            trunk,
            adv,
            att,
        })
    }

    /// Flattened trunk features.
    pub fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = self.config.image_size;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::Contract(format!("discriminator input must be (n, 3, {s}, {s}), got {shape:?}")));
        }
        let mut h = x;
        for conv in &self.trunk {
            h = conv.apply(tape, &self.params, h, 2, 1)?;
            h = tape.leaky_relu(h, T::of(LEAK))?;
        }
        Ok(tape.flatten(h)?)
    }

    fn head(&self, tape: &mut Tape<T>, layers: &[Dense; 2], feat: Var) -> Result<Var> {
        let h = layers[0].apply(tape, &self.params, feat)?;
        let h = tape.leaky_relu(h, T::of(LEAK))?;
        layers[1].apply(tape, &self.params, h)
    }

    pub fn adv_head(&self, tape: &mut Tape<T>, feat: Var) -> Result<Var> {
        self.head(tape, &self.adv, feat)
    }

    pub fn att_head(&self, tape: &mut Tape<T>, feat: Var) -> Result<Var> {
        self.head(tape, &self.att, feat)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<DiscOutput> {
        let feat = self.features(tape, x)?;
        Ok(DiscOutput {
            adv: self.adv_head(tape, feat)?,
            att_logits: self.att_head(tape, feat)?,
        })
    }

    /// Critic scores only.
    pub fn critic(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let feat = self.features(tape, x)?;
        self.adv_head(tape, feat)
    }

    /// Gradient-free scores (n) and attribute probabilities (n, c).
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone())?;
        let out = self.forward(&mut tape, x)?;
        let probs = tape.sigmoid(out.att_logits)?;
        Ok((tape.value(out.adv).data().to_vec(), tape.value(probs).clone()))
    }
}
