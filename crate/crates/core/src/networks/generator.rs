use rand::Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, ParamId, ParamStore, Tape, Tensor, Var};

use super::layers::{Conv, InstanceNorm};
use super::{scaled_widths, KERNEL, LEAK, NUM_LAYERS, NUM_STU};
use crate::data::{diff_vector, AttributeVector};
use crate::error::{Error, Result};
use crate::stu::{stretch_diff, StuCell, StuHooks, StuVariant};

/// Which encoder features reach the decoder, and how.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Transfer-cell outputs at layers 4..1.
    #[default]
    Stu,
    /// Bottleneck only.
    None,
    /// Raw encoder feature of layer 4.
    Raw1,
    /// Raw encoder features of layers 4 and 3.
    Raw2,
    /// Raw encoder features of layers 4..1.
    RawAll,
}

impl SkipMode {
    pub const ALL: [SkipMode; 5] = [SkipMode::Stu, SkipMode::None, SkipMode::Raw1, SkipMode::Raw2, SkipMode::RawAll];

    pub fn name(self) -> &'static str {
        match self {
            SkipMode::Stu => "stu",
            SkipMode::None => "none",
            SkipMode::Raw1 => "raw1",
            SkipMode::Raw2 => "raw2",
            SkipMode::RawAll => "raw_all",
        }
    }

    /// Whether layer `l` (1-based) feeds a skip into the decoder.
    pub fn has_skip(self, l: usize) -> bool {
        match self {
            SkipMode::Stu | SkipMode::RawAll => (1..=4).contains(&l),
            SkipMode::None => false,
            SkipMode::Raw1 => l == 4,
            SkipMode::Raw2 => l == 3 || l == 4,
        }
    }
}

impl std::str::FromStr for SkipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SkipMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown skip mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Instance,
    None,
}

/// What the generator is conditioned on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Target minus source attributes.
    #[default]
    Difference,
    /// Target attributes coded as {-1, +1}.
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub num_attributes: usize,
    pub width: f64,
    pub stu_variant: StuVariant,
    pub skip_mode: SkipMode,
    pub conditioning: Conditioning,
    pub norm: Norm,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_attributes: 5,
            width: 0.25,
            stu_variant: StuVariant::Standard,
            skip_mode: SkipMode::Stu,
            conditioning: Conditioning::Difference,
            norm: Norm::Instance,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << NUM_LAYERS) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {}, got {}",
                1 << NUM_LAYERS,
                self.image_size
            )));
        }
        if self.num_attributes == 0 {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width factor must be positive, got {}", self.width)));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 5] {
        scaled_widths(self.width)
    }

    /// Input channels of the five decoder layers, innermost first.
    pub fn decoder_inputs(&self) -> [usize; 5] {
        let c = self.widths();
        let mut inputs = [0; 5];
        inputs[0] = c[4] + self.num_attributes;
        for (k, input) in inputs.iter_mut().enumerate().skip(1) {
            let l = NUM_LAYERS - k; // encoder layer whose resolution this decoder layer starts at
            *input = c[l - 1] + if self.skip_mode.has_skip(l) { c[l - 1] } else { 0 };
        }
        inputs
    }

    /// Vector fed to the generator to edit `source` into `target`.
    pub fn condition(&self, source: &AttributeVector, target: &AttributeVector) -> Result<AttributeVector> {
        match self.conditioning {
            Conditioning::Difference => diff_vector(target, source),
            Conditioning::Target => {
                diff_vector(target, source)?;
                Ok(AttributeVector(target.values().iter().map(|&t| 2.0 * t - 1.0).collect()))
            }
        }
    }
}

/// Encoder, transfer cells and decoder over one parameter registry.
#[derive(Clone, Debug)]
pub struct Generator<T: Float> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    enc: Vec<Conv>,
    enc_norm: Vec<Option<InstanceNorm>>,
    dec: Vec<Conv>,
    dec_norm: Vec<Option<InstanceNorm>>,
    stus: Vec<StuCell>,
}

impl<T: Float> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.widths();
        let a = config.num_attributes;
        let mut params = ParamStore::new();
        let mut enc = Vec::new();
        let mut enc_norm = Vec::new();
        let mut cin = 3;
        for (i, &cout) in c.iter().enumerate() {
            let prefix = format!("generator/encoder/{i}");
            // the first layer sees raw colour; normalizing it would discard global
            // tint, and a 1x1 map normalizes to a constant
            let side = config.image_size >> (i + 1);
            let normed = i > 0 && side > 1 && config.norm == Norm::Instance;
            enc.push(Conv::new(&mut params, &prefix, cin, cout, KERNEL, false, !normed, rng)?);
            let norm = normed
                .then(|| InstanceNorm::new(&mut params, &format!("{prefix}/norm"), cout))
                .transpose()?;
            enc_norm.push(norm);
            cin = cout;
        }

        let mut stus = Vec::new();
        if config.skip_mode == SkipMode::Stu {
            for l in 1..=NUM_STU {
                stus.push(StuCell::new(
                    &mut params,
                    &format!("generator/stu/{l}"),
                    l,
                    config.stu_variant,
                    c[l - 1],
                    c[l],
                    a,
                    rng,
                )?);
            }
        }

        let inputs = config.decoder_inputs();
        let mut dec = Vec::new();
        let mut dec_norm = Vec::new();
        for k in 0..NUM_LAYERS {
            let last = k == NUM_LAYERS - 1;
            let cout = if last { 3 } else { c[NUM_LAYERS - 2 - k] };
            let prefix = format!("generator/decoder/{k}");
            let normed = !last && config.norm == Norm::Instance;
            dec.push(Conv::new(&mut params, &prefix, inputs[k], cout, KERNEL, true, !normed, rng)?);
            let norm = normed
                .then(|| InstanceNorm::new(&mut params, &format!("{prefix}/norm"), cout))
                .transpose()?;
            dec_norm.push(norm);
        }

        Ok(Self {
            config,
            params,
            enc,
            enc_norm,
            dec,
            dec_norm,
            stus,
        })
    }

    /// Transfer cells, layer 1 first; empty unless the skip mode is `stu`.
    pub fn cells(&self) -> &[StuCell] {
        &self.stus
    }

    /// (layer kind, index, weight id) for every convolution, for audits.
    pub fn conv_weights(&self) -> Vec<(&'static str, usize, ParamId)> {
        let e = self.enc.iter().enumerate().map(|(i, c)| ("encoder", i, c.w));
        let d = self.dec.iter().enumerate().map(|(i, c)| ("decoder", i, c.w));
        e.chain(d).collect()
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        let s = self.config.image_size;
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::Contract(format!("generator input must be (n, 3, {s}, {s}), got {shape:?}")));
        }
        if tape.value(x).data().iter().any(|v| v.is_nan() || v.abs() > T::one()) {
            return Err(Error::Contract("generator input must lie in [-1, 1]".into()));
        }
        Ok(shape[0])
    }

    fn check_condition(&self, cond: &Tensor<T>, n: usize) -> Result<()> {
        if cond.shape() != [n, self.config.num_attributes] {
            return Err(Error::Contract(format!(
                "conditioning batch must be ({n}, {}), got {:?}",
                self.config.num_attributes,
                cond.shape()
            )));
        }
        Ok(())
    }

    /// Encoder features `f_enc^1..f_enc^5`, halving resolution each layer.
    pub fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        let mut feats = Vec::with_capacity(NUM_LAYERS);
        let mut h = x;
        for (conv, norm) in self.enc.iter().zip(&self.enc_norm) {
            h = conv.apply(tape, &self.params, h, 2, 1)?;
            if let Some(norm) = norm {
                h = norm.apply(tape, &self.params, h)?;
            }
            h = tape.leaky_relu(h, T::of(LEAK))?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Decoder skips for layers 1..4 (index `l - 1`); `None` where the skip
    /// mode feeds nothing.
    pub fn transfer(&self, tape: &mut Tape<T>, feats: &[Var], cond: &Tensor<T>, hooks: StuHooks) -> Result<Vec<Option<Var>>> {
        if feats.len() != NUM_LAYERS {
            return Err(Error::Contract(format!("expected {NUM_LAYERS} encoder features, got {}", feats.len())));
        }
        let n = tape.shape(feats[0])[0];
        self.check_condition(cond, n)?;
        let mut skips = vec![None; NUM_STU];
        match self.config.skip_mode {
            SkipMode::Stu => {
                let mut state = feats[NUM_LAYERS - 1];
                for cell in self.stus.iter().rev() {
                    let l = cell.layer;
                    let side = self.config.image_size >> (l + 1);
                    let diff = tape.constant(stretch_diff(cond, side, side)?)?;
                    let trace = cell.forward(tape, &self.params, feats[l - 1], state, diff, hooks)?;
                    skips[l - 1] = Some(trace.transformed);
                    state = trace.state;
                }
            }
            mode => {
                for l in 1..=NUM_STU {
                    if mode.has_skip(l) {
                        skips[l - 1] = Some(feats[l - 1]);
                    }
                }
            }
        }
        Ok(skips)
    }

    /// Image in (-1, 1) from the bottleneck, skips and conditioning vector.
    pub fn decode(&self, tape: &mut Tape<T>, f5: Var, skips: &[Option<Var>], cond: &Tensor<T>) -> Result<Var> {
        let n = tape.shape(f5)[0];
        self.check_condition(cond, n)?;
        if skips.len() != NUM_STU {
            return Err(Error::Contract(format!("expected {NUM_STU} skip slots, got {}", skips.len())));
        }
        let side = self.config.image_size >> NUM_LAYERS;
        let diff = tape.constant(stretch_diff(cond, side, side)?)?;
        let mut h = tape.concat_channels(f5, diff)?;
        for k in 0..NUM_LAYERS {
            if k > 0 {
                let l = NUM_LAYERS - k;
                if let Some(skip) = skips[l - 1] {
                    h = tape.concat_channels(h, skip)?;
                }
            }
            h = self.dec[k].apply(tape, &self.params, h, 2, 1)?;
            if k == NUM_LAYERS - 1 {
                h = tape.tanh(h)?;
            } else {
                if let Some(norm) = &self.dec_norm[k] {
                    h = norm.apply(tape, &self.params, h)?;
                }
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn generate(&self, tape: &mut Tape<T>, x: Var, cond: &Tensor<T>) -> Result<Var> {
        self.generate_with(tape, x, cond, StuHooks::default())
    }

    pub fn generate_with(&self, tape: &mut Tape<T>, x: Var, cond: &Tensor<T>, hooks: StuHooks) -> Result<Var> {
        let feats = self.encode(tape, x)?;
        let skips = self.transfer(tape, &feats, cond, hooks)?;
        self.decode(tape, feats[NUM_LAYERS - 1], &skips, cond)
    }

    /// Inference without recording gradients.
    pub fn edit(&self, images: &Tensor<T>, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone())?;
        let y = self.generate(&mut tape, x, cond)?;
        Ok(tape.value(y).clone())
    }
}
