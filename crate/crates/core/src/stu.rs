//! Selective transfer units and their ablation variants.
//!
//! A cell upsamples the incoming hidden state together with the stretched
//! difference attributes, then gates it against the encoder feature of its
//! own layer:
//!
//! ```text
//! s_hat = W_t *T [s_next, diff]
//! r     = sigmoid(W_r * [f_enc, s_hat])
//! z     = sigmoid(W_z * [f_enc, s_hat])
//! s     = r . s_hat
//! f_hat = tanh(W_h * [f_enc, s])
//! f_t   = (1 - z) . s_hat + z . f_hat
//! ```
//!
//! `f_t` feeds the decoder, `s` is passed on to the next outer cell.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{init, Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Kernel, stride and padding of the hidden-state upsampler.
pub const UPSAMPLE_KERNEL: usize = 4;
/// Kernel of the gate convolutions (stride 1, padding 1).
pub const GATE_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuVariant {
    /// Gated unit emitting `s` as its hidden state.
    #[default]
    Standard,
    /// Plain GRU convention: `f_t` doubles as the hidden state.
    GruOutput,
    /// A single convolution over `[f_enc, s_hat]`, no gating.
    Conv,
    /// `Conv` plus the encoder feature.
    ConvRes,
    /// `Standard` with `f_enc` added to its transformed feature.
    Res,
}

impl StuVariant {
    pub const ALL: [StuVariant; 5] = [
        StuVariant::Standard,
        StuVariant::GruOutput,
        StuVariant::Conv,
        StuVariant::ConvRes,
        StuVariant::Res,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StuVariant::Standard => "standard",
            StuVariant::GruOutput => "gru_output",
            StuVariant::Conv => "conv",
            StuVariant::ConvRes => "conv_res",
            StuVariant::Res => "res",
        }
    }

    fn gated(self) -> bool {
        matches!(self, StuVariant::Standard | StuVariant::GruOutput | StuVariant::Res)
    }
}

impl std::str::FromStr for StuVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StuVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown STU variant {s:?}")))
    }
}

/// Broadcasts a (n, c) attribute batch to (n, c, h, w), one constant plane per attribute.
pub fn stretch_diff<T: Float>(attrs: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[n, c] = attrs.shape() else {
        return Err(Error::Contract(format!(
            "attribute batch must be (n, c), got {:?}",
            attrs.shape()
        )));
    };
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c * hw);
    for &v in attrs.data() {
        data.extend(std::iter::repeat_n(v, hw));
    }
    Ok(Tensor::new(&[n, c, h, w], data)?)
}

#[derive(Clone, Debug)]
enum Gates {
    Gru {
        w_r: ParamId,
        b_r: ParamId,
        w_z: ParamId,
        b_z: ParamId,
        w_h: ParamId,
        b_h: ParamId,
    },
    Conv {
        w: ParamId,
        b: ParamId,
    },
}

/// Test hooks; the default leaves the cell untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct StuHooks {
    /// Replace the update gate with this constant.
    pub force_update: Option<f64>,
}

/// Every intermediate of one cell evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StuTrace {
    pub upsampled: Var,
    pub reset: Option<Var>,
    pub update: Option<Var>,
    pub candidate: Option<Var>,
    /// Transformed encoder feature handed to the decoder.
    pub transformed: Var,
    /// Hidden state handed to the next outer cell.
    pub state: Var,
}

/// One transfer cell. Cells at different layers own distinct parameters.
#[derive(Clone, Debug)]
pub struct StuCell {
    pub layer: usize,
    pub variant: StuVariant,
    pub enc_channels: usize,
    pub state_channels: usize,
    pub attr_channels: usize,
    w_t: ParamId,
    b_t: ParamId,
    gates: Gates,
}

fn add_conv<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let bias_len = if name == "w_t" { shape[1] } else { shape[0] };
    let w = store.add(format!("{prefix}/{name}"), init::uniform_fan_in(&shape, fan_in, rng))?;
    let b = store.add(
        format!("{prefix}/{}", name.replacen('w', "b", 1)),
        Tensor::zeros(&[bias_len]),
    )?;
    Ok((w, b))
}

impl StuCell {
    /// Registers the cell's parameters under `prefix` (e.g. `generator/stu/2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        layer: usize,
        variant: StuVariant,
        enc_channels: usize,
        state_channels: usize,
        attr_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = UPSAMPLE_KERNEL;
        let g = GATE_KERNEL;
        let up_in = state_channels + attr_channels;
        let (w_t, b_t) = add_conv(store, prefix, "w_t", [up_in, enc_channels, k, k], up_in * k * k / 4, rng)?;
        let gate_shape = [enc_channels, 2 * enc_channels, g, g];
        let gate_fan = 2 * enc_channels * g * g;
        let gates = if variant.gated() {
            let (w_r, b_r) = add_conv(store, prefix, "w_r", gate_shape, gate_fan, rng)?;
            let (w_z, b_z) = add_conv(store, prefix, "w_z", gate_shape, gate_fan, rng)?;
            let (w_h, b_h) = add_conv(store, prefix, "w_h", gate_shape, gate_fan, rng)?;
            Gates::Gru {
                w_r,
                b_r,
                w_z,
                b_z,
                w_h,
                b_h,
            }
        } else {
            let (w, b) = add_conv(store, prefix, "w_conv", gate_shape, gate_fan, rng)?;
            Gates::Conv { w, b }
        };
        Ok(Self {
            layer,
            variant,
            enc_channels,
            state_channels,
            attr_channels,
            w_t,
            b_t,
            gates,
        })
    }

    /// Ids of every parameter this cell owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_t, self.b_t];
        match self.gates {
            Gates::Gru {
                w_r,
                b_r,
                w_z,
                b_z,
                w_h,
                b_h,
            } => ids.extend([w_r, b_r, w_z, b_z, w_h, b_h]),
            Gates::Conv { w, b } => ids.extend([w, b]),
        }
        ids
    }

    fn check_shapes<T: Float>(&self, tape: &Tape<T>, f_enc: Var, state: Var, diff: Var) -> Result<()> {
        let (fs, ss, ds) = (tape.shape(f_enc), tape.shape(state), tape.shape(diff));
        let ok = fs.len() == 4
            && ss.len() == 4
            && ds.len() == 4
            && fs[1] == self.enc_channels
            && ss[1] == self.state_channels
            && ds[1] == self.attr_channels
            && ss[0] == fs[0]
            && ds[0] == fs[0]
            && ss[2] * 2 == fs[2]
            && ss[3] * 2 == fs[3]
            && ds[2..] == ss[2..];
        if ok {
            Ok(())
        } else {
            Err(Error::Tensor(stgan_tensor::TensorError::Dimension {
                op: "stu_forward",
                detail: format!(
                    "layer {}: f_enc {fs:?}, state {ss:?}, diff {ds:?} do not match cell ({} enc, {} state, {} attr channels, state at half resolution)",
                    self.layer, self.enc_channels, self.state_channels, self.attr_channels
                ),
            }))
        }
    }

    /// Runs the cell. `diff` is the difference map already stretched to the
    /// spatial size of `state`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_enc: Var,
        state: Var,
        diff: Var,
        hooks: StuHooks,
    ) -> Result<StuTrace> {
        self.check_shapes(tape, f_enc, state, diff)?;
        let w_t = tape.param(store, self.w_t)?;
        let b_t = tape.param(store, self.b_t)?;
        let up_in = tape.concat_channels(state, diff)?;
        let upsampled = tape.conv_transpose2d(up_in, w_t, Some(b_t), 2, 1)?;
        let joint = tape.concat_channels(f_enc, upsampled)?;
        let pad = GATE_KERNEL / 2;

        match self.gates {
            Gates::Gru {
                w_r,
                b_r,
                w_z,
                b_z,
                w_h,
                b_h,
            } => {
                let (w_r, b_r) = (tape.param(store, w_r)?, tape.param(store, b_r)?);
                let (w_z, b_z) = (tape.param(store, w_z)?, tape.param(store, b_z)?);
                let (w_h, b_h) = (tape.param(store, w_h)?, tape.param(store, b_h)?);
                let r_pre = tape.conv2d(joint, w_r, Some(b_r), 1, pad)?;
                let reset = tape.sigmoid(r_pre)?;
                let update = match hooks.force_update {
                    Some(v) => {
                        let shape = tape.shape(upsampled).to_vec();
                        tape.constant(Tensor::full(&shape, T::of(v)))?
                    }
                    None => {
                        let z_pre = tape.conv2d(joint, w_z, Some(b_z), 1, pad)?;
                        tape.sigmoid(z_pre)?
                    }
                };
                let new_state = tape.mul(reset, upsampled)?;
                let cand_in = tape.concat_channels(f_enc, new_state)?;
                let cand_pre = tape.conv2d(cand_in, w_h, Some(b_h), 1, pad)?;
                let candidate = tape.tanh(cand_pre)?;
                let keep = tape.affine(update, -T::one(), T::one())?;
                let kept = tape.mul(keep, upsampled)?;
                let fresh = tape.mul(update, candidate)?;
                let mixed = tape.add(kept, fresh)?;
                let (transformed, state) = match self.variant {
                    StuVariant::GruOutput => (mixed, mixed),
                    StuVariant::Res => (tape.add(mixed, f_enc)?, new_state),
                    _ => (mixed, new_state),
                };
                Ok(StuTrace {
                    upsampled,
                    reset: Some(reset),
                    update: Some(update),
                    candidate: Some(candidate),
                    transformed,
                    state,
                })
            }
            Gates::Conv { w, b } => {
                let (w, b) = (tape.param(store, w)?, tape.param(store, b)?);
                let out = tape.conv2d(joint, w, Some(b), 1, pad)?;
                let transformed = if self.variant == StuVariant::ConvRes {
                    tape.add(out, f_enc)?
                } else {
                    out
                };
                Ok(StuTrace {
                    upsampled,
                    reset: None,
                    update: None,
                    candidate: None,
                    transformed,
                    state: upsampled,
                })
            }
        }
    }
}
