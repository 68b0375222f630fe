//! Reconstruction, Wasserstein-with-penalty and attribute losses, and their
//! weighted totals. Everything returned here is a quantity to minimize.

use serde::{Deserialize, Serialize};
use stgan_tensor::{Float, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Probabilities entering a log are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gp: f64,
    /// Discriminator attribute term.
    pub lambda1: f64,
    /// Generator attribute term.
    pub lambda2: f64,
    /// Reconstruction term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda1: 1.0,
            lambda2: 10.0,
            lambda3: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gp, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape<T: Float>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute difference over batch and elements.
pub fn reconstruction_loss<T: Float>(tape: &mut Tape<T>, x: Var, x_rec: Var) -> Result<Var> {
    same_shape(tape, x, x_rec, "reconstruction_loss")?;
    let d = tape.sub(x_rec, x)?;
    let a = tape.abs(d)?;
    Ok(tape.mean(a)?)
}

/// Binary cross-entropy summed over attributes and averaged over the batch.
/// `probs` is (n, c); `targets` must be binary with the same shape.
pub fn bce<T: Float>(tape: &mut Tape<T>, probs: Var, targets: &Tensor<T>) -> Result<Var> {
    if tape.shape(probs) != targets.shape() || targets.ndim() != 2 {
        return Err(Error::Contract(format!(
            "attribute probabilities {:?} and labels {:?} must both be (n, c)",
            tape.shape(probs),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::Contract("attribute labels must be 0 or 1".into()));
    }
    let n = targets.shape()[0].max(1);
    let eps = T::of(BCE_EPS);
    let p = tape.clamp(probs, eps, T::one() - eps)?;
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -T::one(), T::one())?;
    let log_q = tape.log(q)?;
    let t = tape.constant(targets.clone())?;
    let not_t = tape.constant(targets.map(|v| T::one() - v))?;
    let pos = tape.mul(t, log_p)?;
    let neg = tape.mul(not_t, log_q)?;
    let ll = tape.add(pos, neg)?;
    let total = tape.sum(ll)?;
    Ok(tape.scale(total, -T::one() / T::of(n as f64))?)
}

/// Attribute loss of the discriminator on real images against source labels.
pub fn d_att_loss<T: Float>(tape: &mut Tape<T>, att_logits: Var, source: &Tensor<T>) -> Result<Var> {
    let p = tape.sigmoid(att_logits)?;
    bce(tape, p, source)
}

/// Attribute loss of the generator on edited images against target labels.
pub fn g_att_loss<T: Float>(tape: &mut Tape<T>, att_logits: Var, target: &Tensor<T>) -> Result<Var> {
    let p = tape.sigmoid(att_logits)?;
    bce(tape, p, target)
}

/// Points on the segments between real and fake samples, one coefficient per sample.
pub fn interpolate<T: Float>(real: &Tensor<T>, fake: &Tensor<T>, alpha: &[T]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Contract(format!(
            "gradient_penalty: real {:?} and fake {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape().first().copied().unwrap_or(0);
    if alpha.len() != n {
        return Err(Error::Contract(format!("expected {n} interpolation coefficients, got {}", alpha.len())));
    }
    let per = real.numel() / n.max(1);
    let mut out = real.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
        let f = &fake.data()[i * per..(i + 1) * per];
        for (r, &f) in chunk.iter_mut().zip(f) {
            *r = *r + alpha[i] * (f - *r);
        }
    }
    Ok(out)
}

/// Mean over the batch of `(|grad_x critic(x_hat)| - 1)^2`, differentiable
/// with respect to the critic's parameters. `critic` must map (n, ...) to
/// (n, 1) scores; a critic that ignores its input has zero gradient and
/// penalty 1.
pub fn gradient_penalty<T, F>(tape: &mut Tape<T>, mut critic: F, real: &Tensor<T>, fake: &Tensor<T>, alpha: &[T]) -> Result<Var>
where
    T: Float,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let x_hat = tape.leaf(interpolate(real, fake, alpha)?, true)?;
    let scores = critic(tape, x_hat)?;
    let total = tape.sum(scores)?;
    let g = tape.grad(total, &[x_hat], true)?[0];
    let n = real.shape()[0];
    let sq_norm = match g {
        Some(g) => {
            let sq = tape.mul(g, g)?;
            tape.sum_per_sample(sq)?
        }
        None => tape.constant(Tensor::zeros(&[n]))?,
    };
    let norm = tape.sqrt(sq_norm)?;
    let dev = tape.add_scalar(norm, -T::one())?;
    let sq = tape.mul(dev, dev)?;
    Ok(tape.mean(sq)?)
}

/// Negated critic objective plus the weighted penalty.
pub fn d_adv_loss<T: Float>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var, penalty: Var, lambda_gp: f64) -> Result<Var> {
    let r = tape.mean(real_scores)?;
    let f = tape.mean(fake_scores)?;
    let gap = tape.sub(f, r)?;
    let p = tape.scale(penalty, T::of(lambda_gp))?;
    Ok(tape.add(gap, p)?)
}

pub fn g_adv_loss<T: Float>(tape: &mut Tape<T>, fake_scores: Var) -> Result<Var> {
    let m = tape.mean(fake_scores)?;
    Ok(tape.neg(m)?)
}

/// Components of the discriminator objective, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DLossParts {
    pub real_score: f64,
    pub fake_score: f64,
    pub gradient_penalty: f64,
    pub adv: f64,
    pub att: f64,
    pub total: f64,
}

/// Components of the generator objective, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GLossParts {
    pub adv: f64,
    pub att: f64,
    pub rec: f64,
    pub total: f64,
}

/// `adv + lambda1 * att`.
pub fn total_d_loss<T: Float>(tape: &mut Tape<T>, adv: Var, att: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(att, T::of(w.lambda1))?;
    Ok(tape.add(adv, a)?)
}

/// `adv + lambda2 * att + lambda3 * rec`.
pub fn total_g_loss<T: Float>(tape: &mut Tape<T>, adv: Var, att: Var, rec: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(att, T::of(w.lambda2))?;
    let r = tape.scale(rec, T::of(w.lambda3))?;
    let s = tape.add(adv, a)?;
    Ok(tape.add(s, r)?)
}

pub fn scalar<T: Float>(tape: &Tape<T>, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()?.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_reconstruction_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin())).unwrap();
        let l = reconstruction_loss(&mut tape, x, x).unwrap();
        assert_eq!(scalar(&tape, l).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_offset() {
        let mut tape = Tape::<f64>::new();
        let base = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin() * 0.4);
        let x = tape.constant(base.clone()).unwrap();
        let y = tape.constant(base.map(|v| v + 0.5)).unwrap();
        let l = reconstruction_loss(&mut tape, x, y).unwrap();
        assert!((scalar(&tape, l).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn half_probabilities_cost_c_ln2() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[4, 3], 0.5)).unwrap();
        let t = Tensor::from_fn(&[4, 3], |i| (i % 2) as f64);
        let l = bce(&mut tape, p, &t).unwrap();
        assert!((scalar(&tape, l).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full(&[1, 2], 0.5)).unwrap();
        assert!(bce(&mut tape, p, &Tensor::new(&[1, 2], vec![0.5, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn default_weights_match_reference_values() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.lambda_gp), (1.0, 10.0, 100.0, 10.0));
    }
}
