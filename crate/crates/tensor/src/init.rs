//! Weight initializers.

use rand::Rng;

use crate::{Float, Tensor};

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Fan-in of a (out, in, k, k) convolution weight.
pub fn conv_fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}
