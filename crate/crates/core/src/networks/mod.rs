//! Generator (encoder, transfer cells, decoder) and two-headed discriminator.

mod discriminator;
mod generator;
mod layers;

pub use discriminator::{DiscOutput, Discriminator, DiscriminatorConfig};
pub use generator::{Conditioning, Generator, GeneratorConfig, Norm, SkipMode};

/// Base channel widths of the five encoder (and critic trunk) layers,
/// multiplied by the configured width factor.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
pub const NUM_LAYERS: usize = 5;
pub const NUM_STU: usize = 4;
pub const KERNEL: usize = 4;
pub const LEAK: f64 = 0.2;

pub fn scaled_widths(width: f64) -> [usize; 5] {
    BASE_WIDTHS.map(|c| ((c as f64 * width).round() as usize).max(1))
}
