//! PSNR and SSIM on the 0-255 scale.

use stgan_tensor::{Float, Tensor};

use crate::data::unit_to_255;
use crate::error::{Error, Result};

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PEAK: f64 = 255.0;

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr: length mismatch");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region Gaussian filter.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of two single-channel images over the valid region of an
/// 11x11 Gaussian window.
pub fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "ssim needs at least an 11x11 image");
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let g = gaussian_window();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter(a, h, w, &g);
    let (mu_b, ..) = filter(b, h, w, &g);
    let (aa, ..) = filter(&prod(a, a), h, w, &g);
    let (bb, ..) = filter(&prod(b, b), h, w, &g);
    let (ab, ..) = filter(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (oh * ow) as f64
}

/// Channel-major (c, h, w) image on the 0-255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Image255 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image255 {
    /// From a (c, h, w) or (1, c, h, w) tensor with values in (-1, 1).
    pub fn from_unit<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            &[c, h, w] | &[1, c, h, w] => (c, h, w),
            s => return Err(Error::Contract(format!("expected one image, got shape {s:?}"))),
        };
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: t.data().iter().map(|v| unit_to_255(v.as_f64())).collect(),
        })
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

fn same_geometry(a: &Image255, b: &Image255) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Contract("images differ in shape".into()));
    }
    Ok(())
}

pub fn psnr_image(a: &Image255, b: &Image255) -> Result<f64> {
    same_geometry(a, b)?;
    Ok(psnr(&a.data, &b.data))
}

/// SSIM averaged over channels.
pub fn ssim_image(a: &Image255, b: &Image255) -> Result<f64> {
    same_geometry(a, b)?;
    let total: f64 = (0..a.channels)
        .map(|c| ssim_channel(a.plane(c), b.plane(c), a.height, a.width))
        .sum();
    Ok(total / a.channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..SSIM_WINDOW {
            assert!((g[i] - g[SSIM_WINDOW - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a: Vec<f64> = (0..256).map(|i| (i * 7 % 255) as f64).collect();
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        assert!((ssim_channel(&a, &a, 16, 16) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_of_ten_levels() {
        let a: Vec<f64> = (0..100).map(|i| (i % 200) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let expected = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&a, &b) - expected).abs() < 1e-9);
        assert!((expected - 28.13).abs() < 0.01);
    }
}
