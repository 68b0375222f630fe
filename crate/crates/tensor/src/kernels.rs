//! Raw compute kernels. Convolutions go through im2col and a single batched
//! GEMM; the naive loop versions used as oracles live in the test suites.

use crate::error::{dim_err, Result};
use crate::{Float, Tensor};

/// Spatial output size of a strided, zero-padded convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < k {
        return None;
    }
    Some((input + 2 * pad - k) / stride + 1)
}

/// Default spatial output size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + k).checked_sub(2 * pad)
}

/// `c (m x n) = alpha * op(a) * op(b) + beta * c`, all row-major.
///
/// `op(a)` is `m x k`; when `ta` is set `a` is stored as `k x m`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above, strides describe the stated layouts and
    // `c` is a distinct mutable slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Geometry of a convolution from a (c, h, w) input to a (ho, wo) output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one (c, h, w) image into column block `offset..offset + ho*wo` of
/// a (c*k*k) x `ld` matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let (k, s) = (g.k, g.stride);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + g.out_len()];
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column block back into an image.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, ld: usize, offset: usize, x: &mut [T]) {
    let (k, s) = (g.k, g.stride);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + offset..row * ld + offset + g.out_len()];
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let line = &src[oh * g.wo..(oh + 1) * g.wo];
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * s + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// (n, c, s) -> (c, n*s)
fn to_channel_major<T: Float>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s]
                .copy_from_slice(&x[(b * c + ch) * s..(b * c + ch + 1) * s]);
        }
    }
    out
}

/// (c, n*s) -> (n, c, s)
fn from_channel_major<T: Float>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * s..(b * c + ch + 1) * s]
                .copy_from_slice(&x[ch * n * s + b * s..ch * n * s + (b + 1) * s]);
        }
    }
    out
}

fn check_weight(op: &'static str, w: &Tensor<impl Float>) -> Result<(usize, usize, usize)> {
    match w.shape() {
        &[o, c, k1, k2] if k1 == k2 && k1 > 0 => Ok((o, c, k1)),
        s => dim_err(op, format!("weight must be (out, in, k, k), got {s:?}")),
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 {
        return dim_err(op, "stride must be at least 1");
    }
    Ok(())
}

/// Cross-correlation of `x` (n, c, h, w) with `w` (o, c, k, k).
pub(crate) fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_stride("conv2d", stride)?;
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, k) = check_weight("conv2d", w)?;
    if wc != c {
        return dim_err(
            "conv2d",
            format!("input has {c} channels, weight expects {wc}"),
        );
    }
    let (Some(ho), Some(wo)) = (conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad))
    else {
        return dim_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}"));
    };
    let g = ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let ld = n * g.out_len();
    let mut cols = vec![T::zero(); g.rows() * ld];
    for b in 0..n {
        im2col(&x.data()[b * c * h * wd..(b + 1) * c * h * wd], &g, &mut cols, ld, b * g.out_len());
    }
    let mut out = vec![T::zero(); o * ld];
    gemm(false, false, o, ld, g.rows(), T::one(), w.data(), &cols, T::zero(), &mut out);
    Tensor::new(&[n, o, ho, wo], from_channel_major(&out, n, o, g.out_len()))
}

/// Transposed convolution of `x` (n, a, h, w) with `w` (a, b, k, k): the
/// input-adjoint of [`conv2d`] with the same weight. `out_hw` selects the
/// output size when several are consistent with the stride.
pub(crate) fn conv_transpose2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    check_stride("conv_transpose2d", stride)?;
    let (n, a, h, wd) = x.dims4()?;
    let (wa, b, k) = check_weight("conv_transpose2d", w)?;
    if wa != a {
        return dim_err(
            "conv_transpose2d",
            format!("input has {a} channels, weight expects {wa}"),
        );
    }
    let (ho, wo) = match out_hw {
        Some(hw) => hw,
        None => match (
            conv_transpose_out_size(h, k, stride, pad),
            conv_transpose_out_size(wd, k, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return dim_err("conv_transpose2d", "padding exceeds output extent"),
        },
    };
    if conv_out_size(ho, k, stride, pad) != Some(h) || conv_out_size(wo, k, stride, pad) != Some(wd) {
        return dim_err(
            "conv_transpose2d",
            format!("output {ho}x{wo} inconsistent with input {h}x{wd}"),
        );
    }
    let g = ConvGeom {
        c: b,
        h: ho,
        w: wo,
        k,
        stride,
        pad,
        ho: h,
        wo: wd,
    };
    let ld = n * h * wd;
    let xs = to_channel_major(x.data(), n, a, h * wd);
    let mut cols = vec![T::zero(); g.rows() * ld];
    gemm(true, false, g.rows(), ld, a, T::one(), w.data(), &xs, T::zero(), &mut cols);
    let mut out = vec![T::zero(); n * b * ho * wo];
    for s in 0..n {
        col2im(&cols, &g, ld, s * h * wd, &mut out[s * b * ho * wo..(s + 1) * b * ho * wo]);
    }
    Tensor::new(&[n, b, ho, wo], out)
}

/// Gradient of `<conv2d(x, w), dy>` with respect to a `k x k` weight.
pub(crate) fn conv2d_weight_grad<T: Float>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_stride("conv2d_weight_grad", stride)?;
    let (n, c, h, wd) = x.dims4()?;
    let (dn, o, ho, wo) = dy.dims4()?;
    if dn != n
        || conv_out_size(h, k, stride, pad) != Some(ho)
        || conv_out_size(wd, k, stride, pad) != Some(wo)
    {
        return dim_err(
            "conv2d_weight_grad",
            format!("input {:?} and output {:?} disagree", x.shape(), dy.shape()),
        );
    }
    let g = ConvGeom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho,
        wo,
    };
    let ld = n * g.out_len();
    let mut cols = vec![T::zero(); g.rows() * ld];
    for b in 0..n {
        im2col(&x.data()[b * c * h * wd..(b + 1) * c * h * wd], &g, &mut cols, ld, b * g.out_len());
    }
    let dys = to_channel_major(dy.data(), n, o, g.out_len());
    let mut out = vec![T::zero(); o * g.rows()];
    gemm(false, true, o, g.rows(), ld, T::one(), &dys, &cols, T::zero(), &mut out);
    Tensor::new(&[o, c, k, k], out)
}

/// Per-(sample, channel) statistics saved by the fused instance norm.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn instance_norm<T: Float>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return dim_err(
            "instance_norm",
            format!("affine parameters must be ({c}), got {:?}/{:?}", scale.shape(), shift.shape()),
        );
    }
    let m = h * w;
    let inv_m = T::one() / T::of(m as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n * c),
        inv_std: Vec::with_capacity(n * c),
    };
    for (idx, plane) in x.data().chunks(m).enumerate() {
        let ch = idx % c;
        let mean = plane.iter().copied().sum::<T>() * inv_m;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let inv = T::one() / (var + eps).sqrt();
        let (a, b) = (scale.data()[ch], shift.data()[ch]);
        for (o, &v) in out[idx * m..(idx + 1) * m].iter_mut().zip(plane) {
            *o = (v - mean) * inv * a + b;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv);
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

/// Returns (dx, dscale, dshift).
pub(crate) fn instance_norm_backward<T: Float>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (_, c, h, w) = x.dims4().expect("checked in forward");
    let m = h * w;
    let inv_m = T::one() / T::of(m as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for (idx, (plane, gplane)) in x.data().chunks(m).zip(dy.data().chunks(m)).enumerate() {
        let ch = idx % c;
        let (mean, inv) = (stats.mean[idx], stats.inv_std[idx]);
        let a = scale.data()[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&v, &g) in plane.iter().zip(gplane) {
            let xhat = (v - mean) * inv;
            sum_g += g;
            sum_gx += g * xhat;
        }
        dscale[ch] += sum_gx;
        dshift[ch] += sum_g;
        for ((d, &v), &g) in dx[idx * m..(idx + 1) * m].iter_mut().zip(plane).zip(gplane) {
            let xhat = (v - mean) * inv;
            *d = a * inv * (g - sum_g * inv_m - xhat * sum_gx * inv_m);
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("same shape"),
        Tensor::new(&[c], dscale).expect("channel vector"),
        Tensor::new(&[c], dshift).expect("channel vector"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_size(64, 4, 2, 1), Some(32));
        assert_eq!(conv_out_size(5, 4, 2, 1), Some(2));
        assert_eq!(conv_out_size(2, 4, 1, 0), None);
        assert_eq!(conv_transpose_out_size(4, 4, 2, 1), Some(8));
        assert_eq!(conv_transpose_out_size(1, 4, 2, 1), Some(2));
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn channel_major_round_trip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let cm = to_channel_major(&x, 2, 3, 4);
        assert_eq!(&cm[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(from_channel_major(&cm, 2, 3, 4), x);
    }
}
