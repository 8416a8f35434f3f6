//! Per-channel batch normalization kernels for NCHW buffers.

use super::{c, Scalar};
use crate::error::{Error, Result};

/// Batch statistics observed in a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance, folded into running statistics.
    pub unbiased_var: Vec<T>,
}

pub(crate) struct NormOut<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 && shape.len() != 2 {
        return Err(Error::shape(
            "batch_norm",
            format!("expected NCHW or NC input, got {shape:?}"),
        ));
    }
    let n = shape[0];
    let ch = shape[1];
    let plane: usize = shape[2..].iter().product();
    if n * plane == 0 {
        return Err(Error::shape(
            "batch_norm",
            format!("channel has zero elements for input {shape:?}"),
        ));
    }
    Ok((n, ch, plane))
}

pub(crate) fn forward_train<T: Scalar>(x: &[T], shape: &[usize], eps: f64) -> Result<NormOut<T>> {
    let (n, ch, plane) = check_shape(shape)?;
    let m = n * plane;
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    let mut unbiased = vec![T::zero(); ch];
    let mut inv_std = vec![T::zero(); ch];
    for cix in 0..ch {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * ch + cix) * plane;
            for &v in &x[off..off + plane] {
                s = s + v;
            }
        }
        let mu = s / c(m as f64);
        let mut ss = T::zero();
        for b in 0..n {
            let off = (b * ch + cix) * plane;
            for &v in &x[off..off + plane] {
                let d = v - mu;
                ss = ss + d * d;
            }
        }
        mean[cix] = mu;
        var[cix] = ss / c(m as f64);
        unbiased[cix] = if m > 1 { ss / c((m - 1) as f64) } else { T::zero() };
        inv_std[cix] = T::one() / (var[cix] + c(eps)).sqrt();
    }
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for cix in 0..ch {
            let off = (b * ch + cix) * plane;
            let (mu, is) = (mean[cix], inv_std[cix]);
            for (o, &v) in xhat[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = (v - mu) * is;
            }
        }
    }
    Ok(NormOut {
        xhat,
        inv_std,
        stats: BatchStats {
            mean,
            var,
            unbiased_var: unbiased,
        },
    })
}

/// Gradient w.r.t. the input of a training-mode normalization, given the
/// gradient w.r.t. the normalized values `xhat`.
pub(crate) fn backward_train<T: Scalar>(
    g_xhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    shape: &[usize],
) -> Vec<T> {
    let n = shape[0];
    let ch = shape[1];
    let plane: usize = shape[2..].iter().product();
    let m: T = c((n * plane) as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    for cix in 0..ch {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for b in 0..n {
            let off = (b * ch + cix) * plane;
            for i in off..off + plane {
                sum_g = sum_g + g_xhat[i];
                sum_gx = sum_gx + g_xhat[i] * xhat[i];
            }
        }
        let k = inv_std[cix] / m;
        for b in 0..n {
            let off = (b * ch + cix) * plane;
            for i in off..off + plane {
                dx[i] = k * (m * g_xhat[i] - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    dx
}

/// Per-channel sum over batch and spatial positions.
pub(crate) fn channel_sum<T: Scalar>(v: &[T], shape: &[usize]) -> Vec<T> {
    let n = shape[0];
    let ch = shape[1];
    let plane: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); ch];
    for b in 0..n {
        for (cix, o) in out.iter_mut().enumerate() {
            let off = (b * ch + cix) * plane;
            for &x in &v[off..off + plane] {
                *o = *o + x;
            }
        }
    }
    out
}

pub(crate) fn channel_sum_prod<T: Scalar>(a: &[T], b: &[T], shape: &[usize]) -> Vec<T> {
    let n = shape[0];
    let ch = shape[1];
    let plane: usize = shape[2..].iter().product();
    let mut out = vec![T::zero(); ch];
    for bi in 0..n {
        for (cix, o) in out.iter_mut().enumerate() {
            let off = (bi * ch + cix) * plane;
            for i in off..off + plane {
                *o = *o + a[i] * b[i];
            }
        }
    }
    out
}

/// Applies `f(channel, value)` elementwise.
pub(crate) fn map_channels<T: Scalar>(
    v: &[T],
    shape: &[usize],
    mut f: impl FnMut(usize, T) -> T,
) -> Vec<T> {
    let ch = shape[1];
    let plane: usize = shape[2..].iter().product();
    v.iter()
        .enumerate()
        .map(|(i, &x)| f((i / plane) % ch, x))
        .collect()
}
