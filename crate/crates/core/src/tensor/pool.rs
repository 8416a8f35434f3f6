//! 3×3 max and average pooling.

use serde::{Deserialize, Serialize};

use super::conv::valid_range;
use super::{c, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

pub const POOL_KERNEL: usize = 3;
pub const POOL_PADDING: usize = 1;

pub(crate) fn out_shape(x: &[usize], kernel: usize, stride: usize) -> Result<Vec<usize>> {
    const OP: &str = "pool2d";
    if kernel != POOL_KERNEL {
        return Err(Error::shape(
            OP,
            format!("unsupported kernel size {kernel}, only 3x3 is available"),
        ));
    }
    if x.len() != 4 {
        return Err(Error::shape(OP, format!("input must be NCHW, got {x:?}")));
    }
    if stride == 0 {
        return Err(Error::shape(OP, "stride must be positive"));
    }
    let span = |len: usize, axis: &str| {
        let padded = len + 2 * POOL_PADDING;
        if padded < kernel {
            Err(Error::shape(OP, format!("{axis} {len} smaller than kernel extent")))
        } else {
            Ok((padded - kernel) / stride + 1)
        }
    };
    Ok(vec![x[0], x[1], span(x[2], "height")?, span(x[3], "width")?])
}

/// Forward pass. For max pooling the second buffer holds the flat input index
/// each output was taken from (lowest index wins ties); for average pooling it
/// holds the number of in-bounds elements averaged.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    xs: &[usize],
    os: &[usize],
    kind: PoolKind,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let mut out = vec![T::zero(); nc * ho * wo];
    let mut aux = vec![0usize; out.len()];
    for p in 0..nc {
        let ib = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let oi = (p * ho + oh) * wo + ow;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                let mut sum = T::zero();
                let mut count = 0usize;
                for kh in 0..POOL_KERNEL {
                    let ih = (oh * stride + kh) as isize - POOL_PADDING as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..POOL_KERNEL {
                        let iw = (ow * stride + kw) as isize - POOL_PADDING as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = ib + ih as usize * w + iw as usize;
                        let v = x[idx];
                        match kind {
                            PoolKind::Max => {
                                // Row-major scan with strict comparison keeps the
                                // lowest flat index among equal maxima.
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                            PoolKind::Avg => {
                                sum = sum + v;
                                count += 1;
                            }
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out[oi] = best;
                        aux[oi] = best_idx;
                    }
                    PoolKind::Avg => {
                        out[oi] = sum / c(count as f64);
                        aux[oi] = count;
                    }
                }
            }
        }
    }
    (out, aux)
}

pub(crate) fn backward<T: Scalar>(
    gy: &[T],
    aux: &[usize],
    xs: &[usize],
    os: &[usize],
    kind: PoolKind,
    stride: usize,
) -> Vec<T> {
    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (ho, wo) = (os[2], os[3]);
    let mut dx = vec![T::zero(); nc * h * w];
    match kind {
        PoolKind::Max => {
            for (g, &idx) in gy.iter().zip(aux) {
                dx[idx] = dx[idx] + *g;
            }
        }
        PoolKind::Avg => {
            for p in 0..nc {
                let ib = p * h * w;
                for kh in 0..POOL_KERNEL {
                    let (oh_lo, oh_hi) = valid_range(ho, h, stride, POOL_PADDING, kh);
                    for kw in 0..POOL_KERNEL {
                        let (ow_lo, ow_hi) = valid_range(wo, w, stride, POOL_PADDING, kw);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - POOL_PADDING;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * stride + kw - POOL_PADDING;
                                let oi = (p * ho + oh) * wo + ow;
                                let d = &mut dx[ib + ih * w + iw];
                                *d = *d + gy[oi] / c(aux[oi] as f64);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
