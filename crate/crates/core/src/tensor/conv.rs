//! Direct 2-D convolution kernels over NCHW buffers.

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Stride-1, unpadded, ungrouped.
    pub fn pointwise() -> Self {
        Self::new(1, 0, 1, 1)
    }

    /// Output length along one spatial axis, or `None` when the padded input
    /// is shorter than the dilated kernel.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            None
        } else {
            Some((padded - span) / self.stride + 1)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.ho, self.wo]
    }
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], g: &ConvGeometry) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    if x.len() != 4 {
        return Err(Error::shape(OP, format!("input must be NCHW, got {x:?}")));
    }
    if w.len() != 4 {
        return Err(Error::shape(
            OP,
            format!("weight must be [out, in/groups, kh, kw], got {w:?}"),
        ));
    }
    if g.groups == 0 || g.stride == 0 || g.dilation == 0 {
        return Err(Error::shape(OP, "stride, dilation and groups must be positive"));
    }
    let (n, cin, h, wi) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if cin % g.groups != 0 {
        return Err(Error::shape(
            OP,
            format!("input channels {cin} not divisible by groups {}", g.groups),
        ));
    }
    if cout % g.groups != 0 {
        return Err(Error::shape(
            OP,
            format!("output channels {cout} not divisible by groups {}", g.groups),
        ));
    }
    if cin / g.groups != cin_g {
        return Err(Error::shape(
            OP,
            format!(
                "weight in-channel dim {cin_g} != input channels {cin} / groups {}",
                g.groups
            ),
        ));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape(OP, "kernel extent must be positive"));
    }
    let ho = g.out_len(h, kh).ok_or_else(|| {
        Error::shape(
            OP,
            format!("height {h} with padding {} is smaller than kernel extent", g.padding),
        )
    })?;
    let wo = g.out_len(wi, kw).ok_or_else(|| {
        Error::shape(
            OP,
            format!("width {wi} with padding {} is smaller than kernel extent", g.padding),
        )
    })?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w: wi,
        cout,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Half-open range of output positions `o` for which `o*stride + offset - pad`
/// lands inside `[0, input)`.
#[inline]
pub(crate) fn valid_range(
    out: usize,
    input: usize,
    stride: usize,
    pad: usize,
    offset: usize,
) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > offset {
        ((input - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (output row/col span, input row/col start) pair a kernel tap
/// touches. `f(oh, ow_lo, ow_hi, ih, iw_lo)` runs once per valid output row.
#[inline]
fn for_each_tap_row(
    d: &ConvDims,
    g: &ConvGeometry,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let (oh_lo, oh_hi) = valid_range(d.ho, d.h, g.stride, g.padding, kh * g.dilation);
    let (ow_lo, ow_hi) = valid_range(d.wo, d.w, g.stride, g.padding, kw * g.dilation);
    if ow_lo >= ow_hi {
        return;
    }
    for oh in oh_lo..oh_hi {
        let ih = oh * g.stride + kh * g.dilation - g.padding;
        let iw_lo = ow_lo * g.stride + kw * g.dilation - g.padding;
        f(oh, ow_lo, ow_hi, ih, iw_lo);
    }
}

fn is_pointwise(d: &ConvDims, g: &ConvGeometry) -> bool {
    d.kh == 1 && d.kw == 1 && g.stride == 1 && g.padding == 0
}

pub(crate) fn forward<T: Scalar>(x: &[T], w: &[T], d: &ConvDims, g: &ConvGeometry) -> Vec<T> {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let ksz = d.kh * d.kw;
    let mut out = vec![T::zero(); d.n * d.cout * out_plane];
    let pointwise = is_pointwise(d, g);
    for n in 0..d.n {
        for grp in 0..g.groups {
            for col in 0..cout_g {
                let co = grp * cout_g + col;
                let o_off = (n * d.cout + co) * out_plane;
                let out_p = &mut out[o_off..o_off + out_plane];
                for cil in 0..cin_g {
                    let ci = grp * cin_g + cil;
                    let i_off = (n * d.cin + ci) * in_plane;
                    let in_p = &x[i_off..i_off + in_plane];
                    let w_off = (co * cin_g + cil) * ksz;
                    if pointwise {
                        let wv = w[w_off];
                        for (o, &i) in out_p.iter_mut().zip(in_p) {
                            *o = *o + wv * i;
                        }
                        continue;
                    }
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let wv = w[w_off + kh * d.kw + kw];
                            for_each_tap_row(d, g, kh, kw, |oh, lo, hi, ih, iw0| {
                                let orow = &mut out_p[oh * d.wo + lo..oh * d.wo + hi];
                                let irow = &in_p[ih * d.w..(ih + 1) * d.w];
                                if g.stride == 1 {
                                    for (o, &i) in orow.iter_mut().zip(&irow[iw0..]) {
                                        *o = *o + wv * i;
                                    }
                                } else {
                                    for (j, o) in orow.iter_mut().enumerate() {
                                        *o = *o + wv * irow[iw0 + j * g.stride];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of the convolution w.r.t. its input and/or weight.
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let cin_g = d.cin / g.groups;
    let cout_g = d.cout / g.groups;
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let ksz = d.kh * d.kw;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let pointwise = is_pointwise(d, g);
    for n in 0..d.n {
        for grp in 0..g.groups {
            for col in 0..cout_g {
                let co = grp * cout_g + col;
                let o_off = (n * d.cout + co) * out_plane;
                let gy_p = &gy[o_off..o_off + out_plane];
                for cil in 0..cin_g {
                    let ci = grp * cin_g + cil;
                    let i_off = (n * d.cin + ci) * in_plane;
                    let w_off = (co * cin_g + cil) * ksz;
                    if pointwise {
                        let in_p = &x[i_off..i_off + in_plane];
                        if let Some(dx) = dx.as_mut() {
                            let wv = w[w_off];
                            for (o, &gv) in dx[i_off..i_off + in_plane].iter_mut().zip(gy_p) {
                                *o = *o + wv * gv;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            let mut acc = T::zero();
                            for (&gv, &iv) in gy_p.iter().zip(in_p) {
                                acc = acc + gv * iv;
                            }
                            dw[w_off] = dw[w_off] + acc;
                        }
                        continue;
                    }
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let widx = w_off + kh * d.kw + kw;
                            let wv = w[widx];
                            let mut acc = T::zero();
                            for_each_tap_row(d, g, kh, kw, |oh, lo, hi, ih, iw0| {
                                let grow = &gy_p[oh * d.wo + lo..oh * d.wo + hi];
                                let row_off = i_off + ih * d.w;
                                if let Some(dx) = dx.as_mut() {
                                    let drow = &mut dx[row_off..row_off + d.w];
                                    if g.stride == 1 {
                                        for (o, &gv) in drow[iw0..].iter_mut().zip(grow) {
                                            *o = *o + wv * gv;
                                        }
                                    } else {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            let o = &mut drow[iw0 + j * g.stride];
                                            *o = *o + wv * gv;
                                        }
                                    }
                                }
                                if need_dw {
                                    let irow = &x[row_off..row_off + d.w];
                                    if g.stride == 1 {
                                        for (&gv, &iv) in grow.iter().zip(&irow[iw0..]) {
                                            acc = acc + gv * iv;
                                        }
                                    } else {
                                        for (j, &gv) in grow.iter().enumerate() {
                                            acc = acc + gv * irow[iw0 + j * g.stride];
                                        }
                                    }
                                }
                            });
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] = dw[widx] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
