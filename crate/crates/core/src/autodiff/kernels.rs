//! Plain (non-recording) convolution kernels and their adjoints.
//!
//! Every loop nest here is written so that the innermost loop walks the time
//! axis contiguously. Padding is handled by clipping the time range instead
//! of materialising a padded copy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a strided, dilated, zero-padded 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    pub fn stride(stride: usize) -> Self {
        ConvSpec {
            stride,
            ..Default::default()
        }
    }

    pub fn dilated(dilation: usize, pad_left: usize, pad_right: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            pad_left,
            pad_right,
        }
    }

    /// Output length for an input of `len` samples and kernel width `width`.
    pub fn output_len(&self, len: usize, width: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::dim("conv1d", "stride and dilation must be ≥ 1"));
        }
        let padded = len + self.pad_left + self.pad_right;
        let span = self.dilation * (width - 1) + 1;
        if padded < span {
            return Err(Error::dim(
                "conv1d",
                format!("padded input length {padded} shorter than kernel span {span}"),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }
}

/// Range of output frames `t` for which `t * stride + offset` lands inside
/// `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `output[c, t] = Σ_ci Σ_k kernels[c, ci, k] · padded[ci, t·stride + k·dilation]`.
pub fn conv1d(input: &Tensor, kernels: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (cin, tin) = input.dims2("conv1d")?;
    let (cout, kcin, width) = kernels.dims3("conv1d")?;
    if kcin != cin {
        return Err(Error::dim(
            "conv1d",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    let tout = spec.output_len(tin, width)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; cout * tout];
    for co in 0..cout {
        let orow = &mut out[co * tout..(co + 1) * tout];
        for ci in 0..cin {
            let xrow = &x[ci * tin..(ci + 1) * tin];
            for kk in 0..width {
                let w = k[(co * cin + ci) * width + kk];
                let offset = (kk * spec.dilation) as isize - spec.pad_left as isize;
                let (lo, hi) = valid_range(offset, spec.stride, tin, tout);
                if spec.stride == 1 {
                    let start = (lo as isize + offset) as usize;
                    let src = &xrow[start..start + (hi - lo)];
                    for (o, &v) in orow[lo..hi].iter_mut().zip(src) {
                        *o += w * v;
                    }
                } else {
                    for t in lo..hi {
                        orow[t] += w * xrow[(t as isize * spec.stride as isize + offset) as usize];
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, tout], out)
}

/// Gradients of [`conv1d`] w.r.t. input and kernels given the output gradient.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    spec: ConvSpec,
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, tin) = (input.shape()[0], input.shape()[1]);
    let (cout, width) = (kernels.shape()[0], kernels.shape()[2]);
    let tout = grad_out.len() / cout;
    let x = input.data();
    let k = kernels.data();
    let mut gx = need_input.then(|| vec![0.0; cin * tin]);
    let mut gk = need_kernel.then(|| vec![0.0; k.len()]);
    for co in 0..cout {
        let grow = &grad_out[co * tout..(co + 1) * tout];
        for ci in 0..cin {
            for kk in 0..width {
                let kidx = (co * cin + ci) * width + kk;
                let offset = (kk * spec.dilation) as isize - spec.pad_left as isize;
                let (lo, hi) = valid_range(offset, spec.stride, tin, tout);
                if lo >= hi {
                    continue;
                }
                let w = k[kidx];
                let mut acc = 0.0;
                if spec.stride == 1 {
                    let start = ci * tin + (lo as isize + offset) as usize;
                    if let Some(gx) = gx.as_mut() {
                        for (d, &g) in gx[start..start + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                            *d += w * g;
                        }
                    }
                    if need_kernel {
                        acc = x[start..start + (hi - lo)]
                            .iter()
                            .zip(&grow[lo..hi])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                } else {
                    for t in lo..hi {
                        let idx = ci * tin + (t as isize * spec.stride as isize + offset) as usize;
                        if let Some(gx) = gx.as_mut() {
                            gx[idx] += w * grow[t];
                        }
                        acc += x[idx] * grow[t];
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Scatter-add of kernel copies: the adjoint of [`conv1d`] without padding.
///
/// `kernels` is `[C_in × C_out × K]`; the output has `(T − 1)·stride + K`
/// samples.
pub fn conv_transpose1d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (cin, tin) = input.dims2("conv_transpose1d")?;
    let (kcin, cout, width) = kernels.dims3("conv_transpose1d")?;
    if kcin != cin {
        return Err(Error::dim(
            "conv_transpose1d",
            format!("kernel expects {kcin} input channels, input has {cin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim("conv_transpose1d", "stride must be ≥ 1"));
    }
    let tout = (tin - 1) * stride + width;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; cout * tout];
    for ci in 0..cin {
        let xrow = &x[ci * tin..(ci + 1) * tin];
        for co in 0..cout {
            let krow = &k[(ci * cout + co) * width..(ci * cout + co + 1) * width];
            let orow = &mut out[co * tout..(co + 1) * tout];
            for (t, &v) in xrow.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let base = t * stride;
                for (o, &w) in orow[base..base + width].iter_mut().zip(krow) {
                    *o += v * w;
                }
            }
        }
    }
    Tensor::new(&[cout, tout], out)
}

pub(crate) fn conv_transpose1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, tin) = (input.shape()[0], input.shape()[1]);
    let (cout, width) = (kernels.shape()[1], kernels.shape()[2]);
    let tout = grad_out.len() / cout;
    let x = input.data();
    let k = kernels.data();
    let mut gx = need_input.then(|| vec![0.0; cin * tin]);
    let mut gk = need_kernel.then(|| vec![0.0; k.len()]);
    for ci in 0..cin {
        for co in 0..cout {
            let kbase = (ci * cout + co) * width;
            let grow = &grad_out[co * tout..(co + 1) * tout];
            for t in 0..tin {
                let gslice = &grow[t * stride..t * stride + width];
                if let Some(gx) = gx.as_mut() {
                    gx[ci * tin + t] += gslice
                        .iter()
                        .zip(&k[kbase..kbase + width])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                if let Some(gk) = gk.as_mut() {
                    let v = x[ci * tin + t];
                    if v != 0.0 {
                        for (d, &g) in gk[kbase..kbase + width].iter_mut().zip(gslice) {
                            *d += v * g;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Per-channel dilated convolution: `out[c, t] = Σ_k kernels[c, k] · padded[c, t + k·dilation]`.
pub fn depthwise_conv1d(input: &Tensor, kernels: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let (c, tin) = input.dims2("depthwise_conv1d")?;
    let (kc, width) = kernels.dims2("depthwise_conv1d")?;
    if kc != c {
        return Err(Error::dim(
            "depthwise_conv1d",
            format!("kernel has {kc} channels, input has {c}"),
        ));
    }
    let tout = spec.output_len(tin, width)?;
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; c * tout];
    for ch in 0..c {
        let xrow = &x[ch * tin..(ch + 1) * tin];
        let orow = &mut out[ch * tout..(ch + 1) * tout];
        for kk in 0..width {
            let w = k[ch * width + kk];
            let offset = (kk * spec.dilation) as isize - spec.pad_left as isize;
            let (lo, hi) = valid_range(offset, spec.stride, tin, tout);
            for t in lo..hi {
                orow[t] += w * xrow[(t as isize * spec.stride as isize + offset) as usize];
            }
        }
    }
    Tensor::new(&[c, tout], out)
}

pub(crate) fn depthwise_conv1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    spec: ConvSpec,
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (c, tin) = (input.shape()[0], input.shape()[1]);
    let width = kernels.shape()[1];
    let tout = grad_out.len() / c;
    let x = input.data();
    let k = kernels.data();
    let mut gx = need_input.then(|| vec![0.0; c * tin]);
    let mut gk = need_kernel.then(|| vec![0.0; k.len()]);
    for ch in 0..c {
        let grow = &grad_out[ch * tout..(ch + 1) * tout];
        for kk in 0..width {
            let w = k[ch * width + kk];
            let offset = (kk * spec.dilation) as isize - spec.pad_left as isize;
            let (lo, hi) = valid_range(offset, spec.stride, tin, tout);
            let mut acc = 0.0;
            for t in lo..hi {
                let idx = ch * tin + (t as isize * spec.stride as isize + offset) as usize;
                if let Some(gx) = gx.as_mut() {
                    gx[idx] += w * grow[t];
                }
                acc += x[idx] * grow[t];
            }
            if let Some(gk) = gk.as_mut() {
                gk[ch * width + kk] += acc;
            }
        }
    }
    (gx, gk)
}
