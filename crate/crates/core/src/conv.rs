//! Grouped 2-D cross-correlation (no kernel flip) and its adjoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn default_groups() -> usize {
    1
}

fn default_stride() -> usize {
    1
}

/// Hyperparameters of one square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, `floor(k/2)` padding, one group, no bias.
    pub fn same(c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            groups: 1,
            bias: false,
        }
    }

    /// Depthwise: one filter per channel.
    pub fn depthwise(channels: usize, k: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..ConvSpec::same(channels, channels, k)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::invalid(format!(
                "channel counts must be positive (c_in={}, c_out={})",
                self.c_in, self.c_out
            )));
        }
        if self.k == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "kernel size and stride must be positive (k={}, stride={})",
                self.k, self.stride
            )));
        }
        if self.groups == 0 || !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::Groups {
                groups: self.groups,
                c_in: self.c_in,
                c_out: self.c_out,
            });
        }
        Ok(())
    }

    pub fn c_in_per_group(&self) -> usize {
        self.c_in / self.groups.max(1)
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in / self.groups.max(1), self.k, self.k)
    }

    /// `floor((h + 2p - k)/s) + 1` per axis; errors when the window does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let empty = || Error::EmptyOutput {
            h,
            w,
            k: self.k,
            stride: self.stride,
            padding: self.padding,
        };
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.k || pw < self.k || self.stride == 0 {
            return Err(empty());
        }
        Ok(((ph - self.k) / self.stride + 1, (pw - self.k) / self.stride + 1))
    }

    /// Closed-form multiply-accumulate count for one forward pass.
    pub fn macs(&self, n: usize, h_out: usize, w_out: usize) -> u64 {
        (n * h_out * w_out) as u64 * (self.k * self.k) as u64 * self.c_in_per_group() as u64 * self.c_out as u64
    }

    pub fn params(&self) -> u64 {
        let w = (self.k * self.k * self.c_in_per_group() * self.c_out) as u64;
        if self.bias {
            w + self.c_out as u64
        } else {
            w
        }
    }
}

/// Multiply-accumulate accumulator threaded through one forward pass.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter {
    macs: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, macs: u64) {
        self.macs += macs;
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }
}

fn check_conv(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.c_in {
        return Err(Error::shape(format!(
            "conv input has {} channels, spec expects {}",
            s.c, spec.c_in
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "conv weights have shape {}, spec expects {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    spec.output_hw(s.h, s.w)
}

/// Range of output columns whose tap `kw` lands inside `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, tap: usize, stride: usize, padding: usize) -> (usize, usize) {
    // in = o*stride + tap - padding must satisfy 0 <= in < in_len
    let lo = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    let hi = if in_len + padding > tap {
        ((in_len + padding - tap - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Grouped cross-correlation. Increments `counter` by the closed-form MAC count.
pub fn conv2d(input: &Tensor, weights: &Tensor, spec: &ConvSpec, counter: Option<&mut MacCounter>) -> Result<Tensor> {
    conv2d_with_bias(input, weights, None, spec, counter)
}

pub fn conv2d_with_bias(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
    counter: Option<&mut MacCounter>,
) -> Result<Tensor> {
    let (ho, wo) = check_conv(input, weights, spec)?;
    if let Some(b) = bias {
        if b.numel() != spec.c_out {
            return Err(Error::shape(format!(
                "bias has {} values, expected {}",
                b.numel(),
                spec.c_out
            )));
        }
    }
    let s = input.shape();
    let (k, st, pad) = (spec.k, spec.stride, spec.padding);
    let cig = spec.c_in_per_group();
    let cog = spec.c_out / spec.groups;
    let mut out = Tensor::zeros([s.n, spec.c_out, ho, wo]);
    let wdata = weights.data();

    for n in 0..s.n {
        for oc in 0..spec.c_out {
            let g = oc / cog;
            let mut acc = vec![0.0; ho * wo];
            for icg in 0..cig {
                let plane = input.plane(n, g * cig + icg);
                let wbase = (oc * cig + icg) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(ho, s.h, kh, st, pad);
                    for kw in 0..k {
                        let wv = wdata[wbase + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_range(wo, s.w, kw, st, pad);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * st + kh - pad;
                            let row = &plane[ih * s.w..(ih + 1) * s.w];
                            let dst = &mut acc[oh * wo..(oh + 1) * wo];
                            for ow in ow_lo..ow_hi {
                                dst[ow] += wv * row[ow * st + kw - pad];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b.data()[oc];
                acc.iter_mut().for_each(|v| *v += bv);
            }
            out.plane_mut(n, oc).copy_from_slice(&acc);
        }
    }

    if let Some(c) = counter {
        c.add(spec.macs(s.n, ho, wo));
    }
    Ok(out)
}

/// Gradients of a conv w.r.t. its input and weights given the output gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let (ho, wo) = check_conv(input, weights, spec)?;
    let s = input.shape();
    if grad_out.shape() != Shape::new(s.n, spec.c_out, ho, wo) {
        return Err(Error::shape(format!(
            "conv grad has shape {}, expected ({}, {}, {ho}, {wo})",
            grad_out.shape(),
            s.n,
            spec.c_out
        )));
    }
    let (k, st, pad) = (spec.k, spec.stride, spec.padding);
    let cig = spec.c_in_per_group();
    let cog = spec.c_out / spec.groups;
    let mut gin = Tensor::zeros(s);
    let mut gw = Tensor::zeros(weights.shape());
    let wdata = weights.data();

    for n in 0..s.n {
        for oc in 0..spec.c_out {
            let g = oc / cog;
            let go = grad_out.plane(n, oc);
            for icg in 0..cig {
                let ic = g * cig + icg;
                let wbase = (oc * cig + icg) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(ho, s.h, kh, st, pad);
                    for kw in 0..k {
                        let wv = wdata[wbase + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_range(wo, s.w, kw, st, pad);
                        let mut wacc = 0.0;
                        {
                            let plane = input.plane(n, ic);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * st + kh - pad;
                                for ow in ow_lo..ow_hi {
                                    wacc += go[oh * wo + ow] * plane[ih * s.w + ow * st + kw - pad];
                                }
                            }
                        }
                        gw.data_mut()[wbase + kh * k + kw] += wacc;
                        let gplane = gin.plane_mut(n, ic);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * st + kh - pad;
                            for ow in ow_lo..ow_hi {
                                gplane[ih * s.w + ow * st + kw - pad] += wv * go[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gw))
}
