//! Channel plumbing, pooling, dense and loss primitives plus their adjoints.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Concatenate along the channel axis in list order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!(
                "concat parts disagree on (n, h, w): {first} vs {s}"
            )));
        }
        c += s.c;
    }
    let mut out = Tensor::zeros([first.n, c, first.h, first.w]);
    for n in 0..first.n {
        let mut dst_c = 0;
        for p in parts {
            for pc in 0..p.shape().c {
                out.plane_mut(n, dst_c).copy_from_slice(p.plane(n, pc));
                dst_c += 1;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`concat_channels`]: split a gradient back into per-part channel counts.
pub fn split_channels(grad: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let s = grad.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(Error::shape(format!(
            "split sizes {sizes:?} do not sum to {} channels",
            s.c
        )));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let part = slice_channels(grad, start, len, false);
            start += len;
            part
        })
        .collect()
}

fn source_channel(start: usize, i: usize, c: usize, wrap: bool) -> usize {
    if wrap {
        (start + i) % c
    } else {
        start + i
    }
}

fn check_slice(s: Shape, start: usize, len: usize, wrap: bool) -> Result<()> {
    if wrap {
        if s.c == 0 && len > 0 {
            return Err(Error::ChannelRange {
                start,
                end: start + len,
                channels: 0,
            });
        }
    } else if start + len > s.c {
        return Err(Error::ChannelRange {
            start,
            end: start + len,
            channels: s.c,
        });
    }
    Ok(())
}

/// Copy channels `[start, start+len)`; with `wrap` indices are taken modulo `c`.
///
/// A zero-length slice yields an empty tensor, which the CompConv executor
/// uses for fully dropped segments.
pub fn slice_channels(t: &Tensor, start: usize, len: usize, wrap: bool) -> Result<Tensor> {
    let s = t.shape();
    check_slice(s, start, len, wrap)?;
    let mut out = Tensor::zeros([s.n, len, s.h, s.w]);
    for n in 0..s.n {
        for i in 0..len {
            out.plane_mut(n, i)
                .copy_from_slice(t.plane(n, source_channel(start, i, s.c, wrap)));
        }
    }
    Ok(out)
}

/// Adjoint of [`slice_channels`]; repeated source channels accumulate.
pub fn slice_channels_backward(input_shape: Shape, grad: &Tensor, start: usize, wrap: bool) -> Result<Tensor> {
    let len = grad.shape().c;
    check_slice(input_shape, start, len, wrap)?;
    let mut out = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for i in 0..len {
            let src = source_channel(start, i, input_shape.c, wrap);
            let g = grad.plane(n, i);
            for (d, v) in out.plane_mut(n, src).iter_mut().zip(g) {
                *d += v;
            }
        }
    }
    Ok(out)
}

/// Destination position of channel `i` under a `g`-group shuffle of `c` channels.
#[inline]
pub fn shuffle_destination(i: usize, c: usize, g: usize) -> usize {
    (i % g) * (c / g) + i / g
}

fn permute_channels(t: &Tensor, g: usize, inverse: bool) -> Result<Tensor> {
    let s = t.shape();
    if g == 0 || !s.c.is_multiple_of(g) {
        return Err(Error::invalid(format!(
            "shuffle groups {g} must divide {} channels",
            s.c
        )));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for i in 0..s.c {
            let d = shuffle_destination(i, s.c, g);
            let (src, dst) = if inverse { (d, i) } else { (i, d) };
            out.plane_mut(n, dst).copy_from_slice(t.plane(n, src));
        }
    }
    Ok(out)
}

/// Channel `i` moves to `(i mod g)*(c/g) + floor(i/g)`.
pub fn channel_shuffle(t: &Tensor, g: usize) -> Result<Tensor> {
    permute_channels(t, g, false)
}

pub fn channel_unshuffle(t: &Tensor, g: usize) -> Result<Tensor> {
    permute_channels(t, g, true)
}

/// Geometry of a strided pick that lines up with a host convolution's sample centres.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subsample {
    pub stride: usize,
    pub offset: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Subsample {
    /// Matches a `k`-kernel, `padding`-padded, `stride`-strided conv over `h x w`.
    pub fn for_host(h: usize, w: usize, stride: usize, k: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("subsample stride must be >= 1"));
        }
        if padding > k / 2 {
            return Err(Error::invalid(format!(
                "padding {padding} exceeds floor(k/2) for k={k}; first sample centre falls outside the input"
            )));
        }
        let offset = k / 2 - padding;
        let empty = Error::EmptyOutput {
            h,
            w,
            k,
            stride,
            padding,
        };
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(empty);
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (w + 2 * padding - k) / stride + 1;
        if offset + stride * (out_h - 1) >= h || offset + stride * (out_w - 1) >= w {
            return Err(empty);
        }
        Ok(Subsample {
            stride,
            offset,
            out_h,
            out_w,
        })
    }
}

pub fn spatial_subsample(t: &Tensor, sub: &Subsample) -> Result<Tensor> {
    let s = t.shape();
    if sub.out_h == 0
        || sub.out_w == 0
        || sub.offset + sub.stride * (sub.out_h - 1) >= s.h
        || sub.offset + sub.stride * (sub.out_w - 1) >= s.w
    {
        return Err(Error::shape(format!("subsample {sub:?} does not fit input {s}")));
    }
    let mut out = Tensor::zeros([s.n, s.c, sub.out_h, sub.out_w]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..sub.out_h {
                let row = (sub.offset + sub.stride * i) * s.w;
                for j in 0..sub.out_w {
                    dst[i * sub.out_w + j] = src[row + sub.offset + sub.stride * j];
                }
            }
        }
    }
    Ok(out)
}

pub fn spatial_subsample_backward(input_shape: Shape, grad: &Tensor, sub: &Subsample) -> Result<Tensor> {
    let gs = grad.shape();
    if (gs.n, gs.c, gs.h, gs.w) != (input_shape.n, input_shape.c, sub.out_h, sub.out_w) {
        return Err(Error::shape(format!("subsample gradient {gs} does not match {sub:?}")));
    }
    let mut out = Tensor::zeros(input_shape);
    for n in 0..gs.n {
        for c in 0..gs.c {
            let g = grad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..sub.out_h {
                let row = (sub.offset + sub.stride * i) * input_shape.w;
                for j in 0..sub.out_w {
                    dst[row + sub.offset + sub.stride * j] += g[i * sub.out_w + j];
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    input.expect_same_shape(grad)?;
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec_unchecked(input.shape(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.axpby(1.0, b, 1.0)
}

fn check_pool(s: Shape) -> Result<()> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even, non-zero spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Flat index into the input plane of the first maximum of each 2x2 window.
fn pool_argmax(plane: &[f64], w: usize, oh: usize, ow: usize) -> usize {
    let base = 2 * oh * w + 2 * ow;
    [base, base + 1, base + w, base + w + 1]
        .into_iter()
        .fold(base, |best, i| if plane[i] > plane[best] { i } else { best })
}

pub fn maxpool2x2(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    check_pool(s)?;
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros([s.n, s.c, ho, wo]);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[pool_argmax(src, s.w, i, j)];
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2x2_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    check_pool(s)?;
    let (ho, wo) = (s.h / 2, s.w / 2);
    if grad.shape() != Shape::new(s.n, s.c, ho, wo) {
        return Err(Error::shape("maxpool gradient shape mismatch"));
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad.plane(n, c);
            let argmax: Vec<usize> = {
                let src = input.plane(n, c);
                (0..ho * wo).map(|o| pool_argmax(src, s.w, o / wo, o % wo)).collect()
            };
            let dst = out.plane_mut(n, c);
            for (o, &i) in argmax.iter().enumerate() {
                dst[i] += g[o];
            }
        }
    }
    Ok(out)
}

pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.plane() == 0 {
        return Err(Error::shape("global_avg_pool of an empty plane"));
    }
    let inv = 1.0 / s.plane() as f64;
    let mut out = Tensor::zeros([s.n, s.c, 1, 1]);
    for n in 0..s.n {
        for c in 0..s.c {
            out.plane_mut(n, c)[0] = t.plane(n, c).iter().sum::<f64>() * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(input_shape: Shape, grad: &Tensor) -> Result<Tensor> {
    let inv = 1.0 / input_shape.plane() as f64;
    if grad.shape() != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::shape("global_avg_pool gradient shape mismatch"));
    }
    let mut out = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            let g = grad.plane(n, c)[0] * inv;
            out.plane_mut(n, c).iter_mut().for_each(|v| *v = g);
        }
    }
    Ok(out)
}

fn check_dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let xs = x.shape();
    let ws = weights.shape();
    if xs.h != 1 || xs.w != 1 {
        return Err(Error::shape(format!("dense input must be (n, c, 1, 1), got {xs}")));
    }
    if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(Error::shape(format!(
            "dense weights must be ({}, {}, 1, 1)-compatible, got {ws}",
            ws.n, xs.c
        )));
    }
    if bias.numel() != ws.n {
        return Err(Error::shape(format!(
            "dense bias has {} values, expected {}",
            bias.numel(),
            ws.n
        )));
    }
    Ok((ws.c, ws.n))
}

/// Fully connected layer; weights are stored as `(out, in, 1, 1)`, bias as `(1, out, 1, 1)`.
pub fn dense(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (fan_in, fan_out) = check_dense(x, weights, bias)?;
    let n = x.shape().n;
    let (xd, wd, bd) = (x.data(), weights.data(), bias.data());
    let mut out = Vec::with_capacity(n * fan_out);
    for b in 0..n {
        let row = &xd[b * fan_in..(b + 1) * fan_in];
        for o in 0..fan_out {
            let wrow = &wd[o * fan_in..(o + 1) * fan_in];
            out.push(bd[o] + row.iter().zip(wrow).map(|(a, w)| a * w).sum::<f64>());
        }
    }
    Tensor::from_vec_unchecked([n, fan_out, 1, 1], out)
}

/// Returns gradients for (x, weights, bias).
pub fn dense_backward(x: &Tensor, weights: &Tensor, bias: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (fan_in, fan_out) = check_dense(x, weights, bias)?;
    let n = x.shape().n;
    if grad.shape() != Shape::new(n, fan_out, 1, 1) {
        return Err(Error::shape("dense gradient shape mismatch"));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(bias.shape());
    let (xd, wd, gd) = (x.data(), weights.data(), grad.data());
    for b in 0..n {
        for o in 0..fan_out {
            let g = gd[b * fan_out + o];
            gb.data_mut()[o] += g;
            for i in 0..fan_in {
                gw.data_mut()[o * fan_in + i] += g * xd[b * fan_in + i];
                gx.data_mut()[b * fan_in + i] += g * wd[o * fan_in + i];
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("logits must be (n, classes, 1, 1), got {s}")));
    }
    if labels.len() != s.n || s.n == 0 {
        return Err(Error::shape(format!("{} labels for a batch of {}", labels.len(), s.n)));
    }
    let classes = s.c;
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label];
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (c, e) in exps.iter().enumerate() {
            g[c] = (e / z - if c == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Per-sample argmax over the channel axis of `(n, classes, 1, 1)` logits; ties go to the lowest index.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let per = s.c * s.h * s.w;
    (0..s.n)
        .map(|b| {
            let row = &logits.data()[b * per..(b + 1) * per];
            row.iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channels(t: &Tensor) -> Vec<f64> {
        (0..t.shape().c).map(|c| t.at(0, c, 0, 0)).collect()
    }

    fn labelled(c: usize) -> Tensor {
        Tensor::from_vec([1, c, 1, 1], (0..c).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn concat_shapes_and_round_trip() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 3, 2, 2], 2.0);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(slice_channels(&ab, 0, 2, false).unwrap(), a);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        assert!(concat_channels(&[]).is_err());
        assert!(concat_channels(&[&a, &Tensor::zeros([1, 1, 3, 2])]).is_err());
    }

    #[test]
    fn slice_wrap_is_cyclic() {
        let t = labelled(3);
        assert_eq!(
            channels(&slice_channels(&t, 0, 5, true).unwrap()),
            vec![0.0, 1.0, 2.0, 0.0, 1.0]
        );
        assert_eq!(
            channels(&slice_channels(&labelled(4), 0, 2, false).unwrap()),
            vec![0.0, 1.0]
        );
        assert_eq!(slice_channels(&t, 0, 3, false).unwrap(), t);
        assert!(matches!(
            slice_channels(&t, 2, 2, false),
            Err(Error::ChannelRange { .. })
        ));
    }

    #[test]
    fn slice_backward_accumulates_repeats() {
        let s = Shape::new(1, 3, 1, 1);
        let g = Tensor::full([1, 5, 1, 1], 1.0);
        let back = slice_channels_backward(s, &g, 0, true).unwrap();
        assert_eq!(back.data(), &[2.0, 2.0, 1.0]);
    }

    #[test]
    fn shuffle_permutation() {
        let t = labelled(4);
        assert_eq!(channels(&channel_shuffle(&t, 2).unwrap()), vec![0.0, 2.0, 1.0, 3.0]);
        assert_eq!(channel_shuffle(&t, 1).unwrap(), t);
        let t12 = labelled(12);
        let sh = channel_shuffle(&t12, 4).unwrap();
        assert_eq!(channel_unshuffle(&sh, 4).unwrap(), t12);
        // channel i lands at (i mod g)*(c/g) + i/g
        for i in 0..12 {
            assert_eq!(sh.at(0, shuffle_destination(i, 12, 4), 0, 0), i as f64);
        }
        assert!(channel_shuffle(&t, 3).is_err());
    }

    #[test]
    fn subsample_picks_sample_centres() {
        let t = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let sub = Subsample::for_host(4, 4, 2, 3, 1).unwrap();
        let y = spatial_subsample(&t, &sub).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
        let id = Subsample::for_host(4, 4, 1, 3, 1).unwrap();
        assert_eq!(spatial_subsample(&t, &id).unwrap(), t);
        // valid-padding host: first centre is (1, 1)
        let valid = Subsample::for_host(4, 4, 1, 3, 0).unwrap();
        assert_eq!(spatial_subsample(&t, &valid).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn small_ops() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 2.0]);
        let p = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(maxpool2x2(&p).unwrap().data(), &[5.0]);
        assert!(maxpool2x2(&Tensor::zeros([1, 1, 3, 2])).is_err());
        assert_eq!(global_avg_pool(&p).unwrap().data(), &[2.75]);
    }

    #[test]
    fn dense_identity() {
        let x = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros([1, 3, 1, 1]);
        assert_eq!(dense(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros([2, 4, 1, 1]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.at(0, 0, 0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 4]).is_err());
    }
}
