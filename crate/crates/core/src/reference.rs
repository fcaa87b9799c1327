//! Deliberately naive re-implementations used as test oracles.
//!
//! Nothing here shares code with [`crate::conv`], [`crate::ops`] or
//! [`crate::layer`]: padding is handled with signed indices, and the
//! CompConv dataflow is written out level by level on plain vectors.

use crate::conv::ConvSpec;
use crate::layer::CompConvLayer;
use crate::tensor::Tensor;

/// Plain nested-loop convolution (grouped, strided, zero-padded).
pub fn conv2d(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    let (k, st, p, g) = (spec.k as isize, spec.stride, spec.padding as isize, spec.groups);
    let ho = (s.h + 2 * spec.padding - spec.k) / st + 1;
    let wo = (s.w + 2 * spec.padding - spec.k) / st + 1;
    let cin_g = spec.c_in / g;
    let cout_g = spec.c_out / g;
    let mut out = vec![0.0; s.n * spec.c_out * ho * wo];
    for n in 0..s.n {
        for oc in 0..spec.c_out {
            let group = oc / cout_g;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cin_g {
                        let c = group * cin_g + ic;
                        for di in 0..k {
                            for dj in 0..k {
                                let y = (i * st) as isize + di - p;
                                let xx = (j * st) as isize + dj - p;
                                if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                                    continue;
                                }
                                acc += x.at(n, c, y as usize, xx as usize) * w.at(oc, ic, di as usize, dj as usize);
                            }
                        }
                    }
                    out[((n * spec.c_out + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec_unchecked([s.n, spec.c_out, ho, wo], out).expect("sized above")
}

/// Per-sample channel lists; each channel is an `h*w` plane.
type Planes = Vec<Vec<f64>>;

fn to_planes(t: &Tensor, n: usize) -> Planes {
    (0..t.shape().c).map(|c| t.plane(n, c).to_vec()).collect()
}

fn from_planes(samples: &[Planes], h: usize, w: usize) -> Tensor {
    let c = samples[0].len();
    let data: Vec<f64> = samples.iter().flat_map(|s| s.iter().flatten().copied()).collect();
    Tensor::from_vec_unchecked([samples.len(), c, h, w], data).expect("sized above")
}

fn conv_planes(planes: &Planes, w: &Tensor, spec: &ConvSpec, h: usize, wd: usize) -> Planes {
    if planes.is_empty() || spec.c_out == 0 {
        return Vec::new();
    }
    let x = from_planes(std::slice::from_ref(planes), h, wd);
    to_planes(&conv2d(&x, w, spec), 0)
}

/// Straight-line CompConv forward for one layer.
pub fn compconv_forward(layer: &CompConvLayer, x: &Tensor) -> Tensor {
    let plan = &layer.plan;
    let host = &layer.host;
    let s = x.shape();
    let k = host.k;
    let ho = (s.h + 2 * host.padding - k) / host.stride + 1;
    let wo = (s.w + 2 * host.padding - k) / host.stride + 1;
    let offset = k / 2 - host.padding;
    let same = |c_in: usize, c_out: usize| ConvSpec::same(c_in, c_out, k);
    let d = plan.depth;
    let ws = &layer.weights;

    let mut samples = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let xn = from_planes(&[to_planes(x, n)], s.h, s.w);
        let inner = ConvSpec {
            c_out: plan.c_prim,
            ..*host
        };
        let g1 = to_planes(&conv2d(&xn, &ws.inner, &inner), 0);

        // input channels sampled at the host's output centres
        let picked: Planes = (0..s.c)
            .map(|c| {
                let mut v = Vec::with_capacity(ho * wo);
                for i in 0..ho {
                    for j in 0..wo {
                        v.push(x.at(n, c, offset + host.stride * i, offset + host.stride * j));
                    }
                }
                v
            })
            .collect();

        let mut blocks = vec![g1.clone()];
        for m in 2..=d {
            let prev = blocks[m - 2].clone();
            let copies: Planes = (0..prev.len()).map(|j| picked[j % s.c].clone()).collect();
            let body = if m == 2 {
                prev
            } else {
                conv_planes(&prev, &ws.squares[m - 3], &same(prev.len(), prev.len()), ho, wo)
            };
            blocks.push(copies.into_iter().chain(body).collect());
        }
        let top_block = blocks[d - 1].clone();

        let mut out: Planes = if d == 1 {
            g1
        } else {
            blocks[1..].iter().flatten().cloned().collect()
        };
        if d >= 2 {
            let top = same(top_block.len(), plan.top_channels());
            out.extend(conv_planes(&top_block, ws.squares.last().unwrap(), &top, ho, wo));
        }
        let tail_in: Planes = top_block[..plan.tail_channels].to_vec();
        let dw = ConvSpec::depthwise(plan.tail_channels, k);
        out.extend(conv_planes(&tail_in, &ws.tail, &dw, ho, wo));
        assert_eq!(out.len(), plan.c_out, "reference produced the wrong channel count");

        let c = out.len();
        let g = plan.shuffle_groups;
        let mut shuffled = vec![Vec::new(); c];
        for (i, plane) in out.into_iter().enumerate() {
            shuffled[(i % g) * (c / g) + i / g] = plane;
        }
        samples.push(shuffled);
    }
    from_planes(&samples, ho, wo)
}
