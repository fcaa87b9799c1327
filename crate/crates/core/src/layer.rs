//! Executable CompConv layer.
//!
//! All internal convolutions share the host kernel size. The host stride and
//! padding apply only to the inner convolution producing `G_1`; identity
//! copies read a spatially subsampled view of the input, and the square,
//! top and tail convolutions run at output resolution with stride 1 and
//! `floor(k/2)` padding. No activation or normalization is applied inside
//! the module.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};

use crate::conv::{self, ConvSpec, MacCounter};
use crate::error::{Error, Result};
use crate::exec::{Eager, Ops};
use crate::ops::Subsample;
use crate::planner::{plan_for, validate_plan, CompPlan, DepthPolicy, LayerChoice, SegmentKind};
use crate::rng::{self, Stream};
use crate::tensor::{read_exact, Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CCW1";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    HeNormal,
    Constant(f64),
    /// Deterministic closed-form pattern, independent of the seed.
    FixedFixture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitConfig {
    pub fn he_normal(seed: u64) -> Self {
        InitConfig {
            scheme: InitScheme::HeNormal,
            seed,
        }
    }

    pub fn constant(value: f64) -> Self {
        InitConfig {
            scheme: InitScheme::Constant(value),
            seed: 0,
        }
    }

    pub fn fixture() -> Self {
        InitConfig {
            scheme: InitScheme::FixedFixture,
            seed: 0,
        }
    }

    /// Fills a conv weight tensor; `index` selects the init sub-stream.
    pub fn weights(&self, shape: Shape, index: u64) -> Tensor {
        let numel = shape.numel();
        let data = match self.scheme {
            InitScheme::Constant(v) => vec![v; numel],
            InitScheme::FixedFixture => (0..numel)
                .map(|i| ((i * 7 + index as usize * 3) % 11) as f64 / 11.0 - 0.5)
                .collect(),
            InitScheme::HeNormal => {
                let fan_in = (shape.c * shape.h * shape.w).max(1);
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std is finite and positive");
                let mut rng = rng::substream(self.seed, Stream::Init, index);
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Tensor::from_vec_unchecked(shape, data).expect("length matches shape")
    }
}

/// Learnable tensors of one CompConv layer, generic over the backend value.
///
/// `squares` holds the `m = 3..d` merge transforms in level order followed by
/// the top transform (present whenever `d >= 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct CompWeights<V> {
    pub inner: V,
    pub squares: Vec<V>,
    pub tail: V,
}

impl<V> CompWeights<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> CompWeights<U> {
        CompWeights {
            inner: f(&self.inner),
            squares: self.squares.iter().map(&mut f).collect(),
            tail: f(&self.tail),
        }
    }

    /// Inner, squares ascending, tail.
    pub fn iter(&self) -> impl Iterator<Item = &V> {
        std::iter::once(&self.inner)
            .chain(self.squares.iter())
            .chain(std::iter::once(&self.tail))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut V> {
        std::iter::once(&mut self.inner)
            .chain(self.squares.iter_mut())
            .chain(std::iter::once(&mut self.tail))
    }

    pub fn from_ordered(mut items: Vec<V>) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::invalid("a CompConv layer needs at least inner and tail weights"));
        }
        let tail = items.pop().expect("len >= 2");
        let inner = items.remove(0);
        Ok(CompWeights {
            inner,
            squares: items,
            tail,
        })
    }
}

/// Conv specs of every internal convolution, in weight order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InternalSpecs {
    pub inner: ConvSpec,
    pub squares: Vec<ConvSpec>,
    pub tail: ConvSpec,
}

fn check_host(plan: &CompPlan, host: &ConvSpec) -> Result<()> {
    host.validate()?;
    if plan.c_in != host.c_in || plan.c_out != host.c_out {
        return Err(Error::invalid(format!(
            "plan is for {}->{} channels but host conv is {}->{}",
            plan.c_in, plan.c_out, host.c_in, host.c_out
        )));
    }
    if host.groups != 1 {
        return Err(Error::invalid("grouped host convolutions cannot be replaced"));
    }
    if host.k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "host kernel {} is even; internal same-padded convs need an odd kernel",
            host.k
        )));
    }
    let violations = validate_plan(plan);
    if let Some(v) = violations.first() {
        return Err(Error::invalid(format!("invalid plan: {v}")));
    }
    Ok(())
}

/// Derives the internal conv specs for a plan replacing `host`.
pub fn internal_specs(plan: &CompPlan, host: &ConvSpec) -> Result<InternalSpecs> {
    check_host(plan, host)?;
    let k = host.k;
    let d = plan.depth;
    let inner = ConvSpec {
        c_in: plan.c_in,
        c_out: plan.c_prim,
        k,
        stride: host.stride,
        padding: host.padding,
        groups: 1,
        bias: false,
    };
    let mut squares: Vec<ConvSpec> = (3..=d)
        .map(|m| {
            let s = plan.block_sizes[m - 2];
            ConvSpec::same(s, s, k)
        })
        .collect();
    if d >= 2 {
        // c_out may be 0 when the whole top transform is trimmed; kept as a zero-filter spec.
        squares.push(ConvSpec {
            c_out: plan.top_channels(),
            ..ConvSpec::same(plan.top_size(), plan.top_size(), k)
        });
    }
    Ok(InternalSpecs {
        inner,
        squares,
        tail: ConvSpec::depthwise(plan.tail_channels, k),
    })
}

fn weight_shape(spec: &ConvSpec) -> Shape {
    Shape::new(spec.c_out, spec.c_in / spec.groups.max(1), spec.k, spec.k)
}

/// Runs the CompConv dataflow on any backend.
pub fn compconv_forward<O: Ops>(
    ops: &mut O,
    plan: &CompPlan,
    host: &ConvSpec,
    weights: &CompWeights<O::Value>,
    x: &O::Value,
) -> Result<O::Value> {
    let specs = internal_specs(plan, host)?;
    let xs = ops.shape_of(x);
    if xs.c != plan.c_in {
        return Err(Error::shape(format!(
            "CompConv expects {} input channels, got {}",
            plan.c_in, xs.c
        )));
    }
    let d = plan.depth;
    if weights.squares.len() != d.saturating_sub(1) {
        return Err(Error::shape(format!(
            "expected {} square weights, got {}",
            d.saturating_sub(1),
            weights.squares.len()
        )));
    }

    let mut g = ops.conv2d(x, &weights.inner, &specs.inner)?;
    let mut blocks = vec![g.clone()];
    if d >= 2 {
        let sub = Subsample::for_host(xs.h, xs.w, host.stride, host.k, host.padding)?;
        let source = if sub.stride == 1 && sub.offset == 0 {
            x.clone()
        } else {
            ops.spatial_subsample(x, &sub)?
        };
        for m in 2..=d {
            let copy = &plan.copy_specs[m - 2];
            let identity = ops.slice_channels(&source, copy.start, copy.len, copy.wrap)?;
            let body = if m == 2 {
                g.clone()
            } else {
                ops.conv2d(&g, &weights.squares[m - 3], &specs.squares[m - 3])?
            };
            g = ops.concat(&[identity, body])?;
            blocks.push(g.clone());
        }
    }

    let mut parts = Vec::with_capacity(plan.segments.len());
    for seg in plan.segments.iter().filter(|s| s.channels > 0) {
        let part = match seg.kind {
            SegmentKind::Block(m) => {
                let b = &blocks[m - 1];
                if seg.channels == seg.raw {
                    b.clone()
                } else {
                    ops.slice_channels(b, 0, seg.channels, false)?
                }
            }
            SegmentKind::TopTransform => {
                let top = weights
                    .squares
                    .last()
                    .ok_or_else(|| Error::shape("top transform weights missing"))?;
                ops.conv2d(&g, top, specs.squares.last().expect("d >= 2"))?
            }
            SegmentKind::Tail => {
                let src = if plan.tail_channels == plan.top_size() {
                    g.clone()
                } else {
                    ops.slice_channels(&g, 0, plan.tail_channels, false)?
                };
                ops.conv2d(&src, &weights.tail, &specs.tail)?
            }
        };
        parts.push(part);
    }
    let out = ops.concat(&parts)?;
    ops.channel_shuffle(&out, plan.shuffle_groups)
}

/// A CompConv layer with concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CompConvLayer {
    pub plan: CompPlan,
    pub host: ConvSpec,
    pub weights: CompWeights<Tensor>,
    pub seed: u64,
}

impl CompConvLayer {
    pub fn init(plan: CompPlan, host: ConvSpec, init: &InitConfig) -> Result<Self> {
        let specs = internal_specs(&plan, &host)?;
        let mut index = 0u64;
        let mut next = |spec: &ConvSpec| {
            let t = init.weights(weight_shape(spec), index);
            index += 1;
            t
        };
        let weights = CompWeights {
            inner: next(&specs.inner),
            squares: specs.squares.iter().map(&mut next).collect(),
            tail: next(&specs.tail),
        };
        Ok(CompConvLayer {
            plan,
            host,
            weights,
            seed: init.seed,
        })
    }

    /// Replace the weights, checking every shape against the plan.
    pub fn with_weights(plan: CompPlan, host: ConvSpec, weights: CompWeights<Tensor>, seed: u64) -> Result<Self> {
        let specs = internal_specs(&plan, &host)?;
        let expected: Vec<Shape> = std::iter::once(&specs.inner)
            .chain(specs.squares.iter())
            .chain(std::iter::once(&specs.tail))
            .map(weight_shape)
            .collect();
        let got: Vec<Shape> = weights.iter().map(|t| t.shape()).collect();
        if expected != got {
            return Err(Error::shape(format!(
                "weight shapes {got:?} do not match plan shapes {expected:?}"
            )));
        }
        Ok(CompConvLayer {
            plan,
            host,
            weights,
            seed,
        })
    }

    pub fn internal_specs(&self) -> InternalSpecs {
        internal_specs(&self.plan, &self.host).expect("validated at construction")
    }

    pub fn forward(&self, x: &Tensor, counter: Option<&mut MacCounter>) -> Result<Tensor> {
        let mut eager = Eager::with_counter(counter);
        compconv_forward(&mut eager, &self.plan, &self.host, &self.weights, x)
    }

    pub fn param_count(&self) -> u64 {
        self.weights.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn export_weights(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// `CCW1`, version, length-prefixed text record (host + plan), then the weight tensors.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        let mut record = format!(
            "host_k: {}\nhost_stride: {}\nhost_padding: {}\nseed: {}\n",
            self.host.k, self.host.stride, self.host.padding, self.seed
        );
        record.push_str(&self.plan.to_record());
        let bytes = record.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        for t in self.weights.iter() {
            t.write_to(&mut out)?;
        }
        Ok(())
    }

    pub fn import_weights(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let layer = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::format(format!(
                "{} trailing bytes after weight blob",
                cursor.len()
            )));
        }
        Ok(layer)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "weights magic")?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::format(format!("bad weights magic {magic:?}")));
        }
        let mut v = [0u8; 2];
        read_exact(&mut input, &mut v, "weights version")?;
        let version = u16::from_le_bytes(v);
        if version != WEIGHTS_VERSION {
            return Err(Error::format(format!(
                "unsupported weights version {version} (expected {WEIGHTS_VERSION})"
            )));
        }
        let mut len = [0u8; 4];
        read_exact(&mut input, &mut len, "record length")?;
        let mut record = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact(&mut input, &mut record, "plan record")?;
        let record = String::from_utf8(record).map_err(|_| Error::format("plan record is not UTF-8"))?;

        let mut host_fields = [0u64; 4];
        let mut plan_text = String::new();
        for line in record.lines() {
            let slot = ["host_k", "host_stride", "host_padding", "seed"]
                .iter()
                .position(|k| line.split_once(':').is_some_and(|(key, _)| key.trim() == *k));
            match slot {
                Some(i) => {
                    let value = line.split_once(':').map(|(_, v)| v.trim()).unwrap_or_default();
                    host_fields[i] = value
                        .parse()
                        .map_err(|_| Error::format(format!("bad record line {line:?}")))?;
                }
                None => {
                    plan_text.push_str(line);
                    plan_text.push('\n');
                }
            }
        }
        let plan = CompPlan::from_record(&plan_text)?;
        let host = ConvSpec {
            c_in: plan.c_in,
            c_out: plan.c_out,
            k: host_fields[0] as usize,
            stride: host_fields[1] as usize,
            padding: host_fields[2] as usize,
            groups: 1,
            bias: false,
        };
        let specs = internal_specs(&plan, &host)?;
        let count = 2 + specs.squares.len();
        let tensors = (0..count)
            .map(|_| Tensor::read_from(&mut input))
            .collect::<Result<Vec<_>>>()?;
        Self::with_weights(plan, host, CompWeights::from_ordered(tensors)?, host_fields[3])
    }
}

/// The `d = 0` path: a plain convolution.
pub fn forward_vanilla(
    spec: &ConvSpec,
    weights: &Tensor,
    x: &Tensor,
    counter: Option<&mut MacCounter>,
) -> Result<Tensor> {
    conv::conv2d(x, weights, spec, counter)
}

/// A convolution slot resolved under a depth policy: either the host conv or its CompConv replacement.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ConvModule {
    Vanilla { spec: ConvSpec, weights: Tensor },
    Comp(CompConvLayer),
}

impl ConvModule {
    pub fn build(host: ConvSpec, policy: DepthPolicy, init: &InitConfig) -> Result<Self> {
        host.validate()?;
        Ok(match plan_for(host.c_in, host.c_out, policy)? {
            LayerChoice::Vanilla => ConvModule::Vanilla {
                spec: host,
                weights: init.weights(host.weight_shape(), 0),
            },
            LayerChoice::Comp(plan) => ConvModule::Comp(CompConvLayer::init(plan, host, init)?),
        })
    }

    pub fn depth(&self) -> usize {
        match self {
            ConvModule::Vanilla { .. } => 0,
            ConvModule::Comp(l) => l.plan.depth,
        }
    }

    pub fn forward(&self, x: &Tensor, counter: Option<&mut MacCounter>) -> Result<Tensor> {
        match self {
            ConvModule::Vanilla { spec, weights } => forward_vanilla(spec, weights, x, counter),
            ConvModule::Comp(l) => l.forward(x, counter),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            ConvModule::Vanilla { weights, .. } => weights.numel() as u64,
            ConvModule::Comp(l) => l.param_count(),
        }
    }
}
