//! Declarative network descriptions and the conv-to-CompConv replacement pass.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::planner::{plan_for, CompPlan, DepthPolicy, LayerChoice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        #[serde(flatten)]
        spec: ConvSpec,
    },
    Compconv {
        host: ConvSpec,
        plan: CompPlan,
    },
    Relu,
    Maxpool,
    GlobalAvgPool,
    Dense {
        c_in: usize,
        c_out: usize,
    },
    Residual {
        body: Vec<LayerDescriptor>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        projection: Option<Box<LayerDescriptor>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerDescriptor {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerDescriptor {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self::new(name, LayerKind::Conv { spec })
    }

    fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }
}

/// An ordered network plus the names of convolutions that must stay vanilla.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: InputShape,
    pub layers: Vec<LayerDescriptor>,
    #[serde(default)]
    pub skip_list: Vec<String>,
}

/// Output `(c, h, w)` after one top-level layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

fn walk_shape(layer: &LayerDescriptor, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let at = |e: Error| Error::Infeasible(format!("layer {}: {e}", layer.name));
    let conv_out = |spec: &ConvSpec| -> Result<(usize, usize, usize)> {
        spec.validate().map_err(at)?;
        if spec.c_in != c {
            return Err(at(Error::shape(format!(
                "expects {} input channels, got {c}",
                spec.c_in
            ))));
        }
        let (ho, wo) = spec.output_hw(h, w).map_err(at)?;
        Ok((spec.c_out, ho, wo))
    };
    match &layer.kind {
        LayerKind::Conv { spec } => conv_out(spec),
        LayerKind::Compconv { host, plan } => {
            if plan.c_in != host.c_in || plan.c_out != host.c_out {
                return Err(at(Error::invalid("plan and host channel counts disagree")));
            }
            conv_out(host)
        }
        LayerKind::Relu => Ok((c, h, w)),
        LayerKind::Maxpool => {
            if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                return Err(at(Error::shape(format!("maxpool needs even dims, got {h}x{w}"))));
            }
            Ok((c, h / 2, w / 2))
        }
        LayerKind::GlobalAvgPool => Ok((c, 1, 1)),
        LayerKind::Dense { c_in, c_out } => {
            if h != 1 || w != 1 || *c_in != c {
                return Err(at(Error::shape(format!(
                    "dense {c_in}->{c_out} applied to ({c}, {h}, {w})"
                ))));
            }
            Ok((*c_out, 1, 1))
        }
        LayerKind::Residual { body, projection } => {
            let out = body.iter().try_fold((c, h, w), |s, l| walk_shape(l, s))?;
            let skip = match projection {
                Some(p) => walk_shape(p, (c, h, w))?,
                None => (c, h, w),
            };
            if skip != out {
                return Err(at(Error::shape(format!(
                    "residual branch {out:?} does not match shortcut {skip:?}"
                ))));
            }
            Ok(out)
        }
    }
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let arch: ArchSpec = serde_json::from_str(text).map_err(|e| Error::format(format!("arch file: {e}")))?;
        arch.infer_shapes()?;
        Ok(arch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch specs always serialize")
    }

    /// Output shape after each top-level layer; errors name the first incompatible layer.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let s = self.input_shape;
        let mut cur = (s.c, s.h, s.w);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = walk_shape(l, cur)?;
            out.push(LayerShape {
                name: l.name.clone(),
                c: cur.0,
                h: cur.1,
                w: cur.2,
            });
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let s = self.input_shape;
        self.layers
            .iter()
            .try_fold((s.c, s.h, s.w), |acc, l| walk_shape(l, acc))
    }

    /// All conv-like descriptors (vanilla or compressed) in execution order, flattening residuals.
    pub fn conv_layers(&self) -> Vec<&LayerDescriptor> {
        fn collect<'a>(layers: &'a [LayerDescriptor], out: &mut Vec<&'a LayerDescriptor>) {
            for l in layers {
                match &l.kind {
                    LayerKind::Conv { .. } | LayerKind::Compconv { .. } => out.push(l),
                    LayerKind::Residual { body, projection } => {
                        collect(body, out);
                        if let Some(p) = projection {
                            collect(std::slice::from_ref(p.as_ref()), out);
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&self.layers, &mut out);
        out
    }
}

/// Replace every eligible convolution according to `policy`.
pub fn compress(arch: &ArchSpec, policy: DepthPolicy) -> Result<ArchSpec> {
    compress_where(arch, policy, |_| true)
}

/// Like [`compress`] but only touches convolutions whose name passes `select`.
///
/// Convolutions in the skip list, grouped or even-kernel convolutions and
/// layers that are already compressed are left as they are.
pub fn compress_where(arch: &ArchSpec, policy: DepthPolicy, select: impl Fn(&str) -> bool) -> Result<ArchSpec> {
    policy.validate()?;
    let skip: BTreeSet<&str> = arch.skip_list.iter().map(String::as_str).collect();
    let mut out = arch.clone();
    out.layers = rewrite(&arch.layers, policy, &skip, &select)?;
    Ok(out)
}

fn rewrite(
    layers: &[LayerDescriptor],
    policy: DepthPolicy,
    skip: &BTreeSet<&str>,
    select: &dyn Fn(&str) -> bool,
) -> Result<Vec<LayerDescriptor>> {
    layers.iter().map(|l| rewrite_one(l, policy, skip, select)).collect()
}

fn rewrite_one(
    layer: &LayerDescriptor,
    policy: DepthPolicy,
    skip: &BTreeSet<&str>,
    select: &dyn Fn(&str) -> bool,
) -> Result<LayerDescriptor> {
    let kind = match &layer.kind {
        LayerKind::Conv { spec }
            if !skip.contains(layer.name.as_str())
                && select(&layer.name)
                && spec.groups == 1
                && spec.k % 2 == 1
                && !spec.bias =>
        {
            match plan_for(spec.c_in, spec.c_out, policy)
                .map_err(|e| Error::Infeasible(format!("layer {}: {e}", layer.name)))?
            {
                LayerChoice::Vanilla => layer.kind.clone(),
                LayerChoice::Comp(plan) => LayerKind::Compconv { host: *spec, plan },
            }
        }
        LayerKind::Residual { body, projection } => LayerKind::Residual {
            body: rewrite(body, policy, skip, select)?,
            projection: projection
                .as_ref()
                .map(|p| rewrite_one(p, policy, skip, select).map(Box::new))
                .transpose()?,
        },
        other => other.clone(),
    };
    Ok(LayerDescriptor {
        name: layer.name.clone(),
        kind,
    })
}

/// VGG16 adapted to 32x32 inputs: 13 same-padded 3x3 convs, five pools, global pool, one dense head.
pub fn vgg16_cifar(num_classes: usize) -> ArchSpec {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    let mut c_in = 3;
    for (s, &(width, reps)) in STAGES.iter().enumerate() {
        for r in 1..=reps {
            layers.push(LayerDescriptor::conv(
                format!("conv{}_{r}", s + 1),
                ConvSpec::same(c_in, width, 3),
            ));
            layers.push(LayerDescriptor::relu(format!("relu{}_{r}", s + 1)));
            c_in = width;
        }
        layers.push(LayerDescriptor::new(format!("pool{}", s + 1), LayerKind::Maxpool));
    }
    layers.push(LayerDescriptor::new("gap", LayerKind::GlobalAvgPool));
    layers.push(LayerDescriptor::new(
        "fc",
        LayerKind::Dense {
            c_in: 512,
            c_out: num_classes,
        },
    ));
    ArchSpec {
        name: "vgg16-cifar".into(),
        input_shape: InputShape { c: 3, h: 32, w: 32 },
        layers,
        skip_list: Vec::new(),
    }
}

fn bottleneck(name: &str, c_in: usize, planes: usize, stride: usize) -> Vec<LayerDescriptor> {
    let c_out = planes * 4;
    let body = vec![
        LayerDescriptor::conv(format!("{name}.conv1"), ConvSpec::same(c_in, planes, 1)),
        LayerDescriptor::relu(format!("{name}.relu1")),
        LayerDescriptor::conv(
            format!("{name}.conv2"),
            ConvSpec::same(planes, planes, 3).with_stride(stride),
        ),
        LayerDescriptor::relu(format!("{name}.relu2")),
        LayerDescriptor::conv(format!("{name}.conv3"), ConvSpec::same(planes, c_out, 1)),
    ];
    let projection = (stride != 1 || c_in != c_out).then(|| {
        Box::new(LayerDescriptor::conv(
            format!("{name}.downsample"),
            ConvSpec::same(c_in, c_out, 1).with_stride(stride),
        ))
    });
    vec![
        LayerDescriptor::new(name, LayerKind::Residual { body, projection }),
        LayerDescriptor::relu(format!("{name}.relu")),
    ]
}

fn basic_block(name: &str, c_in: usize, c_out: usize, stride: usize) -> Vec<LayerDescriptor> {
    let body = vec![
        LayerDescriptor::conv(
            format!("{name}.conv1"),
            ConvSpec::same(c_in, c_out, 3).with_stride(stride),
        ),
        LayerDescriptor::relu(format!("{name}.relu1")),
        LayerDescriptor::conv(format!("{name}.conv2"), ConvSpec::same(c_out, c_out, 3)),
    ];
    let projection = (stride != 1 || c_in != c_out).then(|| {
        Box::new(LayerDescriptor::conv(
            format!("{name}.downsample"),
            ConvSpec::same(c_in, c_out, 1).with_stride(stride),
        ))
    });
    vec![
        LayerDescriptor::new(name, LayerKind::Residual { body, projection }),
        LayerDescriptor::relu(format!("{name}.relu")),
    ]
}

/// ResNet-50 at 224x224 for cost analysis. Stride sits on the 3x3 conv of
/// each bottleneck; the stem's 3x3/2 max pool is represented by a 2x2 pool,
/// which yields the same 56x56 grid and carries no cost.
pub fn resnet50_imagenet() -> ArchSpec {
    let mut layers = vec![
        LayerDescriptor::conv("conv1", ConvSpec::same(3, 64, 7).with_stride(2)),
        LayerDescriptor::relu("relu1"),
        LayerDescriptor::new("maxpool", LayerKind::Maxpool),
    ];
    let mut c_in = 64;
    for (stage, &(planes, blocks, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)].iter().enumerate() {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            layers.extend(bottleneck(&format!("layer{}.{b}", stage + 1), c_in, planes, s));
            c_in = planes * 4;
        }
    }
    layers.push(LayerDescriptor::new("gap", LayerKind::GlobalAvgPool));
    layers.push(LayerDescriptor::new(
        "fc",
        LayerKind::Dense {
            c_in: 2048,
            c_out: 1000,
        },
    ));
    ArchSpec {
        name: "resnet50-imagenet".into(),
        input_shape: InputShape { c: 3, h: 224, w: 224 },
        layers,
        skip_list: vec!["conv1".into()],
    }
}

/// Shape of a small basic-block ResNet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetToyConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    /// `(channels, blocks)` per stage; stages after the first downsample by 2.
    pub stages: Vec<(usize, usize)>,
    pub num_classes: usize,
}

impl Default for ResNetToyConfig {
    fn default() -> Self {
        ResNetToyConfig {
            in_channels: 1,
            input_size: 8,
            stem_channels: 8,
            stages: vec![(8, 1), (16, 1)],
            num_classes: 2,
        }
    }
}

pub fn resnet_toy(cfg: &ResNetToyConfig) -> ArchSpec {
    let mut layers = vec![
        LayerDescriptor::conv("conv1", ConvSpec::same(cfg.in_channels, cfg.stem_channels, 3)),
        LayerDescriptor::relu("relu1"),
    ];
    let mut c_in = cfg.stem_channels;
    for (s, &(width, blocks)) in cfg.stages.iter().enumerate() {
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            layers.extend(basic_block(&format!("layer{}.{b}", s + 1), c_in, width, stride));
            c_in = width;
        }
    }
    layers.push(LayerDescriptor::new("gap", LayerKind::GlobalAvgPool));
    layers.push(LayerDescriptor::new(
        "fc",
        LayerKind::Dense {
            c_in,
            c_out: cfg.num_classes,
        },
    ));
    ArchSpec {
        name: "resnet-toy".into(),
        input_shape: InputShape {
            c: cfg.in_channels,
            h: cfg.input_size,
            w: cfg.input_size,
        },
        layers,
        skip_list: vec!["conv1".into()],
    }
}

/// Three-conv classifier used for the training harness.
pub fn toy_cnn(in_channels: usize, size: usize, num_classes: usize) -> ArchSpec {
    ArchSpec {
        name: "toy-cnn".into(),
        input_shape: InputShape {
            c: in_channels,
            h: size,
            w: size,
        },
        layers: vec![
            LayerDescriptor::conv("conv1", ConvSpec::same(in_channels, 8, 3)),
            LayerDescriptor::relu("relu1"),
            LayerDescriptor::new("pool1", LayerKind::Maxpool),
            LayerDescriptor::conv("conv2", ConvSpec::same(8, 16, 3)),
            LayerDescriptor::relu("relu2"),
            LayerDescriptor::new("pool2", LayerKind::Maxpool),
            LayerDescriptor::conv("conv3", ConvSpec::same(16, 16, 3)),
            LayerDescriptor::relu("relu3"),
            LayerDescriptor::new("gap", LayerKind::GlobalAvgPool),
            LayerDescriptor::new(
                "fc",
                LayerKind::Dense {
                    c_in: 16,
                    c_out: num_classes,
                },
            ),
        ],
        skip_list: Vec::new(),
    }
}

/// Depth policy used for the compressed toy network.
pub const TOY_COMP_POLICY: DepthPolicy = DepthPolicy::Global { d: 2 };

/// Built-in architectures addressable by name.
pub fn builtin(name: &str) -> Option<ArchSpec> {
    match name {
        "vgg16-cifar" => Some(vgg16_cifar(10)),
        "resnet50-imagenet" => Some(resnet50_imagenet()),
        "resnet-toy" => Some(resnet_toy(&ResNetToyConfig::default())),
        "toy-cnn" | "toy-vanilla" => Some(toy_cnn(1, 8, 2)),
        "toy-comp" => compress(&toy_cnn(1, 8, 2), TOY_COMP_POLICY).ok(),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 5] = [
    "vgg16-cifar",
    "resnet50-imagenet",
    "resnet-toy",
    "toy-vanilla",
    "toy-comp",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn depth_of(l: &LayerDescriptor) -> usize {
        match &l.kind {
            LayerKind::Compconv { plan, .. } => plan.depth,
            _ => 0,
        }
    }

    #[test]
    fn vgg_structure() {
        let a = vgg16_cifar(10);
        assert_eq!(a.conv_layers().len(), 13);
        assert_eq!(a.output_shape().unwrap(), (10, 1, 1));
    }

    #[test]
    fn adaptive_depths_on_vgg() {
        let a = compress(&vgg16_cifar(10), DepthPolicy::Adaptive { c0: 128 }).unwrap();
        let depths: Vec<usize> = a.conv_layers().into_iter().map(depth_of).collect();
        assert_eq!(depths, vec![1, 1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 3]);
    }

    #[test]
    fn compress_preserves_shapes_and_is_idempotent() {
        let v = vgg16_cifar(10);
        let c = compress(&v, DepthPolicy::Global { d: 3 }).unwrap();
        assert_eq!(v.infer_shapes().unwrap(), c.infer_shapes().unwrap());
        let again = compress(&c, DepthPolicy::Global { d: 1 }).unwrap();
        assert_eq!(again, c);
        assert_eq!(compress(&v, DepthPolicy::Vanilla).unwrap(), v);
    }

    #[test]
    fn resnet50_skip_list_and_shapes() {
        let r = resnet50_imagenet();
        assert_eq!(r.output_shape().unwrap(), (1000, 1, 1));
        assert_eq!(r.conv_layers().len(), 53);
        let c = compress(&r, DepthPolicy::Adaptive { c0: 128 }).unwrap();
        let convs = c.conv_layers();
        assert_eq!(depth_of(convs[0]), 0);
        assert!(convs[1..].iter().all(|l| depth_of(l) >= 1));
        assert_eq!(r.infer_shapes().unwrap(), c.infer_shapes().unwrap());
    }

    #[test]
    fn basic_block_identity_shapes() {
        let r = resnet_toy(&ResNetToyConfig::default());
        let shapes = r.infer_shapes().unwrap();
        let block = shapes.iter().find(|s| s.name == "layer1.0").unwrap();
        assert_eq!((block.c, block.h, block.w), (8, 8, 8));
        let down = shapes.iter().find(|s| s.name == "layer2.0").unwrap();
        assert_eq!((down.c, down.h, down.w), (16, 4, 4));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let c = compress(&resnet_toy(&ResNetToyConfig::default()), DepthPolicy::Global { d: 2 }).unwrap();
        assert_eq!(ArchSpec::from_json(&c.to_json()).unwrap(), c);
        let mut broken = vgg16_cifar(10);
        broken.layers.remove(0);
        let err = ArchSpec::from_json(&broken.to_json()).unwrap_err();
        assert!(err.to_string().contains("conv1_2"), "{err}");
    }

    #[test]
    fn conv_json_is_flat() {
        let text = r#"{"name":"tiny","input_shape":{"c":1,"h":4,"w":4},
            "layers":[{"name":"c","type":"conv","c_in":1,"c_out":2,"k":3,"padding":1}]}"#;
        let a = ArchSpec::from_json(text).unwrap();
        assert_eq!(a.output_shape().unwrap(), (2, 4, 4));
    }
}
