//! Parameterised networks built from an [`ArchSpec`], with a backend-generic forward pass
//! and a checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::exec::{Eager, Ops};
use crate::layer::{compconv_forward, internal_specs, CompConvLayer, CompWeights, InitConfig};
use crate::tensor::{read_exact, Shape, Tensor};
use crate::zoo::{ArchSpec, LayerDescriptor, LayerKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCK1";

/// One learnable tensor slot in traversal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Shape,
    /// Slots sharing a group id belong to the same layer.
    pub group: usize,
    pub is_bias: bool,
}

fn conv_weight_shape(spec: &ConvSpec) -> Result<Shape> {
    spec.validate()?;
    if spec.bias {
        return Err(Error::invalid(
            "convolution bias is not supported by the network executor",
        ));
    }
    Ok(spec.weight_shape())
}

/// Parameter slots of `arch` in the order [`forward`] consumes them.
pub fn param_layout(arch: &ArchSpec) -> Result<Vec<ParamSlot>> {
    fn visit(layers: &[LayerDescriptor], out: &mut Vec<ParamSlot>, group: &mut usize) -> Result<()> {
        for l in layers {
            let push = |suffix: &str, shape: Shape, is_bias: bool, out: &mut Vec<ParamSlot>| {
                out.push(ParamSlot {
                    name: format!("{}.{suffix}", l.name),
                    shape,
                    group: *group,
                    is_bias,
                })
            };
            match &l.kind {
                LayerKind::Conv { spec } => push("weight", conv_weight_shape(spec)?, false, out),
                LayerKind::Compconv { host, plan } => {
                    let specs = internal_specs(plan, host)?;
                    push("inner", specs.inner.weight_shape(), false, out);
                    for (i, s) in specs.squares.iter().enumerate() {
                        let label = if i + 1 == specs.squares.len() {
                            "top".to_string()
                        } else {
                            format!("square{}", i + 3)
                        };
                        push(&label, s.weight_shape(), false, out);
                    }
                    push("tail", specs.tail.weight_shape(), false, out);
                }
                LayerKind::Dense { c_in, c_out } => {
                    push("weight", Shape::new(*c_out, *c_in, 1, 1), false, out);
                    push("bias", Shape::new(1, *c_out, 1, 1), true, out);
                }
                LayerKind::Residual { body, projection } => {
                    visit(body, out, group)?;
                    if let Some(p) = projection {
                        visit(std::slice::from_ref(p.as_ref()), out, group)?;
                    }
                    continue;
                }
                LayerKind::Relu | LayerKind::Maxpool | LayerKind::GlobalAvgPool => continue,
            }
            *group += 1;
        }
        Ok(())
    }
    let mut out = Vec::new();
    visit(&arch.layers, &mut out, &mut 0)?;
    Ok(out)
}

struct Cursor<'a, V> {
    params: &'a [V],
    pos: usize,
}

impl<'a, V: Clone> Cursor<'a, V> {
    fn next(&mut self) -> Result<&'a V> {
        let v = self
            .params
            .get(self.pos)
            .ok_or_else(|| Error::invalid("parameter list is shorter than the architecture needs"))?;
        self.pos += 1;
        Ok(v)
    }
}

fn run_layers<O: Ops>(
    ops: &mut O,
    layers: &[LayerDescriptor],
    cur: &mut Cursor<'_, O::Value>,
    x: O::Value,
) -> Result<O::Value> {
    let mut x = x;
    for l in layers {
        let at = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("layer {}: {m}", l.name)),
            other => other,
        };
        x = match &l.kind {
            LayerKind::Conv { spec } => ops.conv2d(&x, cur.next()?, spec).map_err(at)?,
            LayerKind::Compconv { host, plan } => {
                let n = internal_specs(plan, host)?.squares.len() + 2;
                let ws = (0..n).map(|_| cur.next().cloned()).collect::<Result<Vec<_>>>()?;
                compconv_forward(ops, plan, host, &CompWeights::from_ordered(ws)?, &x).map_err(at)?
            }
            LayerKind::Relu => ops.relu(&x)?,
            LayerKind::Maxpool => ops.maxpool2x2(&x).map_err(at)?,
            LayerKind::GlobalAvgPool => ops.global_avg_pool(&x)?,
            LayerKind::Dense { .. } => {
                let (w, b) = (cur.next()?, cur.next()?);
                ops.dense(&x, w, b).map_err(at)?
            }
            LayerKind::Residual { body, projection } => {
                let y = run_layers(ops, body, cur, x.clone())?;
                let skip = match projection {
                    Some(p) => run_layers(ops, std::slice::from_ref(p.as_ref()), cur, x)?,
                    None => x,
                };
                ops.add(&y, &skip).map_err(at)?
            }
        };
    }
    Ok(x)
}

/// Forward pass of `arch` on any backend, consuming `params` in [`param_layout`] order.
pub fn forward<O: Ops>(ops: &mut O, arch: &ArchSpec, params: &[O::Value], x: &O::Value) -> Result<O::Value> {
    let s = ops.shape_of(x);
    let i = arch.input_shape;
    if (s.c, s.h, s.w) != (i.c, i.h, i.w) {
        return Err(Error::shape(format!(
            "input {s} does not match architecture input ({}, {}, {})",
            i.c, i.h, i.w
        )));
    }
    let mut cur = Cursor { params, pos: 0 };
    let out = run_layers(ops, &arch.layers, &mut cur, x.clone())?;
    if cur.pos != params.len() {
        return Err(Error::invalid(format!(
            "{} parameters supplied but the architecture uses {}",
            params.len(),
            cur.pos
        )));
    }
    Ok(out)
}

/// An architecture plus concrete parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: ArchSpec,
    pub layout: Vec<ParamSlot>,
    pub params: Vec<Tensor>,
    pub seed: u64,
}

impl Network {
    /// He-normal weights and zero biases, one init sub-stream per tensor.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.infer_shapes()?;
        let layout = param_layout(&arch)?;
        let init = InitConfig::he_normal(seed);
        let params = layout
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                if slot.is_bias {
                    Tensor::zeros(slot.shape)
                } else {
                    init.weights(slot.shape, i as u64)
                }
            })
            .collect();
        Ok(Network {
            arch,
            layout,
            params,
            seed,
        })
    }

    pub fn with_params(arch: ArchSpec, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        arch.infer_shapes()?;
        let layout = param_layout(&arch)?;
        let expected: Vec<Shape> = layout.iter().map(|s| s.shape).collect();
        let got: Vec<Shape> = params.iter().map(Tensor::shape).collect();
        if expected != got {
            return Err(Error::shape(format!(
                "parameter shapes {got:?} do not match architecture {expected:?}"
            )));
        }
        Ok(Network {
            arch,
            layout,
            params,
            seed,
        })
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        forward(&mut Eager::new(), &self.arch, &self.params, x)
    }

    /// `CCK1`, arch JSON, then per layer either a `CCW1` CompConv blob or raw tensors.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&self.seed.to_le_bytes())?;
        let json = serde_json::to_vec(&self.arch).map_err(|e| Error::format(e.to_string()))?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        let mut pos = 0;
        for layer in layer_groups(&self.arch) {
            match layer {
                Group::Comp { host, plan, count } => {
                    let ws = CompWeights::from_ordered(self.params[pos..pos + count].to_vec())?;
                    CompConvLayer::with_weights(plan, host, ws, self.seed)?.write_to(&mut out)?;
                    pos += count;
                }
                Group::Plain(count) => {
                    for t in &self.params[pos..pos + count] {
                        t.write_to(&mut out)?;
                    }
                    pos += count;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut seed = [0u8; 8];
        read_exact(&mut input, &mut seed, "checkpoint seed")?;
        let mut len = [0u8; 4];
        read_exact(&mut input, &mut len, "arch length")?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact(&mut input, &mut json, "arch description")?;
        let arch: ArchSpec =
            serde_json::from_slice(&json).map_err(|e| Error::format(format!("checkpoint arch: {e}")))?;
        let mut params = Vec::new();
        for layer in layer_groups(&arch) {
            match layer {
                Group::Comp { host, plan, .. } => {
                    let l = CompConvLayer::read_from(&mut input)?;
                    if l.plan != plan || l.host != host {
                        return Err(Error::format(
                            "checkpoint CompConv blob does not match its architecture",
                        ));
                    }
                    params.extend(l.weights.iter().cloned());
                }
                Group::Plain(count) => {
                    for _ in 0..count {
                        params.push(Tensor::read_from(&mut input)?);
                    }
                }
            }
        }
        Self::with_params(arch, params, u64::from_le_bytes(seed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

enum Group {
    Comp {
        host: ConvSpec,
        plan: crate::planner::CompPlan,
        count: usize,
    },
    Plain(usize),
}

fn layer_groups(arch: &ArchSpec) -> Vec<Group> {
    fn visit(layers: &[LayerDescriptor], out: &mut Vec<Group>) {
        for l in layers {
            match &l.kind {
                LayerKind::Conv { .. } => out.push(Group::Plain(1)),
                LayerKind::Dense { .. } => out.push(Group::Plain(2)),
                LayerKind::Compconv { host, plan } => out.push(Group::Comp {
                    host: *host,
                    plan: plan.clone(),
                    count: plan.depth + 1,
                }),
                LayerKind::Residual { body, projection } => {
                    visit(body, out);
                    if let Some(p) = projection {
                        visit(std::slice::from_ref(p.as_ref()), out);
                    }
                }
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    visit(&arch.layers, &mut out);
    out
}
