//! Tape-based reverse-mode differentiation and finite-difference checking.
//!
//! A [`Graph`] evaluates eagerly while recording each op; node ids are
//! assigned in creation order, so reverse id order is a valid topological
//! order for [`Graph::backward`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::exec::Ops;
use crate::ops::{self, Subsample};
use crate::rng::{substream, Stream};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, spec: ConvSpec },
    Concat { parts: Vec<NodeId>, sizes: Vec<usize> },
    Slice { x: NodeId, start: usize, wrap: bool },
    Shuffle { x: NodeId, groups: usize },
    Subsample { x: NodeId, sub: Subsample },
    Relu { x: NodeId },
    MaxPool { x: NodeId },
    GlobalAvgPool { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, dlogits: Tensor },
    WeightedSum { x: NodeId, weights: Tensor },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Shuffle { .. } => "shuffle",
            Op::Subsample { .. } => "subsample",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::Add { .. } => "add",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Add { a, b } => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Slice { x, .. }
            | Op::Shuffle { x, .. }
            | Op::Subsample { x, .. }
            | Op::Relu { x }
            | Op::MaxPool { x }
            | Op::GlobalAvgPool { x }
            | Op::WeightedSum { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Graph(format!("unknown node {}", id.0)))
    }

    fn val(&self, id: NodeId) -> Result<&Tensor> {
        self.node(id).map(|n| &n.value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient after [`Graph::backward`]; `None` when the node does not influence the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|n| n.grad.as_ref())
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.val(id)?;
        if v.numel() != 1 {
            return Err(Error::Graph(format!("node {} is not a scalar ({})", id.0, v.shape())));
        }
        Ok(v.data()[0])
    }

    /// Mean softmax cross-entropy of `(n, classes, 1, 1)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, dlogits) = ops::softmax_cross_entropy(self.val(logits)?, labels)?;
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, dlogits }, Tensor::scalar(loss)))
    }

    /// `sum_i weights_i * x_i`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let v = self.val(x)?;
        v.expect_same_shape(&weights)?;
        let s: f64 = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::WeightedSum { x, weights }, Tensor::scalar(s)))
    }

    /// Populate gradients of `loss` w.r.t. every node it depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let l = self.val(loss)?;
        if l.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, node {} has shape {}",
                loss.0,
                l.shape()
            )));
        }
        let ones = Tensor::full(l.shape(), 1.0);
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(ones);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (id, cg) in contributions {
                let slot = &mut self.nodes[id.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&cg)?,
                    None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, spec } => {
                let (gx, gw) = conv::conv2d_backward(v(*x), v(*w), g, spec)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Concat { parts, sizes } => parts.iter().copied().zip(ops::split_channels(g, sizes)?).collect(),
            Op::Slice { x, start, wrap } => {
                vec![(*x, ops::slice_channels_backward(v(*x).shape(), g, *start, *wrap)?)]
            }
            Op::Shuffle { x, groups } => vec![(*x, ops::channel_unshuffle(g, *groups)?)],
            Op::Subsample { x, sub } => {
                vec![(*x, ops::spatial_subsample_backward(v(*x).shape(), g, sub)?)]
            }
            Op::Relu { x } => vec![(*x, ops::relu_backward(v(*x), g)?)],
            Op::MaxPool { x } => vec![(*x, ops::maxpool2x2_backward(v(*x), g)?)],
            Op::GlobalAvgPool { x } => vec![(*x, ops::global_avg_pool_backward(v(*x).shape(), g)?)],
            Op::Dense { x, w, b } => {
                let (gx, gw, gb) = ops::dense_backward(v(*x), v(*w), v(*b), g)?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::SoftmaxCrossEntropy { logits, dlogits } => vec![(*logits, dlogits.scale(g.data()[0]))],
            Op::WeightedSum { x, weights } => vec![(*x, weights.scale(g.data()[0]))],
        })
    }
}

impl Ops for Graph {
    type Value = NodeId;

    fn shape_of(&self, x: &NodeId) -> Shape {
        self.value(*x).shape()
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let out = conv::conv2d(self.val(*x)?, self.val(*w)?, spec, None)?;
        Ok(self.push(
            Op::Conv2d {
                x: *x,
                w: *w,
                spec: *spec,
            },
            out,
        ))
    }

    fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values = parts.iter().map(|p| self.val(*p)).collect::<Result<Vec<_>>>()?;
        let sizes = values.iter().map(|t| t.shape().c).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
            },
            out,
        ))
    }

    fn slice_channels(&mut self, x: &NodeId, start: usize, len: usize, wrap: bool) -> Result<NodeId> {
        let out = ops::slice_channels(self.val(*x)?, start, len, wrap)?;
        Ok(self.push(Op::Slice { x: *x, start, wrap }, out))
    }

    fn channel_shuffle(&mut self, x: &NodeId, groups: usize) -> Result<NodeId> {
        let out = ops::channel_shuffle(self.val(*x)?, groups)?;
        Ok(self.push(Op::Shuffle { x: *x, groups }, out))
    }

    fn spatial_subsample(&mut self, x: &NodeId, sub: &Subsample) -> Result<NodeId> {
        let out = ops::spatial_subsample(self.val(*x)?, sub)?;
        Ok(self.push(Op::Subsample { x: *x, sub: *sub }, out))
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::relu(self.val(*x)?);
        Ok(self.push(Op::Relu { x: *x }, out))
    }

    fn maxpool2x2(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::maxpool2x2(self.val(*x)?)?;
        Ok(self.push(Op::MaxPool { x: *x }, out))
    }

    fn global_avg_pool(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.val(*x)?)?;
        Ok(self.push(Op::GlobalAvgPool { x: *x }, out))
    }

    fn dense(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = ops::dense(self.val(*x)?, self.val(*w)?, self.val(*b)?)?;
        Ok(self.push(Op::Dense { x: *x, w: *w, b: *b }, out))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = ops::add(self.val(*a)?, self.val(*b)?)?;
        Ok(self.push(Op::Add { a: *a, b: *b }, out))
    }
}

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so near-zero gradients are judged absolutely.
    pub floor: f64,
    /// Coordinates per tensor above which a random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdMismatch {
    pub tensor: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    pub worst: Option<FdMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords_to_check(numel: usize, cfg: &FdConfig, tensor: usize) -> Vec<usize> {
    if numel <= cfg.max_coords {
        return (0..numel).collect();
    }
    let mut rng = substream(cfg.seed, Stream::Probe, tensor as u64);
    let mut picked = rand::seq::index::sample(&mut rng, numel, cfg.max_coords).into_vec();
    picked.sort_unstable();
    picked
}

/// Compare `analytic[t]` against central differences of `loss` around `inputs`.
pub fn finite_diff_check<F>(
    name: &str,
    loss: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    cfg: &FdConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if inputs.len() != analytic.len() {
        return Err(Error::invalid("one analytic gradient per input is required"));
    }
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        inputs[t].expect_same_shape(grad)?;
        for coord in coords_to_check(grad.numel(), cfg, t) {
            let orig = probe[t].data()[coord];
            probe[t].data_mut()[coord] = orig + cfg.eps;
            let plus = loss(&probe)?;
            probe[t].data_mut()[coord] = orig - cfg.eps;
            let minus = loss(&probe)?;
            probe[t].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[coord];
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel.is_nan() || rel > cfg.tolerance {
                report.failures += 1;
            }
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some(FdMismatch {
                    tensor: t,
                    coord,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Gradient check of a graph-building closure against finite differences.
///
/// `build` maps leaf ids for `inputs` to an output node; the scalar loss is a
/// fixed random weighted sum of that output.
pub fn check_graph<F>(name: &str, inputs: &[Tensor], build: F, cfg: &FdConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let run = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (mut g, ids, out) = run(inputs)?;
    let out_shape = g.value(out).shape();
    let mut rng = substream(cfg.seed, Stream::Probe, u64::MAX);
    let probe: Vec<f64> = (0..out_shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let probe = Tensor::from_vec(out_shape, probe)?;
    let loss = g.weighted_sum(out, probe.clone())?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| {
            g.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()))
        })
        .collect();
    let scalar = |values: &[Tensor]| -> Result<f64> {
        let (mut g, _, out) = run(values)?;
        let l = g.weighted_sum(out, probe.clone())?;
        g.scalar(l)
    };
    finite_diff_check(name, scalar, inputs, &analytic, cfg)
}

/// Element-wise comparison of two gradient sets under the relative-error rule.
pub fn compare_gradients(a: &[Tensor], b: &[Tensor], floor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("gradient lists differ in length"));
    }
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        x.expect_same_shape(y)?;
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max(relative_error(*p, *q, floor));
        }
    }
    Ok(worst)
}

/// Standard-normal tensor from a probe sub-stream; used for check inputs.
pub fn random_tensor(shape: impl Into<Shape>, seed: u64, index: u64) -> Tensor {
    let shape = shape.into();
    let mut rng = substream(seed, Stream::Probe, index);
    let data = (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec_unchecked(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FdConfig {
        FdConfig::default()
    }

    #[test]
    fn relu_derivative_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 2, 1, 1], vec![2.0, -1.0]).unwrap());
        let y = g.relu(&x).unwrap();
        let l = g.weighted_sum(y, Tensor::full([1, 2, 1, 1], 1.0)).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_and_unknown_node() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 2, 1, 1]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        assert!(matches!(g.backward(NodeId(9)), Err(Error::Graph(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let spec = ConvSpec::same(2, 3, 3);
        let inputs = [
            random_tensor([1, 2, 4, 4], 1, 0),
            random_tensor(spec.weight_shape(), 1, 1),
        ];
        let r = check_graph("conv", &inputs, |g, ids| g.conv2d(&ids[0], &ids[1], &spec), &cfg()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 32 + 54);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let spec = ConvSpec::same(2, 2, 3);
        let x = random_tensor([1, 2, 4, 4], 2, 0);
        let w = random_tensor(spec.weight_shape(), 2, 1);
        let mut g = Graph::new();
        let (xi, wi) = (g.leaf(x.clone()), g.leaf(w.clone()));
        let y = g.conv2d(&xi, &wi, &spec).unwrap();
        let ones = Tensor::full(g.value(y).shape(), 1.0);
        let l = g.weighted_sum(y, ones.clone()).unwrap();
        g.backward(l).unwrap();
        let bad = [g.grad(xi).unwrap().scale(1.01), g.grad(wi).unwrap().clone()];
        let loss = |v: &[Tensor]| Ok(conv::conv2d(&v[0], &v[1], &spec, None)?.sum());
        let r = finite_diff_check("corrupt", loss, &[x, w], &bad, &cfg()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.unwrap().tensor, 0);
    }

    #[test]
    fn wrapped_slice_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([1, 2, 1, 1], 1.0));
        let y = g.slice_channels(&x, 0, 5, true).unwrap();
        let l = g.weighted_sum(y, Tensor::full([1, 5, 1, 1], 1.0)).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn subsampled_slice_and_shuffle_gradients() {
        let sub = Subsample::for_host(5, 5, 2, 3, 0).unwrap();
        let inputs = [random_tensor([2, 3, 5, 5], 3, 0)];
        let r = check_graph(
            "plumbing",
            &inputs,
            |g, ids| {
                let s = g.spatial_subsample(&ids[0], &sub)?;
                let c = g.slice_channels(&s, 1, 7, true)?;
                let cat = g.concat(&[c, s])?;
                g.channel_shuffle(&cat, 2)
            },
            &cfg(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn loss_gradient() {
        let inputs = [random_tensor([3, 4, 1, 1], 4, 0)];
        let r = check_graph(
            "xent",
            &inputs,
            |g, ids| {
                let l = g.softmax_cross_entropy(ids[0], &[0, 3, 1])?;
                let two = g.add(&l, &l)?;
                Ok(two)
            },
            &cfg(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
