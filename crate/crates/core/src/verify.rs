//! Self-check suites behind `compconv verify`.
//!
//! Each suite expands into independent checks that run on a rayon pool
//! (size capped by `COMPCONV_THREADS`) and are reported in a fixed order.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{check_graph, random_tensor, FdConfig};
use crate::conv::{self, ConvSpec, MacCounter};
use crate::cost::{compconv_cost, conv_cost};
use crate::error::{Error, Result};
use crate::exec::Ops;
use crate::layer::{compconv_forward, CompConvLayer, ConvModule, InitConfig};
use crate::ops::Subsample;
use crate::planner::{build_plan, feasible_depth, validate_plan, DepthPolicy};
use crate::reference;
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "COMPCONV_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Plans,
    Forward,
    Grads,
    Costs,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Plans, Suite::Forward, Suite::Grads, Suite::Costs];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Plans => "plans",
            Suite::Forward => "forward",
            Suite::Grads => "grads",
            Suite::Costs => "costs",
        }
    }

    pub fn parse(s: &str) -> Option<Vec<Suite>> {
        match s {
            "all" => Some(Suite::ALL.to_vec()),
            _ => Suite::ALL.into_iter().find(|x| x.name() == s).map(|x| vec![x]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: usize,
    pub passed: usize,
    /// Up to ten failure descriptions, in check order.
    pub failures: Vec<String>,
    /// Largest finite-difference relative error (grads suite only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rel_error: Option<f64>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.checks
    }
}

struct Outcome {
    passed: bool,
    detail: String,
    rel_error: Option<f64>,
}

impl Outcome {
    fn check(passed: bool, detail: impl FnOnce() -> String) -> Self {
        Outcome {
            passed,
            detail: if passed { String::new() } else { detail() },
            rel_error: None,
        }
    }

    fn from_result(name: &str, r: Result<Outcome>) -> Self {
        r.unwrap_or_else(|e| Outcome {
            passed: false,
            detail: format!("{name}: error: {e}"),
            rel_error: None,
        })
    }
}

type Check = Box<dyn Fn() -> Outcome + Send + Sync>;

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::invalid(e.to_string()))
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Plans => plan_checks(),
        Suite::Forward => forward_checks(seed),
        Suite::Grads => grad_checks(seed),
        Suite::Costs => cost_checks(seed),
    };
    let outcomes: Vec<Outcome> = thread_pool()?.install(|| checks.par_iter().map(|c| c()).collect());
    let passed = outcomes.iter().filter(|o| o.passed).count();
    let failures = outcomes
        .iter()
        .filter(|o| !o.passed)
        .take(10)
        .map(|o| o.detail.clone())
        .collect();
    let max_rel_error = outcomes.iter().filter_map(|o| o.rel_error).reduce(f64::max);
    Ok(SuiteReport {
        suite,
        checks: outcomes.len(),
        passed,
        failures,
        max_rel_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_suites(suites: &[Suite], seed: u64) -> Result<Vec<SuiteReport>> {
    suites.iter().map(|s| run_suite(*s, seed)).collect()
}

/// Plan arithmetic for every `c_out` in `1..=600` and `d` in `1..=3`.
fn plan_checks() -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    for d in 1..=3 {
        for c_out in 1..=600 {
            for c_in in [3, 64] {
                out.push(Box::new(move || {
                    let name = format!("plan c_in={c_in} c_out={c_out} d={d}");
                    Outcome::from_result(
                        &name,
                        check_plan(c_in, c_out, d)
                            .map(|r| Outcome::check(r.is_none(), || format!("{name}: {}", r.unwrap_or_default()))),
                    )
                }));
            }
        }
    }
    out
}

fn check_plan(c_in: usize, c_out: usize, d: usize) -> Result<Option<String>> {
    let plan = build_plan(c_in, c_out, DepthPolicy::Global { d })?;
    let depth = feasible_depth(c_out, d);
    if plan.depth != depth {
        return Ok(Some(format!("depth {} expected {depth}", plan.depth)));
    }
    let unit = 2 * ((1usize << depth) - 1);
    let smallest = (1..).find(|c| unit * c >= c_out).expect("unbounded search");
    if plan.c_prim != smallest {
        return Ok(Some(format!(
            "c_prim {} but smallest covering is {smallest}",
            plan.c_prim
        )));
    }
    let total: usize = plan.segments.iter().map(|s| s.channels).sum();
    if total != c_out {
        return Ok(Some(format!("segments sum to {total}")));
    }
    if let Some(v) = validate_plan(&plan).first() {
        return Ok(Some(v.to_string()));
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy)]
struct Case {
    c_in: usize,
    c_out: usize,
    d: usize,
    k: usize,
    stride: usize,
    padding: usize,
    hw: usize,
}

impl Case {
    fn host(&self) -> ConvSpec {
        ConvSpec::same(self.c_in, self.c_out, self.k)
            .with_stride(self.stride)
            .with_padding(self.padding)
    }

    fn layer(&self, seed: u64) -> Result<CompConvLayer> {
        let plan = build_plan(self.c_in, self.c_out, DepthPolicy::Global { d: self.d })?;
        CompConvLayer::init(plan, self.host(), &InitConfig::he_normal(seed))
    }

    fn label(&self) -> String {
        format!(
            "c_in={} c_out={} d={} k={} s={} p={} hw={}",
            self.c_in, self.c_out, self.d, self.k, self.stride, self.padding, self.hw
        )
    }
}

fn forward_cases() -> Vec<Case> {
    let mut v = Vec::new();
    for d in 1..=3 {
        for (c_in, c_out) in [(1, 5), (3, 7), (3, 20), (4, 13), (8, 8), (5, 30), (16, 9), (2, 64)] {
            for (k, stride, padding, hw) in [(3, 1, 1, 6), (3, 2, 1, 7), (1, 1, 0, 5), (5, 2, 1, 9), (3, 1, 0, 6)] {
                v.push(Case {
                    c_in,
                    c_out,
                    d,
                    k,
                    stride,
                    padding,
                    hw,
                });
            }
        }
    }
    v
}

/// Layer vs straight-line oracle, linearity, and the vanilla path vs `conv2d`.
fn forward_checks(seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    for (i, case) in forward_cases().into_iter().enumerate() {
        let i = i as u64;
        out.push(Box::new(move || {
            let name = format!("forward {}", case.label());
            Outcome::from_result(
                &name,
                (|| {
                    let layer = case.layer(seed ^ i)?;
                    let x = random_tensor([2, case.c_in, case.hw, case.hw], seed, 2 * i);
                    let y = layer.forward(&x, None)?;
                    let diff = y.max_abs_diff(&reference::compconv_forward(&layer, &x))?;
                    let z = random_tensor(x.shape(), seed, 2 * i + 1);
                    let lhs = layer.forward(&x.axpby(0.7, &z, -1.3)?, None)?;
                    let rhs = y.axpby(0.7, &layer.forward(&z, None)?, -1.3)?;
                    let lin = lhs.max_abs_diff(&rhs)?;
                    Ok(Outcome::check(
                        diff <= 1e-10 && lin <= 1e-10 && y.shape().c == case.c_out,
                        || {
                            format!(
                                "{name}: oracle diff {diff:e}, linearity {lin:e}, channels {}",
                                y.shape().c
                            )
                        },
                    ))
                })(),
            )
        }));
    }
    for i in 0..100u64 {
        out.push(Box::new(move || {
            let name = format!("vanilla case {i}");
            Outcome::from_result(
                &name,
                (|| {
                    let c_in = 1 + (i as usize * 7) % 9;
                    let c_out = 1 + (i as usize * 5) % 11;
                    let k = [1, 3, 5][i as usize % 3];
                    let spec = ConvSpec::same(c_in, c_out, k).with_stride(1 + (i as usize % 2));
                    let module =
                        ConvModule::build(spec, DepthPolicy::Global { d: 0 }, &InitConfig::he_normal(seed ^ i))?;
                    let ConvModule::Vanilla { weights, .. } = &module else {
                        return Ok(Outcome::check(false, || {
                            format!("{name}: d=0 did not give the vanilla path")
                        }));
                    };
                    let x = random_tensor([1, c_in, 7, 6], seed, 1000 + i);
                    let a = module.forward(&x, None)?;
                    let b = conv::conv2d(&x, weights, &spec, None)?;
                    let same_bits = a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
                    Ok(Outcome::check(same_bits, || format!("{name}: outputs differ")))
                })(),
            )
        }));
    }
    out
}

fn grad_outcome(
    name: &str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut crate::autograd::Graph, &[crate::autograd::NodeId]) -> Result<crate::autograd::NodeId>,
    seed: u64,
) -> Outcome {
    let cfg = FdConfig {
        seed,
        ..FdConfig::default()
    };
    Outcome::from_result(
        name,
        check_graph(name, &inputs, build, &cfg).map(|r| Outcome {
            passed: r.passed(),
            detail: format!(
                "{name}: {} of {} coordinates off, worst {:?}",
                r.failures, r.checked, r.worst
            ),
            rel_error: Some(r.max_rel_error),
        }),
    )
}

/// Inputs bounded away from zero so the relu kink never sits inside a finite-difference step.
fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Finite-difference checks for every differentiable op and for full layers.
fn grad_checks(seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    let r = move |shape: [usize; 4], i: u64| random_tensor(shape, seed, i);

    let convs = [
        ("conv k3", ConvSpec::same(2, 3, 3)),
        ("conv strided", ConvSpec::same(3, 2, 3).with_stride(2).with_padding(0)),
        ("conv grouped", ConvSpec::same(4, 6, 3).with_groups(2)),
        ("conv depthwise", ConvSpec::depthwise(3, 3)),
        ("conv k1", ConvSpec::same(3, 4, 1)),
    ];
    for (j, (name, spec)) in convs.into_iter().enumerate() {
        out.push(Box::new(move || {
            let w = spec.weight_shape().dims();
            grad_outcome(
                name,
                vec![r([2, spec.c_in, 5, 5], 10 * j as u64), r(w, 10 * j as u64 + 1)],
                |g, ids| g.conv2d(&ids[0], &ids[1], &spec),
                seed,
            )
        }));
    }
    out.push(Box::new(move || {
        grad_outcome(
            "concat",
            vec![r([2, 2, 3, 3], 60), r([2, 3, 3, 3], 61)],
            |g, ids| g.concat(&[ids[1], ids[0], ids[1]]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "slice wrap",
            vec![r([2, 3, 3, 3], 62)],
            |g, ids| g.slice_channels(&ids[0], 2, 8, true),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "shuffle",
            vec![r([2, 8, 2, 2], 63)],
            |g, ids| g.channel_shuffle(&ids[0], 4),
            seed,
        )
    }));
    out.push(Box::new(move || {
        let sub = Subsample::for_host(7, 7, 2, 3, 0).expect("fits");
        grad_outcome(
            "subsample",
            vec![r([2, 2, 7, 7], 64)],
            move |g, ids| g.spatial_subsample(&ids[0], &sub),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "relu",
            vec![away_from_zero(r([2, 3, 4, 4], 65))],
            |g, ids| g.relu(&ids[0]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "maxpool",
            vec![r([2, 3, 4, 6], 66)],
            |g, ids| g.maxpool2x2(&ids[0]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "global avg pool",
            vec![r([2, 3, 4, 4], 67)],
            |g, ids| g.global_avg_pool(&ids[0]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "dense",
            vec![r([3, 5, 1, 1], 68), r([4, 5, 1, 1], 69), r([1, 4, 1, 1], 70)],
            |g, ids| g.dense(&ids[0], &ids[1], &ids[2]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "add",
            vec![r([2, 3, 2, 2], 71), r([2, 3, 2, 2], 72)],
            |g, ids| g.add(&ids[0], &ids[1]),
            seed,
        )
    }));
    out.push(Box::new(move || {
        grad_outcome(
            "softmax cross-entropy",
            vec![r([4, 3, 1, 1], 73)],
            |g, ids| g.softmax_cross_entropy(ids[0], &[0, 2, 1, 2]),
            seed,
        )
    }));

    let layers = [
        Case {
            c_in: 8,
            c_out: 8,
            d: 2,
            k: 3,
            stride: 1,
            padding: 1,
            hw: 4,
        },
        Case {
            c_in: 3,
            c_out: 10,
            d: 1,
            k: 3,
            stride: 1,
            padding: 1,
            hw: 4,
        },
        Case {
            c_in: 4,
            c_out: 7,
            d: 2,
            k: 3,
            stride: 1,
            padding: 1,
            hw: 4,
        },
        Case {
            c_in: 3,
            c_out: 20,
            d: 3,
            k: 3,
            stride: 1,
            padding: 1,
            hw: 4,
        },
        Case {
            c_in: 5,
            c_out: 13,
            d: 3,
            k: 3,
            stride: 2,
            padding: 1,
            hw: 5,
        },
        Case {
            c_in: 2,
            c_out: 15,
            d: 3,
            k: 1,
            stride: 1,
            padding: 0,
            hw: 3,
        },
        Case {
            c_in: 6,
            c_out: 9,
            d: 2,
            k: 3,
            stride: 2,
            padding: 0,
            hw: 5,
        },
        Case {
            c_in: 16,
            c_out: 16,
            d: 3,
            k: 3,
            stride: 1,
            padding: 1,
            hw: 4,
        },
    ];
    for (j, case) in layers.into_iter().enumerate() {
        out.push(Box::new(move || {
            let name = format!("compconv {}", case.label());
            Outcome::from_result(
                &name,
                (|| {
                    let layer = case.layer(seed ^ (100 + j as u64))?;
                    let mut inputs = vec![r([2, case.c_in, case.hw, case.hw], 200 + j as u64)];
                    inputs.extend(layer.weights.iter().cloned());
                    let plan = layer.plan.clone();
                    let host = layer.host;
                    Ok(grad_outcome(
                        &name,
                        inputs,
                        move |g, ids| {
                            let w = crate::layer::CompWeights::from_ordered(ids[1..].to_vec())?;
                            compconv_forward(g, &plan, &host, &w, &ids[0])
                        },
                        seed,
                    ))
                })(),
            )
        }));
    }
    out
}

/// Analytic MACs and parameters against an instrumented forward pass.
fn cost_checks(seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = Vec::new();
    let mut cases = Vec::new();
    for c_in in [3, 8, 64] {
        for d in 1..=3 {
            for c_out in 1..=128 {
                cases.push(Case {
                    c_in,
                    c_out,
                    d,
                    k: 3,
                    stride: 1,
                    padding: 1,
                    hw: 5,
                });
            }
        }
    }
    for d in 1..=3 {
        for c_out in [1, 6, 13, 29, 64] {
            cases.push(Case {
                c_in: 8,
                c_out,
                d,
                k: 3,
                stride: 2,
                padding: 1,
                hw: 7,
            });
            cases.push(Case {
                c_in: 8,
                c_out,
                d,
                k: 1,
                stride: 1,
                padding: 0,
                hw: 4,
            });
            cases.push(Case {
                c_in: 8,
                c_out,
                d,
                k: 5,
                stride: 2,
                padding: 0,
                hw: 9,
            });
        }
    }
    for (i, case) in cases.into_iter().enumerate() {
        out.push(Box::new(move || {
            let name = format!("cost {}", case.label());
            Outcome::from_result(
                &name,
                (|| {
                    let layer = case.layer(seed ^ i as u64)?;
                    let x = Tensor::full([1, case.c_in, case.hw, case.hw], 0.5);
                    let mut counter = MacCounter::new();
                    let y = layer.forward(&x, Some(&mut counter))?;
                    let cost = compconv_cost(&layer.plan, &layer.host, case.hw, case.hw)?;
                    let ys = y.shape();
                    let ok = counter.macs() == cost.macs
                        && layer.param_count() == cost.params
                        && (ys.c, ys.h, ys.w) == cost.out_shape;
                    Ok(Outcome::check(ok, || {
                        format!(
                            "{name}: counted {} vs analytic {} MACs, params {} vs {}",
                            counter.macs(),
                            cost.macs,
                            layer.param_count(),
                            cost.params
                        )
                    }))
                })(),
            )
        }));
    }
    for (i, spec) in [
        ConvSpec::same(3, 64, 3),
        ConvSpec::same(8, 8, 3).with_groups(4).with_stride(2),
        ConvSpec::depthwise(12, 5),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(Box::new(move || {
            let name = format!("vanilla cost {i}");
            Outcome::from_result(
                &name,
                (|| {
                    let w = random_tensor(spec.weight_shape(), seed, 5000 + i as u64);
                    let x = Tensor::full([1, spec.c_in, 9, 9], 1.0);
                    let mut counter = MacCounter::new();
                    conv::conv2d(&x, &w, &spec, Some(&mut counter))?;
                    let cost = conv_cost(&spec, 9, 9)?;
                    Ok(Outcome::check(counter.macs() == cost.macs, || {
                        format!("{name}: counted {} vs {}", counter.macs(), cost.macs)
                    }))
                })(),
            )
        }));
    }
    out
}
