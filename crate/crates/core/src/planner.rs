//! Resolves `(c_in, c_out, depth policy)` into a concrete CompConv layout.
//!
//! Block `G_1` is the inner convolution with `c_prim` outputs. For `m >= 2`,
//! `G_m` is an identity copy of the first `|G_{m-1}|` input channels followed
//! by `G_{m-1}` itself (`m = 2`) or a square convolution of `G_{m-1}` (`m >= 3`),
//! so `|G_m| = 2^(m-1) * c_prim`. The top block `G_d` feeds a square
//! "top transform" and a depthwise "tail". The output is
//!
//! ```text
//! d = 1:  [G_1, Tail]
//! d >= 2: [G_2, ..., G_d, TopTransform, Tail]
//! ```
//!
//! which sums to `2 * (2^d - 1) * c_prim >= c_out`. The surplus is trimmed
//! from the end of that list, and the concatenation is then channel-shuffled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DEPTH: usize = 4;
pub const ADAPTIVE_MAX_DEPTH: usize = 3;
pub const C0_CHOICES: [usize; 5] = [32, 64, 128, 256, 512];

/// How a layer's recursion depth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DepthPolicy {
    /// Per-layer depth from the input width, `min(floor(log2(max(1, c_in/c0))) + 1, 3)`.
    Adaptive {
        c0: usize,
    },
    /// One depth for every replaced layer; `d = 0` means no compression.
    Global {
        d: usize,
    },
    Vanilla,
}

impl DepthPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DepthPolicy::Adaptive { c0: 0 } => Err(Error::invalid("adaptive policy needs c0 >= 1")),
            DepthPolicy::Global { d } if d > MAX_DEPTH => Err(Error::invalid(format!(
                "global depth {d} exceeds the maximum of {MAX_DEPTH}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn is_vanilla(&self) -> bool {
        matches!(self, DepthPolicy::Vanilla | DepthPolicy::Global { d: 0 })
    }

    /// Requested depth before the feasibility reduction; 0 for vanilla.
    pub fn requested_depth(&self, c_in: usize) -> Result<usize> {
        self.validate()?;
        Ok(match *self {
            DepthPolicy::Adaptive { c0 } => choose_depth(c_in, c0),
            DepthPolicy::Global { d } => d,
            DepthPolicy::Vanilla => 0,
        })
    }
}

impl fmt::Display for DepthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthPolicy::Adaptive { c0 } => write!(f, "adaptive(C0={c0})"),
            DepthPolicy::Global { d } => write!(f, "global(d={d})"),
            DepthPolicy::Vanilla => write!(f, "vanilla"),
        }
    }
}

/// Number of output channels produced by `c_prim` at depth `d` before any drop.
pub fn raw_total(c_prim: usize, d: usize) -> usize {
    2 * ((1 << d) - 1) * c_prim
}

/// `ceil(c_out / (2 * (2^d - 1)))`.
pub fn compute_cprim(c_out: usize, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::invalid("depth 0 is the vanilla path; c_prim is undefined"));
    }
    if d > MAX_DEPTH {
        return Err(Error::invalid(format!("depth {d} exceeds {MAX_DEPTH}")));
    }
    if c_out == 0 {
        return Err(Error::invalid("c_out must be positive"));
    }
    Ok(c_out.div_ceil(raw_total(1, d)))
}

/// Integer form of the adaptive depth rule; the ratio is floored before the log.
pub fn choose_depth(c_in: usize, c0: usize) -> usize {
    let ratio = c_in / c0.max(1);
    let log2 = if ratio >= 1 { ratio.ilog2() as usize } else { 0 };
    (log2 + 1).min(ADAPTIVE_MAX_DEPTH)
}

/// Largest depth `<= d` whose output layout has no empty mandatory segments.
pub fn feasible_depth(c_out: usize, d: usize) -> usize {
    let mut d = d;
    while d > 1 && c_out < raw_total(1, d) {
        d -= 1;
    }
    d
}

/// Largest of {4, 2, 1} dividing `c_out`.
pub fn shuffle_groups_for(c_out: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| c_out.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Post-merge block `G_m` (1-based level).
    Block(usize),
    TopTransform,
    Tail,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentKind::Block(m) => write!(f, "G{m}"),
            SegmentKind::TopTransform => f.write_str("TopTransform"),
            SegmentKind::Tail => f.write_str("Tail"),
        }
    }
}

impl FromStr for SegmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TopTransform" => Ok(SegmentKind::TopTransform),
            "Tail" => Ok(SegmentKind::Tail),
            _ => s
                .strip_prefix('G')
                .and_then(|m| m.parse().ok())
                .map(SegmentKind::Block)
                .ok_or_else(|| Error::format(format!("unknown segment label {s:?}"))),
        }
    }
}

/// One slot of the output concatenation: `raw` channels computed by the layout, `channels` kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub raw: usize,
    pub channels: usize,
}

/// Identity copy of input channels `[start, start+len)` (cyclic when `wrap`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopySpec {
    pub start: usize,
    pub len: usize,
    pub wrap: bool,
}

/// Fully resolved layout of one CompConv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompPlan {
    pub depth: usize,
    pub c_prim: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `|G_1| .. |G_d|`.
    pub block_sizes: Vec<usize>,
    /// Copies feeding `G_2 .. G_d`, in level order.
    pub copy_specs: Vec<CopySpec>,
    /// Output concatenation order with kept channel counts.
    pub segments: Vec<Segment>,
    /// Raw total minus `c_out`.
    pub drop: usize,
    pub tail_channels: usize,
    /// Channels trimmed beyond the tail.
    pub extra_drop: usize,
    pub shuffle_groups: usize,
}

/// Either a CompConv layout or the untouched convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerChoice {
    Vanilla,
    Comp(CompPlan),
}

/// Resolve a policy for one layer; vanilla policies yield [`LayerChoice::Vanilla`].
pub fn plan_for(c_in: usize, c_out: usize, policy: DepthPolicy) -> Result<LayerChoice> {
    if policy.requested_depth(c_in)? == 0 {
        return Ok(LayerChoice::Vanilla);
    }
    build_plan(c_in, c_out, policy).map(LayerChoice::Comp)
}

pub fn build_plan(c_in: usize, c_out: usize, policy: DepthPolicy) -> Result<CompPlan> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::invalid(format!(
            "channel counts must be positive (c_in={c_in}, c_out={c_out})"
        )));
    }
    let requested = policy.requested_depth(c_in)?;
    if requested == 0 {
        return Err(Error::Infeasible(format!(
            "policy {policy} selects the vanilla path; there is no CompConv plan"
        )));
    }
    plan_with_depth(c_in, c_out, feasible_depth(c_out, requested))
}

fn plan_with_depth(c_in: usize, c_out: usize, depth: usize) -> Result<CompPlan> {
    let c_prim = compute_cprim(c_out, depth)?;
    let block_sizes: Vec<usize> = (0..depth).map(|i| c_prim << i).collect();
    let copy_specs = block_sizes[..depth - 1]
        .iter()
        .map(|&len| CopySpec {
            start: 0,
            len,
            wrap: true,
        })
        .collect();

    let top = block_sizes[depth - 1];
    let mut layout: Vec<(SegmentKind, usize)> = if depth == 1 {
        vec![(SegmentKind::Block(1), c_prim)]
    } else {
        (2..=depth)
            .map(|m| (SegmentKind::Block(m), block_sizes[m - 1]))
            .chain(std::iter::once((SegmentKind::TopTransform, top)))
            .collect()
    };
    layout.push((SegmentKind::Tail, top));

    let raw = raw_total(c_prim, depth);
    let drop = raw - c_out;
    let mut remaining = drop;
    let mut segments: Vec<Segment> = layout
        .into_iter()
        .rev()
        .map(|(kind, size)| {
            let cut = remaining.min(size);
            remaining -= cut;
            Segment {
                kind,
                raw: size,
                channels: size - cut,
            }
        })
        .collect();
    segments.reverse();

    let tail_channels = top - drop.min(top);
    Ok(CompPlan {
        depth,
        c_prim,
        c_in,
        c_out,
        block_sizes,
        copy_specs,
        segments,
        drop,
        tail_channels,
        extra_drop: drop.saturating_sub(top),
        shuffle_groups: shuffle_groups_for(c_out),
    })
}

/// Broken invariants reported by [`validate_plan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DepthRange(usize),
    CprimMinimality {
        c_prim: usize,
        c_out: usize,
        depth: usize,
    },
    BlockSizes,
    CopySpecs,
    SegmentOrder,
    SegmentRaw,
    ChannelSum {
        sum: usize,
        c_out: usize,
    },
    DropAccounting,
    TrimNotSuffix,
    TailChannels,
    ExtraDrop,
    /// The executor can only elide channels of the tail and top transform.
    ExtraDropBeyondTop,
    ShuffleGroups {
        got: usize,
        expected: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepthRange(d) => write!(f, "depth {d} outside 1..={MAX_DEPTH}"),
            Violation::CprimMinimality { c_prim, c_out, depth } => write!(
                f,
                "c_prim minimality: c_prim={c_prim} is not the least width covering c_out={c_out} at depth {depth}"
            ),
            Violation::BlockSizes => f.write_str("block sizes are not 2^(m-1)*c_prim"),
            Violation::CopySpecs => f.write_str("copy specs must be (0, |G_{m-1}|, wrap) for m = 2..d"),
            Violation::SegmentOrder => f.write_str("segment order does not match the depth"),
            Violation::SegmentRaw => f.write_str("segment raw sizes disagree with block sizes"),
            Violation::ChannelSum { sum, c_out } => {
                write!(f, "channel sum: segments total {sum}, expected c_out={c_out}")
            }
            Violation::DropAccounting => f.write_str("drop != raw total - c_out"),
            Violation::TrimNotSuffix => f.write_str("trimmed channels are not a suffix of the concatenation"),
            Violation::TailChannels => f.write_str("tail_channels disagrees with the tail segment"),
            Violation::ExtraDrop => f.write_str("extra_drop disagrees with drop beyond the tail"),
            Violation::ExtraDropBeyondTop => f.write_str("extra_drop reaches past the top transform"),
            Violation::ShuffleGroups { got, expected } => {
                write!(f, "shuffle groups {got}, expected {expected}")
            }
        }
    }
}

/// Checks every plan invariant; never fails, returns the list of violations.
pub fn validate_plan(plan: &CompPlan) -> Vec<Violation> {
    let mut v = Vec::new();
    let d = plan.depth;
    if d == 0 || d > MAX_DEPTH {
        v.push(Violation::DepthRange(d));
        return v;
    }
    let unit = raw_total(1, d);
    let covers = unit * plan.c_prim >= plan.c_out;
    let minimal = plan.c_prim >= 1 && plan.c_out > unit * (plan.c_prim - 1);
    if !covers || !minimal {
        v.push(Violation::CprimMinimality {
            c_prim: plan.c_prim,
            c_out: plan.c_out,
            depth: d,
        });
    }
    let expected_blocks: Vec<usize> = (0..d).map(|i| plan.c_prim << i).collect();
    if plan.block_sizes != expected_blocks {
        v.push(Violation::BlockSizes);
    }
    let copies_ok = plan.copy_specs.len() == d - 1
        && plan
            .copy_specs
            .iter()
            .zip(&expected_blocks)
            .all(|(c, &len)| c.start == 0 && c.len == len && c.wrap);
    if !copies_ok {
        v.push(Violation::CopySpecs);
    }

    let mut order: Vec<SegmentKind> = if d == 1 {
        vec![SegmentKind::Block(1)]
    } else {
        (2..=d)
            .map(SegmentKind::Block)
            .chain([SegmentKind::TopTransform])
            .collect()
    };
    order.push(SegmentKind::Tail);
    let kinds: Vec<SegmentKind> = plan.segments.iter().map(|s| s.kind).collect();
    if kinds != order {
        v.push(Violation::SegmentOrder);
    } else {
        let top = plan.c_prim << (d - 1);
        let raw_ok = plan.segments.iter().all(|s| {
            s.raw
                == match s.kind {
                    SegmentKind::Block(m) => plan.c_prim << (m - 1),
                    _ => top,
                }
        });
        if !raw_ok {
            v.push(Violation::SegmentRaw);
        }
    }

    let sum: usize = plan.segments.iter().map(|s| s.channels).sum();
    if sum != plan.c_out {
        v.push(Violation::ChannelSum { sum, c_out: plan.c_out });
    }
    let raw_sum: usize = plan.segments.iter().map(|s| s.raw).sum();
    if raw_sum < plan.c_out || plan.drop != raw_sum - plan.c_out {
        v.push(Violation::DropAccounting);
    }
    // Once a segment is trimmed, everything after it must be fully dropped.
    let mut seen_trim = false;
    let mut suffix_ok = true;
    for s in &plan.segments {
        if s.channels > s.raw || (seen_trim && s.channels != 0) {
            suffix_ok = false;
        }
        if s.channels < s.raw {
            seen_trim = true;
        }
    }
    if !suffix_ok {
        v.push(Violation::TrimNotSuffix);
    }
    if let Some(tail) = plan.segments.last().filter(|s| s.kind == SegmentKind::Tail) {
        if tail.channels != plan.tail_channels {
            v.push(Violation::TailChannels);
        }
        if plan.extra_drop != plan.drop.saturating_sub(tail.raw) {
            v.push(Violation::ExtraDrop);
        }
        let top_raw = if d >= 2 { tail.raw } else { 0 };
        if plan.extra_drop > top_raw {
            v.push(Violation::ExtraDropBeyondTop);
        }
    }
    let expected_g = shuffle_groups_for(plan.c_out);
    if plan.shuffle_groups != expected_g {
        v.push(Violation::ShuffleGroups {
            got: plan.shuffle_groups,
            expected: expected_g,
        });
    }
    v
}

impl CompPlan {
    pub fn top_size(&self) -> usize {
        self.block_sizes[self.depth - 1]
    }

    /// Kept output channels of the top transform (0 when `d = 1`).
    pub fn top_channels(&self) -> usize {
        self.segments
            .iter()
            .find(|s| s.kind == SegmentKind::TopTransform)
            .map_or(0, |s| s.channels)
    }

    pub fn raw_total(&self) -> usize {
        raw_total(self.c_prim, self.depth)
    }

    pub fn output_order(&self) -> Vec<SegmentKind> {
        self.segments.iter().map(|s| s.kind).collect()
    }

    /// Human-readable `key: value` record, one field per line.
    pub fn to_record(&self) -> String {
        let list = |items: Vec<String>| format!("[{}]", items.join(", "));
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(&v);
            out.push('\n');
        };
        line("depth", self.depth.to_string());
        line("c_in", self.c_in.to_string());
        line("c_out", self.c_out.to_string());
        line("c_prim", self.c_prim.to_string());
        line(
            "block_sizes",
            list(self.block_sizes.iter().map(|b| b.to_string()).collect()),
        );
        line(
            "copy_specs",
            list(
                self.copy_specs
                    .iter()
                    .map(|c| format!("{}+{}{}", c.start, c.len, if c.wrap { " wrap" } else { "" }))
                    .collect(),
            ),
        );
        line(
            "segments",
            list(
                self.segments
                    .iter()
                    .map(|s| format!("{}:{}/{}", s.kind, s.channels, s.raw))
                    .collect(),
            ),
        );
        line("drop", self.drop.to_string());
        line("tail_channels", self.tail_channels.to_string());
        line("extra_drop", self.extra_drop.to_string());
        line("shuffle_groups", self.shuffle_groups.to_string());
        out
    }

    /// Parses [`CompPlan::to_record`] output. Unknown keys are rejected.
    pub fn from_record(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::format(format!("plan record line without ':' {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::format(format!("plan record missing {k:?}")))
        };
        let num = |s: String, k: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(format!("plan record field {k:?} is not an integer: {s:?}")))
        };
        let items = |s: &str| -> Result<Vec<String>> {
            let inner = s
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| Error::format(format!("expected a bracketed list, got {s:?}")))?;
            Ok(inner
                .split(',')
                .map(|p| p.trim().to_string())
                .filter(|p| !p.is_empty())
                .collect())
        };

        let depth = num(take("depth")?, "depth")?;
        let c_in = num(take("c_in")?, "c_in")?;
        let c_out = num(take("c_out")?, "c_out")?;
        let c_prim = num(take("c_prim")?, "c_prim")?;
        let block_sizes = items(&take("block_sizes")?)?
            .into_iter()
            .map(|b| num(b, "block_sizes"))
            .collect::<Result<_>>()?;
        let copy_specs = items(&take("copy_specs")?)?
            .into_iter()
            .map(|c| {
                let (body, wrap) = match c.strip_suffix(" wrap") {
                    Some(b) => (b.to_string(), true),
                    None => (c.clone(), false),
                };
                let (s, l) = body
                    .split_once('+')
                    .ok_or_else(|| Error::format(format!("bad copy spec {c:?}")))?;
                Ok(CopySpec {
                    start: num(s.to_string(), "copy_specs")?,
                    len: num(l.to_string(), "copy_specs")?,
                    wrap,
                })
            })
            .collect::<Result<_>>()?;
        let segments = items(&take("segments")?)?
            .into_iter()
            .map(|s| {
                let (label, counts) = s
                    .split_once(':')
                    .ok_or_else(|| Error::format(format!("bad segment {s:?}")))?;
                let (kept, raw) = counts
                    .split_once('/')
                    .ok_or_else(|| Error::format(format!("bad segment {s:?}")))?;
                Ok(Segment {
                    kind: label.parse()?,
                    raw: num(raw.to_string(), "segments")?,
                    channels: num(kept.to_string(), "segments")?,
                })
            })
            .collect::<Result<_>>()?;
        let plan = CompPlan {
            depth,
            c_prim,
            c_in,
            c_out,
            block_sizes,
            copy_specs,
            segments,
            drop: num(take("drop")?, "drop")?,
            tail_channels: num(take("tail_channels")?, "tail_channels")?,
            extra_drop: num(take("extra_drop")?, "extra_drop")?,
            shuffle_groups: num(take("shuffle_groups")?, "shuffle_groups")?,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::format(format!("unknown plan record field {k:?}")));
        }
        Ok(plan)
    }
}

impl fmt::Display for CompPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_record())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(plan: &CompPlan) -> Vec<(String, usize)> {
        plan.segments.iter().map(|s| (s.kind.to_string(), s.channels)).collect()
    }

    #[test]
    fn cprim_examples() {
        assert_eq!(compute_cprim(256, 3).unwrap(), 19);
        assert_eq!(compute_cprim(64, 1).unwrap(), 32);
        assert_eq!(compute_cprim(512, 3).unwrap(), 37);
        assert!(compute_cprim(64, 0).is_err());
    }

    #[test]
    fn depth_examples() {
        assert_eq!(choose_depth(64, 128), 1);
        assert_eq!(choose_depth(256, 128), 2);
        assert_eq!(choose_depth(2048, 128), 3);
        assert_eq!(choose_depth(3, 128), 1);
    }

    #[test]
    fn plan_global_two() {
        let p = build_plan(64, 64, DepthPolicy::Global { d: 2 }).unwrap();
        assert_eq!(p.c_prim, 11);
        assert_eq!(p.block_sizes, vec![11, 22]);
        assert_eq!(p.raw_total(), 66);
        assert_eq!(p.drop, 2);
        assert_eq!(p.tail_channels, 20);
        assert_eq!(
            seg(&p),
            vec![("G2".into(), 22), ("TopTransform".into(), 22), ("Tail".into(), 20)]
        );
        assert_eq!(p.shuffle_groups, 4);
        assert!(validate_plan(&p).is_empty());
    }

    #[test]
    fn plan_adaptive_512() {
        let p = build_plan(512, 512, DepthPolicy::Adaptive { c0: 128 }).unwrap();
        assert_eq!((p.depth, p.c_prim, p.drop), (3, 37, 6));
        assert_eq!(
            seg(&p),
            vec![
                ("G2".into(), 74),
                ("G3".into(), 148),
                ("TopTransform".into(), 148),
                ("Tail".into(), 142)
            ]
        );
        assert_eq!(p.copy_specs.len(), 2);
        assert_eq!(
            p.copy_specs[1],
            CopySpec {
                start: 0,
                len: 74,
                wrap: true
            }
        );
    }

    #[test]
    fn plan_adaptive_rgb_input() {
        let p = build_plan(3, 64, DepthPolicy::Adaptive { c0: 128 }).unwrap();
        assert_eq!((p.depth, p.c_prim, p.drop), (1, 32, 0));
        assert_eq!(seg(&p), vec![("G1".into(), 32), ("Tail".into(), 32)]);
        assert!(p.copy_specs.is_empty());
    }

    #[test]
    fn vanilla_policies() {
        assert_eq!(plan_for(8, 8, DepthPolicy::Vanilla).unwrap(), LayerChoice::Vanilla);
        assert_eq!(
            plan_for(8, 8, DepthPolicy::Global { d: 0 }).unwrap(),
            LayerChoice::Vanilla
        );
        assert!(build_plan(8, 8, DepthPolicy::Global { d: 0 }).is_err());
        assert!(build_plan(8, 8, DepthPolicy::Global { d: 5 }).is_err());
    }

    #[test]
    fn tiny_outputs_reduce_depth() {
        // c_out = 5 cannot host the d=2 layout (needs >= 6)
        let p = build_plan(8, 5, DepthPolicy::Global { d: 3 }).unwrap();
        assert_eq!(p.depth, 1);
        let p = build_plan(8, 1, DepthPolicy::Global { d: 2 }).unwrap();
        assert_eq!((p.depth, p.c_prim, p.tail_channels), (1, 1, 0));
        assert!(validate_plan(&p).is_empty());
    }

    #[test]
    fn extra_drop_trims_top_transform() {
        // d=3, c_out=15: c_prim=2, raw 28, drop 13 > tail 8
        let p = build_plan(8, 15, DepthPolicy::Global { d: 3 }).unwrap();
        assert_eq!((p.drop, p.tail_channels, p.extra_drop), (13, 0, 5));
        assert_eq!(p.top_channels(), 3);
        assert!(validate_plan(&p).is_empty());
    }

    #[test]
    fn validator_flags_mutations() {
        let good = build_plan(64, 64, DepthPolicy::Global { d: 2 }).unwrap();
        let mut p = good.clone();
        p.c_prim -= 1;
        assert!(validate_plan(&p)
            .iter()
            .any(|v| matches!(v, Violation::CprimMinimality { .. })));
        let mut p = good.clone();
        p.segments[2].channels += 1;
        assert!(validate_plan(&p)
            .iter()
            .any(|v| matches!(v, Violation::ChannelSum { .. })));
        let mut p = good;
        p.shuffle_groups = 2;
        let v = validate_plan(&p);
        assert_eq!(v, vec![Violation::ShuffleGroups { got: 2, expected: 4 }]);
        assert!(v[0].to_string().contains("shuffle"));
    }

    #[test]
    fn record_round_trip() {
        for (ci, co, d) in [(512, 512, 3), (3, 64, 1), (8, 15, 3), (7, 1, 1)] {
            let p = build_plan(ci, co, DepthPolicy::Global { d }).unwrap();
            let text = p.to_record();
            assert_eq!(CompPlan::from_record(&text).unwrap(), p);
        }
        assert!(CompPlan::from_record("depth: 1\n").is_err());
        let p = build_plan(64, 64, DepthPolicy::Global { d: 2 }).unwrap();
        let extra = format!("{}bogus: 1\n", p.to_record());
        assert!(CompPlan::from_record(&extra).is_err());
    }
}
