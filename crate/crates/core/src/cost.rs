//! Exact parameter and multiply-accumulate accounting.
//!
//! Every count is an integer. A CompConv layer is charged per output pixel
//! `k^2 * (c_in*c_prim + sum_{m=3..d} |G_{m-1}|^2 + |G_d|*top + tail)`, where
//! `top` and `tail` are the channels that survive the drop rule. The
//! undropped closed form is reported next to it as `literal_*`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::planner::{validate_plan, CompPlan, DepthPolicy};
use crate::zoo::{compress, compress_where, ArchSpec, LayerDescriptor, LayerKind};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub macs: u64,
    pub out_shape: (usize, usize, usize),
}

pub fn conv_cost(spec: &ConvSpec, h_in: usize, w_in: usize) -> Result<LayerCost> {
    spec.validate()?;
    let (ho, wo) = spec.output_hw(h_in, w_in)?;
    Ok(LayerCost {
        params: spec.params(),
        macs: spec.macs(1, ho, wo),
        out_shape: (spec.c_out, ho, wo),
    })
}

fn per_pixel_units(plan: &CompPlan) -> u64 {
    let d = plan.depth;
    let g = |m: usize| plan.block_sizes[m - 1] as u64;
    let mut units = (plan.c_in * plan.c_prim) as u64;
    units += (3..=d).map(|m| g(m - 1) * g(m - 1)).sum::<u64>();
    if d >= 2 {
        units += g(d) * plan.top_channels() as u64;
    }
    units + plan.tail_channels as u64
}

fn check_plan(plan: &CompPlan, host: &ConvSpec) -> Result<()> {
    if let Some(v) = validate_plan(plan).first() {
        return Err(Error::invalid(format!("invalid plan: {v}")));
    }
    if plan.c_in != host.c_in || plan.c_out != host.c_out {
        return Err(Error::invalid("plan and host channel counts disagree"));
    }
    host.validate()
}

pub fn compconv_cost(plan: &CompPlan, host: &ConvSpec, h_in: usize, w_in: usize) -> Result<LayerCost> {
    check_plan(plan, host)?;
    let (ho, wo) = host.output_hw(h_in, w_in)?;
    let kk = (host.k * host.k) as u64;
    let params = kk * per_pixel_units(plan);
    Ok(LayerCost {
        params,
        macs: (ho * wo) as u64 * params,
        out_shape: (plan.c_out, ho, wo),
    })
}

/// The undropped closed form: `k^2 * (c_in*c_prim + sum_{i=1}^{d-1} (2^i c_prim)^2 + 2^{d-1} c_prim)`.
pub fn literal_compconv_cost(plan: &CompPlan, host: &ConvSpec, h_in: usize, w_in: usize) -> Result<LayerCost> {
    check_plan(plan, host)?;
    let (ho, wo) = host.output_hw(h_in, w_in)?;
    let c = plan.c_prim as u64;
    let squares: u64 = (1..plan.depth).map(|i| (c << i) * (c << i)).sum();
    let units = plan.c_in as u64 * c + squares + (c << (plan.depth - 1));
    let params = (host.k * host.k) as u64 * units;
    Ok(LayerCost {
        params,
        macs: (ho * wo) as u64 * params,
        out_shape: (plan.c_out, ho, wo),
    })
}

pub fn dense_cost(c_in: usize, c_out: usize) -> LayerCost {
    let macs = (c_in * c_out) as u64;
    LayerCost {
        params: macs + c_out as u64,
        macs,
        out_shape: (c_out, 1, 1),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    /// Recursion depth of the compressed layer; 0 for untouched layers.
    pub depth: usize,
    pub vanilla: LayerCost,
    pub compressed: LayerCost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub literal: Option<LayerCost>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostTotals {
    pub vanilla_params: u64,
    pub vanilla_macs: u64,
    pub compressed_params: u64,
    pub compressed_macs: u64,
    pub literal_params: u64,
    pub literal_macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    pub params: f64,
    pub macs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub schema_version: u32,
    pub arch: String,
    pub policy: String,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
    pub ratios: CostRatios,
}

fn walk(
    layers: &[LayerDescriptor],
    (mut c, mut h, mut w): (usize, usize, usize),
    rows: &mut Vec<CostRow>,
) -> Result<(usize, usize, usize)> {
    for l in layers {
        let at = |e: Error| Error::Infeasible(format!("layer {}: {e}", l.name));
        match &l.kind {
            LayerKind::Conv { spec } => {
                if spec.c_in != c {
                    return Err(at(Error::shape(format!("expects {} channels, got {c}", spec.c_in))));
                }
                let cost = conv_cost(spec, h, w).map_err(at)?;
                rows.push(CostRow {
                    name: l.name.clone(),
                    kind: "conv".into(),
                    depth: 0,
                    vanilla: cost,
                    compressed: cost,
                    literal: None,
                });
                (c, h, w) = cost.out_shape;
            }
            LayerKind::Compconv { host, plan } => {
                if host.c_in != c {
                    return Err(at(Error::shape(format!("expects {} channels, got {c}", host.c_in))));
                }
                let vanilla = conv_cost(host, h, w).map_err(at)?;
                let compressed = compconv_cost(plan, host, h, w).map_err(at)?;
                rows.push(CostRow {
                    name: l.name.clone(),
                    kind: "compconv".into(),
                    depth: plan.depth,
                    vanilla,
                    compressed,
                    literal: Some(literal_compconv_cost(plan, host, h, w).map_err(at)?),
                });
                (c, h, w) = compressed.out_shape;
            }
            LayerKind::Dense { c_in, c_out } => {
                if *c_in != c || h != 1 || w != 1 {
                    return Err(at(Error::shape(format!("dense {c_in} applied to ({c}, {h}, {w})"))));
                }
                let cost = dense_cost(*c_in, *c_out);
                rows.push(CostRow {
                    name: l.name.clone(),
                    kind: "dense".into(),
                    depth: 0,
                    vanilla: cost,
                    compressed: cost,
                    literal: None,
                });
                (c, h, w) = cost.out_shape;
            }
            LayerKind::Relu => {}
            LayerKind::Maxpool => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(at(Error::shape(format!("maxpool needs even dims, got {h}x{w}"))));
                }
                (h, w) = (h / 2, w / 2);
            }
            LayerKind::GlobalAvgPool => (h, w) = (1, 1),
            LayerKind::Residual { body, projection } => {
                let out = walk(body, (c, h, w), rows)?;
                let skip = match projection {
                    Some(p) => walk(std::slice::from_ref(p.as_ref()), (c, h, w), rows)?,
                    None => (c, h, w),
                };
                if skip != out {
                    return Err(at(Error::shape(format!(
                        "residual branch {out:?} does not match shortcut {skip:?}"
                    ))));
                }
                (c, h, w) = out;
            }
        }
    }
    Ok((c, h, w))
}

impl CostReport {
    /// Cost rows for an architecture as given (already compressed or not).
    pub fn for_arch(arch: &ArchSpec, policy_label: impl Into<String>) -> Result<Self> {
        let mut rows = Vec::new();
        let s = arch.input_shape;
        walk(&arch.layers, (s.c, s.h, s.w), &mut rows)?;
        let mut t = CostTotals::default();
        for r in &rows {
            t.vanilla_params += r.vanilla.params;
            t.vanilla_macs += r.vanilla.macs;
            t.compressed_params += r.compressed.params;
            t.compressed_macs += r.compressed.macs;
            let lit = r.literal.unwrap_or(r.compressed);
            t.literal_params += lit.params;
            t.literal_macs += lit.macs;
        }
        let mut report = CostReport {
            schema_version: REPORT_SCHEMA_VERSION,
            arch: arch.name.clone(),
            policy: policy_label.into(),
            rows,
            totals: t,
            ratios: CostRatios { params: 1.0, macs: 1.0 },
        };
        let (p, m) = compression_ratio(&report);
        report.ratios = CostRatios { params: p, macs: m };
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(format!("cost report: {e}")))
    }

    /// Aligned plain-text table with SI-suffixed counts.
    pub fn to_text(&self) -> String {
        let header = ["layer", "d", "params", "macs", "comp params", "comp macs"];
        let mut lines: Vec<[String; 6]> = vec![header.map(String::from)];
        for r in &self.rows {
            lines.push([
                r.name.clone(),
                r.depth.to_string(),
                si(r.vanilla.params),
                si(r.vanilla.macs),
                si(r.compressed.params),
                si(r.compressed.macs),
            ]);
        }
        let t = &self.totals;
        lines.push([
            "total".into(),
            String::new(),
            si(t.vanilla_params),
            si(t.vanilla_macs),
            si(t.compressed_params),
            si(t.compressed_macs),
        ]);
        let mut widths = [0usize; 6];
        for l in &lines {
            for (w, cell) in widths.iter_mut().zip(l) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("{} ({})\n", self.arch, self.policy);
        for (i, l) in lines.iter().enumerate() {
            if i + 1 == lines.len() {
                let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
            let mut row = format!("{:<w$}", l[0], w = widths[0]);
            for (cell, w) in l[1..].iter().zip(&widths[1..]) {
                let _ = write!(row, "  {cell:>w$}");
            }
            out.push_str(row.trim_end());
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "ratio  params {:.4}  macs {:.4}  (undropped closed form: {} params, {} macs)",
            self.ratios.params,
            self.ratios.macs,
            si(t.literal_params),
            si(t.literal_macs)
        );
        out
    }

    /// One CSV row per layer.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "kind",
            "d",
            "vanilla_params",
            "vanilla_macs",
            "compressed_params",
            "compressed_macs",
            "literal_params",
            "literal_macs",
            "out_c",
            "out_h",
            "out_w",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let lit = r.literal.unwrap_or(r.compressed);
            let (c, h, ww) = r.compressed.out_shape;
            w.write_record([
                r.name.clone(),
                r.kind.clone(),
                r.depth.to_string(),
                r.vanilla.params.to_string(),
                r.vanilla.macs.to_string(),
                r.compressed.params.to_string(),
                r.compressed.macs.to_string(),
                lit.params.to_string(),
                lit.macs.to_string(),
                c.to_string(),
                h.to_string(),
                ww.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

/// Three significant digits with k/M/G suffixes.
pub fn si(value: u64) -> String {
    const UNITS: [(f64, &str); 4] = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k")];
    let v = value as f64;
    for (scale, suffix) in UNITS {
        if v >= scale {
            let x = v / scale;
            let digits = if x >= 100.0 {
                0
            } else if x >= 10.0 {
                1
            } else {
                2
            };
            return format!("{x:.digits$}{suffix}");
        }
    }
    value.to_string()
}

pub fn network_cost(arch: &ArchSpec, policy: DepthPolicy) -> Result<CostReport> {
    CostReport::for_arch(&compress(arch, policy)?, policy.to_string())
}

/// Cost with only the convolutions accepted by `select` compressed.
pub fn network_cost_where(
    arch: &ArchSpec,
    policy: DepthPolicy,
    label: &str,
    select: impl Fn(&str) -> bool,
) -> Result<CostReport> {
    CostReport::for_arch(&compress_where(arch, policy, select)?, format!("{policy} {label}"))
}

/// `(compressed/vanilla params, compressed/vanilla macs)`.
pub fn compression_ratio(report: &CostReport) -> (f64, f64) {
    let t = &report.totals;
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (
        ratio(t.compressed_params, t.vanilla_params),
        ratio(t.compressed_macs, t.vanilla_macs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::build_plan;
    use crate::zoo::vgg16_cifar;

    #[test]
    fn vanilla_conv_examples() {
        let c = conv_cost(&ConvSpec::same(3, 64, 3), 32, 32).unwrap();
        assert_eq!((c.macs, c.params), (1_769_472, 1_728));
        let c = conv_cost(&ConvSpec::same(512, 512, 3), 2, 2).unwrap();
        assert_eq!((c.macs, c.params), (9_437_184, 2_359_296));
        let dw = ConvSpec::depthwise(148, 3);
        assert_eq!(conv_cost(&dw, 4, 4).unwrap().params, 1_332);
    }

    #[test]
    fn compconv_examples() {
        let host = ConvSpec::same(512, 512, 3);
        let plan = build_plan(512, 512, DepthPolicy::Global { d: 3 }).unwrap();
        let c = compconv_cost(&plan, &host, 1, 1).unwrap();
        assert_eq!(c.macs, 418_194);
        let v = conv_cost(&host, 1, 1).unwrap();
        assert!((c.macs as f64 / v.macs as f64 - 0.1772).abs() < 1e-4);
        let lit = literal_compconv_cost(&plan, &host, 1, 1).unwrap();
        assert_eq!(lit.macs, 9 * (512 * 37 + 74 * 74 + 148 * 148 + 148));

        let host = ConvSpec::same(64, 64, 3);
        let plan = build_plan(64, 64, DepthPolicy::Global { d: 1 }).unwrap();
        assert_eq!(compconv_cost(&plan, &host, 1, 1).unwrap().macs, 18_720);
    }

    #[test]
    fn vgg_vanilla_totals() {
        let r = network_cost(&vgg16_cifar(10), DepthPolicy::Vanilla).unwrap();
        assert_eq!(r.totals.vanilla_params, 14_715_594);
        assert_eq!(r.totals.vanilla_macs, 313_201_664);
        assert_eq!(compression_ratio(&r), (1.0, 1.0));
        assert_eq!(r.rows.len(), 14);
    }

    #[test]
    fn totals_are_column_sums_and_serialize() {
        let r = network_cost(&vgg16_cifar(10), DepthPolicy::Adaptive { c0: 128 }).unwrap();
        let sum: u64 = r.rows.iter().map(|x| x.compressed.macs).sum();
        assert_eq!(sum, r.totals.compressed_macs);
        assert_eq!(CostReport::from_json(&r.to_json()).unwrap(), r);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
        assert!(r.to_text().contains("conv5_3"));
    }

    #[test]
    fn si_formatting() {
        assert_eq!(si(999), "999");
        assert_eq!(si(14_719_818), "14.7M");
        assert_eq!(si(313_478_154), "313M");
        assert_eq!(si(4_089_184_256), "4.09G");
        assert_eq!(si(1_728), "1.73k");
    }
}
