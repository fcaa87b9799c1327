//! `compconv plan`: resolve one layer.

use clap::{ArgGroup, Args};
use compconv::cost::{compconv_cost, conv_cost, si, LayerCost};
use compconv::planner::{plan_for, DepthPolicy, LayerChoice};
use compconv::ConvSpec;
use serde::{Deserialize, Serialize};

use crate::{csv_string, to_json, CliError, CliResult, Common, Format, Outcome, SCHEMA_VERSION};

/// Values accepted by `--c0`.
pub const C0_CHOICES: [usize; 5] = [32, 64, 128, 256, 512];

pub fn parse_c0(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("{s:?} is not an integer"))?;
    if C0_CHOICES.contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be one of {C0_CHOICES:?}"))
    }
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("policy").required(true).args(["c0", "depth"])))]
pub struct PlanArgs {
    /// Input channels.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub cin: u32,
    /// Output channels.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub cout: u32,
    /// Adaptive depth threshold.
    #[arg(long, value_parser = parse_c0)]
    pub c0: Option<usize>,
    /// Fixed recursion depth; 0 keeps the plain convolution.
    #[arg(long, value_parser = clap::value_parser!(u32).range(0..=4))]
    pub depth: Option<u32>,
    /// Kernel size (odd).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub k: u32,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub stride: u32,
    /// Square input resolution used for the cost columns.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub input_res: u32,
}

impl PlanArgs {
    pub fn policy(&self) -> DepthPolicy {
        match (self.c0, self.depth) {
            (Some(c0), _) => DepthPolicy::Adaptive { c0 },
            (None, Some(0)) | (None, None) => DepthPolicy::Vanilla,
            (None, Some(d)) => DepthPolicy::Global { d: d as usize },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub schema_version: u32,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub input_res: usize,
    pub policy: String,
    /// 0 for the plain convolution.
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_prim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_groups: Option<usize>,
    /// The resolved layout as a `key: value` record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
    pub vanilla: LayerCost,
    pub compressed: LayerCost,
    pub param_ratio: f64,
    pub mac_ratio: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

pub fn build_report(args: &PlanArgs) -> CliResult<PlanReport> {
    let (c_in, c_out, k) = (args.cin as usize, args.cout as usize, args.k as usize);
    let res = args.input_res as usize;
    let host = ConvSpec::same(c_in, c_out, k).with_stride(args.stride as usize);
    let policy = args.policy();
    let vanilla = conv_cost(&host, res, res)?;
    let choice = plan_for(c_in, c_out, policy)?;
    if matches!(choice, LayerChoice::Comp(_)) && k % 2 == 0 {
        return Err(CliError::usage(format!("--k {k}: compact layers need an odd kernel")));
    }
    let mut report = PlanReport {
        schema_version: SCHEMA_VERSION,
        c_in,
        c_out,
        k,
        stride: host.stride,
        input_res: res,
        policy: policy.to_string(),
        depth: 0,
        c_prim: None,
        drop: None,
        shuffle_groups: None,
        plan: None,
        vanilla,
        compressed: vanilla,
        param_ratio: 1.0,
        mac_ratio: 1.0,
    };
    if let LayerChoice::Comp(plan) = choice {
        let compressed = compconv_cost(&plan, &host, res, res)?;
        report.depth = plan.depth;
        report.c_prim = Some(plan.c_prim);
        report.drop = Some(plan.drop);
        report.shuffle_groups = Some(plan.shuffle_groups);
        report.plan = Some(plan.to_record());
        report.param_ratio = ratio(compressed.params, vanilla.params);
        report.mac_ratio = ratio(compressed.macs, vanilla.macs);
        report.compressed = compressed;
    }
    Ok(report)
}

impl PlanReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "layer     c_in={} c_out={} k={} stride={} input={}x{}\npolicy    {}\n",
            self.c_in, self.c_out, self.k, self.stride, self.input_res, self.input_res, self.policy
        );
        match &self.plan {
            None => s.push_str("layout    vanilla passthrough\n"),
            Some(record) => {
                for line in record.lines() {
                    if let Some((k, v)) = line.split_once(": ") {
                        s.push_str(&format!("{k:<15} {v}\n"));
                    }
                }
            }
        }
        s.push_str(&format!("\n{:<10} {:>10} {:>10}\n", "", "params", "MACs"));
        s.push_str(&format!(
            "{:<10} {:>10} {:>10}\n",
            "vanilla",
            si(self.vanilla.params),
            si(self.vanilla.macs)
        ));
        s.push_str(&format!(
            "{:<10} {:>10} {:>10}\n",
            "compact",
            si(self.compressed.params),
            si(self.compressed.macs)
        ));
        s.push_str(&format!(
            "{:<10} {:>10.3} {:>10.3}\n",
            "ratio", self.param_ratio, self.mac_ratio
        ));
        s
    }

    pub fn to_csv(&self) -> CliResult<String> {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        csv_string(
            &[
                "c_in",
                "c_out",
                "k",
                "stride",
                "input_res",
                "policy",
                "depth",
                "c_prim",
                "drop",
                "shuffle_groups",
                "vanilla_params",
                "vanilla_macs",
                "compressed_params",
                "compressed_macs",
                "param_ratio",
                "mac_ratio",
            ],
            [vec![
                self.c_in.to_string(),
                self.c_out.to_string(),
                self.k.to_string(),
                self.stride.to_string(),
                self.input_res.to_string(),
                self.policy.clone(),
                self.depth.to_string(),
                opt(self.c_prim),
                opt(self.drop),
                opt(self.shuffle_groups),
                self.vanilla.params.to_string(),
                self.vanilla.macs.to_string(),
                self.compressed.params.to_string(),
                self.compressed.macs.to_string(),
                format!("{:?}", self.param_ratio),
                format!("{:?}", self.mac_ratio),
            ]],
        )
    }
}

pub fn run(args: &PlanArgs, common: &Common) -> CliResult<Outcome> {
    let r = build_report(args)?;
    Ok(Outcome::ok(match common.format {
        Format::Text => r.to_text(),
        Format::Json => to_json(&r),
        Format::Csv => r.to_csv()?,
    }))
}
