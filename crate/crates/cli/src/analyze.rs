//! `compconv analyze`: whole-network cost tables.

use std::path::PathBuf;

use clap::{ArgGroup, Args};
use compconv::cost::{network_cost, CostReport};
use compconv::planner::DepthPolicy;
use compconv::zoo::{builtin, ArchSpec, BUILTIN_NAMES};

use crate::plan::parse_c0;
use crate::{to_json, CliError, CliResult, Common, Format, Outcome};

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["arch", "arch_file"])))]
#[command(group(ArgGroup::new("policy").args(["c0", "global_d"])))]
pub struct AnalyzeArgs {
    /// Built-in architecture name.
    #[arg(long)]
    pub arch: Option<String>,
    /// JSON architecture description.
    #[arg(long)]
    pub arch_file: Option<PathBuf>,
    /// Adaptive depth threshold.
    #[arg(long, value_parser = parse_c0)]
    pub c0: Option<usize>,
    /// One depth for every compressible layer.
    #[arg(long, value_parser = clap::value_parser!(u32).range(0..=4))]
    pub global_d: Option<u32>,
    /// Override the square input resolution.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub input_res: Option<u32>,
}

impl AnalyzeArgs {
    pub fn policy(&self) -> DepthPolicy {
        match (self.c0, self.global_d) {
            (Some(c0), _) => DepthPolicy::Adaptive { c0 },
            (None, Some(d)) if d > 0 => DepthPolicy::Global { d: d as usize },
            _ => DepthPolicy::Vanilla,
        }
    }
}

pub fn load_arch(args: &AnalyzeArgs) -> CliResult<ArchSpec> {
    let mut arch = match (&args.arch, &args.arch_file) {
        (Some(name), _) => builtin(name).ok_or_else(|| {
            CliError::usage(format!(
                "--arch: unknown architecture {name:?}; built-ins are {}",
                BUILTIN_NAMES.join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::io(format!("--arch-file {}: {e}", path.display())))?;
            ArchSpec::from_json(&text).map_err(|e| CliError {
                message: format!("--arch-file {}: {e}", path.display()),
                ..e.into()
            })?
        }
        (None, None) => return Err(CliError::usage("one of --arch or --arch-file is required")),
    };
    if let Some(r) = args.input_res {
        arch.input_shape.h = r as usize;
        arch.input_shape.w = r as usize;
    }
    Ok(arch)
}

pub fn build_report(args: &AnalyzeArgs) -> CliResult<CostReport> {
    Ok(network_cost(&load_arch(args)?, args.policy())?)
}

pub fn run(args: &AnalyzeArgs, common: &Common) -> CliResult<Outcome> {
    let r = build_report(args)?;
    Ok(Outcome::ok(match common.format {
        Format::Text => r.to_text(),
        Format::Json => to_json(&r),
        Format::Csv => r.to_csv()?,
    }))
}
