//! `compconv verify`: run the oracle suites.

use clap::Args;
use compconv::verify::{run_suites, Suite, SuiteReport};
use serde::{Deserialize, Serialize};

use crate::{csv_string, exit, to_json, CliError, CliResult, Common, Format, Outcome, SCHEMA_VERSION};

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// plans, forward, grads, costs or all.
    #[arg(long, default_value = "all", value_parser = ["plans", "forward", "grads", "costs", "all"])]
    pub suite: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub ok: bool,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            s.push_str(&format!(
                "{:<8} {:>6}/{:<6} passed  {:>7.2}s  {}",
                r.suite.name(),
                r.passed,
                r.checks,
                r.seconds,
                if r.ok() { "ok" } else { "FAILED" }
            ));
            if let Some(e) = r.max_rel_error {
                s.push_str(&format!("  max rel error {e:.2e}"));
            }
            s.push('\n');
            for f in &r.failures {
                s.push_str(&format!("    {f}\n"));
            }
        }
        s.push_str(if self.ok {
            "all suites passed\n"
        } else {
            "verification failed\n"
        });
        s
    }

    pub fn to_csv(&self) -> CliResult<String> {
        csv_string(
            &["suite", "checks", "passed", "max_rel_error", "seconds"],
            self.suites.iter().map(|r| {
                vec![
                    r.suite.name().to_string(),
                    r.checks.to_string(),
                    r.passed.to_string(),
                    r.max_rel_error.map(|e| format!("{e:?}")).unwrap_or_default(),
                    format!("{:.3}", r.seconds),
                ]
            }),
        )
    }
}

pub fn build_report(args: &VerifyArgs, seed: u64) -> CliResult<VerifyReport> {
    let suites =
        Suite::parse(&args.suite).ok_or_else(|| CliError::usage(format!("--suite: unknown suite {:?}", args.suite)))?;
    let suites = run_suites(&suites, seed)?;
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        ok: suites.iter().all(SuiteReport::ok),
        suites,
    })
}

pub fn run(args: &VerifyArgs, common: &Common) -> CliResult<Outcome> {
    let r = build_report(args, common.seed)?;
    let body = match common.format {
        Format::Text => r.to_text(),
        Format::Json => to_json(&r),
        Format::Csv => r.to_csv()?,
    };
    Ok(Outcome {
        body,
        code: if r.ok { exit::OK } else { exit::VERIFY_FAILED },
    })
}
