use std::path::Path;
use std::process::Command;

use compconv::cost::CostReport;
use compconv::planner::CompPlan;
use compconv::zoo::vgg16_cifar;
use compconv_cli::plan::PlanReport;
use compconv_cli::train::TrainReport;
use compconv_cli::verify::VerifyReport;

fn run(args: &[&str]) -> (u8, String) {
    let mut out = Vec::new();
    let code = compconv_cli::run(std::iter::once("compconv").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = run(args);
    assert_eq!(code, 0, "{args:?}");
    out
}

fn json<T: serde::de::DeserializeOwned + serde::Serialize + PartialEq + std::fmt::Debug>(args: &[&str]) -> T {
    let mut all = args.to_vec();
    all.extend(["--format", "json"]);
    let text = ok(&all);
    let value: T = serde_json::from_str(&text).unwrap();
    // emit(parse(emit(report))) is stable
    let again: T = serde_json::from_str(&serde_json::to_string(&value).unwrap()).unwrap();
    assert_eq!(again, value);
    value
}

#[test]
fn plan_examples() {
    let r: PlanReport = json(&["plan", "--cin", "512", "--cout", "512", "--c0", "128", "--k", "3"]);
    assert_eq!((r.depth, r.c_prim), (3, Some(37)));
    assert!((r.mac_ratio - 0.177).abs() < 0.001, "{}", r.mac_ratio);
    let plan = CompPlan::from_record(r.plan.as_deref().unwrap()).unwrap();
    assert_eq!(plan.c_out, 512);

    let r: PlanReport = json(&["plan", "--cin", "256", "--cout", "256", "--c0", "128"]);
    assert_eq!((r.depth, r.c_prim), (2, Some(43)));

    let r: PlanReport = json(&["plan", "--cin", "64", "--cout", "64", "--depth", "0"]);
    assert_eq!((r.depth, r.mac_ratio, r.param_ratio), (0, 1.0, 1.0));
    assert!(r.plan.is_none());
    assert!(ok(&["plan", "--cin", "64", "--cout", "64", "--depth", "0"]).contains("vanilla passthrough"));
}

#[test]
fn plan_csv_has_one_row() {
    let out = ok(&[
        "plan", "--cin", "3", "--cout", "10", "--depth", "2", "--stride", "2", "--format", "csv",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("c_in,c_out,k,stride"));
    assert!(lines[1].starts_with("3,10,3,2,"));
}

#[test]
fn analyze_matches_library_and_arch_file() {
    let r: CostReport = json(&["analyze", "--arch", "vgg16-cifar", "--global-d", "1"]);
    assert_eq!(
        (r.totals.compressed_params, r.totals.compressed_macs),
        (7_379_370, 157_847_552)
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.json");
    std::fs::write(&path, vgg16_cifar(10).to_json()).unwrap();
    let from_file: CostReport = json(&["analyze", "--arch-file", path.to_str().unwrap(), "--global-d", "1"]);
    assert_eq!(from_file, r);

    let csv = ok(&["analyze", "--arch", "vgg16-cifar", "--c0", "128", "--format", "csv"]);
    assert!(csv.lines().count() > 14);
    let text = ok(&[
        "analyze",
        "--arch",
        "resnet50-imagenet",
        "--c0",
        "128",
        "--input-res",
        "224",
    ]);
    assert!(text.contains("layer4.2.conv3"));
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["plan", "--cin", "0", "--cout", "4", "--depth", "1"][..],
        &["plan", "--cin", "4", "--cout", "4"],
        &["plan", "--cin", "4", "--cout", "4", "--c0", "100"],
        &["plan", "--cin", "4", "--cout", "4", "--depth", "1", "--c0", "32"],
        &["plan", "--cin", "4", "--cout", "4", "--depth", "1", "--k", "2"],
        &["plan", "--cin", "4", "--cout", "4", "--depth", "1", "--unknown"],
        &["analyze", "--arch", "nope"],
        &["analyze"],
        &["verify", "--suite", "nope"],
        &["train", "--task", "idx"],
        &["train", "--format", "xml"],
        &["bogus"],
    ] {
        assert_eq!(run(args).0, 2, "{args:?}");
    }
}

#[test]
fn infeasible_and_io_errors() {
    assert_eq!(run(&["analyze", "--arch", "vgg16-cifar", "--input-res", "16"]).0, 3);
    assert_eq!(run(&["analyze", "--arch-file", "/nonexistent/arch.json"]).0, 4);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let m = missing.to_str().unwrap();
    assert_eq!(
        run(&["train", "--task", "idx", "--idx-images", m, "--idx-labels", m]).0,
        4
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(run(&["analyze", "--arch-file", bad.to_str().unwrap()]).0, 2);
}

#[test]
fn binary_reports_infeasible_layer_by_name() {
    let out = Command::new(env!("CARGO_BIN_EXE_compconv"))
        .args(["analyze", "--arch", "vgg16-cifar", "--input-res", "16"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pool5"));
    assert!(out.stdout.is_empty());
}

#[test]
fn verify_plans_suite() {
    let r: VerifyReport = json(&["verify", "--suite", "plans", "--seed", "3"]);
    assert!(r.ok);
    assert_eq!(r.suites.len(), 1);
    assert_eq!(r.seed, 3);
    assert!(ok(&["verify", "--suite", "plans"]).contains("all suites passed"));
}

fn train_args<'a>(out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--epochs", "3", "--seed", "2", "--out", out.to_str().unwrap()];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let ra: TrainReport = json(&train_args(&a, &[]));
    let rb: TrainReport = json(&train_args(&b, &[]));
    assert_eq!(ra.history, rb.history);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let net = compconv::network::Network::load(&a.with_extension("ckpt")).unwrap();
    assert_eq!(net.param_count(), ra.params);
    assert_eq!(ra.history.records.len(), 4);
}

#[test]
fn zero_learning_rate_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let r: TrainReport = json(&train_args(&out, &["--lr", "0", "--arch", "toy-vanilla"]));
    assert!(r.history.records.iter().all(|e| e.loss == r.history.records[0].loss));
}

#[test]
fn train_with_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h.csv");
    let r: TrainReport = json(&train_args(&out, &["--samples", "40", "--eval-fraction", "0.25"]));
    assert_eq!((r.train_samples, r.eval_samples), (30, 10));
    assert!(r.final_eval_acc.is_some());
}

fn idx_bytes(n: usize, side: usize) -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3];
    for v in [n, side, side] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let class = i % 3;
        for r in 0..side {
            for c in 0..side {
                images.push(if (r + c) % 3 == class { 255 } else { 0 });
            }
        }
        labels.push(class as u8);
    }
    (images, labels)
}

#[test]
fn train_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = idx_bytes(24, 8);
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    let out = dir.path().join("h.csv");
    let r: TrainReport = json(&train_args(
        &out,
        &[
            "--task",
            "idx",
            "--idx-images",
            ip.to_str().unwrap(),
            "--idx-labels",
            lp.to_str().unwrap(),
            "--limit",
            "18",
        ],
    ));
    assert_eq!(r.train_samples, 18);
    let csv = ok(&train_args(
        &out,
        &[
            "--task",
            "idx",
            "--idx-images",
            ip.to_str().unwrap(),
            "--idx-labels",
            lp.to_str().unwrap(),
            "--format",
            "csv",
        ],
    ));
    assert!(csv.starts_with("epoch,loss,train_acc,eval_acc"));
}

#[test]
fn help_exits_zero() {
    let (code, out) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("analyze"));
}
