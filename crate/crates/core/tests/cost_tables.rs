//! Exact totals frozen from an independent per-layer spreadsheet of the same layouts.

use compconv::cost::{compression_ratio, network_cost, network_cost_where, CostReport};
use compconv::planner::DepthPolicy;
use compconv::zoo::{compress, resnet50_imagenet, vgg16_cifar, ArchSpec};

fn totals(r: &CostReport) -> (u64, u64) {
    (r.totals.compressed_params, r.totals.compressed_macs)
}

#[test]
fn vgg_global_depths() {
    let vgg = vgg16_cifar(10);
    let expected = [
        (0, (14_715_594, 313_201_664)),
        (1, (7_379_370, 157_847_552)),
        (2, (4_330_251, 100_374_560)),
        (3, (2_801_259, 69_657_272)),
        (4, (2_235_681, 61_126_640)),
    ];
    for (d, want) in expected {
        let r = network_cost(&vgg, DepthPolicy::Global { d }).unwrap();
        assert_eq!(totals(&r), want, "d={d}");
        assert_eq!((r.totals.vanilla_params, r.totals.vanilla_macs), expected[0].1);
    }
}

#[test]
fn vgg_stage_restricted() {
    let vgg = vgg16_cifar(10);
    let stage = |s: u32| move |name: &str| name.starts_with(&format!("conv{s}_"));
    let cases = [
        (1, 1, (14_696_874, 294_032_384)),
        (1, 2, (14_692_707, 289_765_376)),
        (1, 3, (14_689_269, 286_244_864)),
        (5, 1, (11_183_562, 299_073_536)),
        (5, 2, (9_629_874, 292_858_784)),
        (5, 3, (8_892_288, 289_908_440)),
    ];
    for (s, d, want) in cases {
        let r = network_cost_where(&vgg, DepthPolicy::Global { d }, "stage", stage(s)).unwrap();
        assert_eq!(totals(&r), want, "stage {s} d={d}");
    }
}

#[test]
fn vgg_adaptive() {
    let r = network_cost(&vgg16_cifar(10), DepthPolicy::Adaptive { c0: 128 }).unwrap();
    assert_eq!(totals(&r), (3_175_020, 105_624_728));
}

#[test]
fn resnet50_rows() {
    let r50 = resnet50_imagenet();
    let v = network_cost(&r50, DepthPolicy::Vanilla).unwrap();
    assert_eq!(totals(&v), (25_503_912, 4_089_184_256));
    for (c0, want) in [
        (512, (12_193_140, 1_956_271_292)),
        (256, (10_429_978, 1_765_686_282)),
        (128, (8_563_888, 1_487_008_386)),
    ] {
        let r = network_cost(&r50, DepthPolicy::Adaptive { c0 }).unwrap();
        assert_eq!(totals(&r), want, "c0={c0}");
        let conv1 = r.rows.iter().find(|row| row.name == "conv1").unwrap();
        assert_eq!(conv1.depth, 0);
    }
}

#[test]
fn ratios_shrink_with_depth() {
    let vgg = vgg16_cifar(10);
    let ratios: Vec<(f64, f64)> = (1..=3)
        .map(|d| compression_ratio(&network_cost(&vgg, DepthPolicy::Global { d }).unwrap()))
        .collect();
    for w in ratios.windows(2) {
        assert!(w[1].0 <= w[0].0 && w[1].1 <= w[0].1, "{ratios:?}");
    }
}

#[test]
fn literal_closed_form_is_reported() {
    let r = network_cost(&vgg16_cifar(10), DepthPolicy::Global { d: 4 }).unwrap();
    assert_eq!(r.totals.literal_macs, 62_594_432);
    let zero = network_cost(&vgg16_cifar(10), DepthPolicy::Vanilla).unwrap();
    assert_eq!(zero.totals.literal_macs, zero.totals.vanilla_macs);
}

#[test]
fn costing_a_compressed_arch_directly_matches() {
    let vgg = vgg16_cifar(10);
    let policy = DepthPolicy::Global { d: 2 };
    let a = network_cost(&vgg, policy).unwrap();
    let b = CostReport::for_arch(&compress(&vgg, policy).unwrap(), policy.to_string()).unwrap();
    assert_eq!(a, b);
    let reloaded = ArchSpec::from_json(&compress(&vgg, policy).unwrap().to_json()).unwrap();
    assert_eq!(CostReport::for_arch(&reloaded, policy.to_string()).unwrap(), a);
}

#[test]
fn infeasible_layer_is_named() {
    let mut vgg = vgg16_cifar(10);
    vgg.input_shape.h = 16;
    vgg.input_shape.w = 16;
    let err = network_cost(&vgg, DepthPolicy::Vanilla).unwrap_err().to_string();
    assert!(err.contains("pool5"), "{err}");
}
