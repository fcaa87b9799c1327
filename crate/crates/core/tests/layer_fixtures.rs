use compconv::layer::{CompConvLayer, CompWeights, ConvModule, InitConfig};
use compconv::planner::{build_plan, DepthPolicy};
use compconv::{ConvSpec, MacCounter, Tensor};

fn t(shape: [usize; 4], v: &[f64]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

// c_in=1, c_out=6, d=2, k=1 on a single pixel x=2:
//   G1 = 3x = 6; G2 = [x, G1] = [2, 6]
//   top = [[1, 2], [-1, 0.5]] . G2 = [14, 1]; tail = [4*2, -2*6] = [8, -12]
//   concat [2, 6, 14, 1, 8, -12]; shuffle g=2 sends i to (i%2)*3 + i/2
#[test]
fn hand_computed_two_level_layer() {
    let plan = build_plan(1, 6, DepthPolicy::Global { d: 2 }).unwrap();
    assert_eq!((plan.c_prim, plan.shuffle_groups, plan.drop), (1, 2, 0));
    let weights = CompWeights {
        inner: t([1, 1, 1, 1], &[3.0]),
        squares: vec![t([2, 2, 1, 1], &[1.0, 2.0, -1.0, 0.5])],
        tail: t([2, 1, 1, 1], &[4.0, -2.0]),
    };
    let layer = CompConvLayer::with_weights(plan, ConvSpec::same(1, 6, 1), weights, 0).unwrap();
    let y = layer.forward(&t([1, 1, 1, 1], &[2.0]), None).unwrap();
    assert_eq!(y.data(), &[2.0, 14.0, 8.0, 6.0, 1.0, -12.0]);
}

// d=1, c_in=c_out=2, k=1: G1 = 2*x0 + 3*x1, tail = 5*G1, shuffle g=2 is the identity for 2 channels.
#[test]
fn hand_computed_single_level_layer() {
    let plan = build_plan(2, 2, DepthPolicy::Global { d: 1 }).unwrap();
    let weights = CompWeights {
        inner: t([1, 2, 1, 1], &[2.0, 3.0]),
        squares: vec![],
        tail: t([1, 1, 1, 1], &[5.0]),
    };
    let layer = CompConvLayer::with_weights(plan, ConvSpec::same(2, 2, 1), weights, 0).unwrap();
    let y = layer.forward(&t([1, 2, 1, 2], &[1.0, -1.0, 10.0, 0.5]), None).unwrap();
    assert_eq!(y.data(), &[32.0, -0.5, 160.0, -2.5]);
}

#[test]
fn constant_input_reaches_identity_channels_exactly() {
    let plan = build_plan(3, 20, DepthPolicy::Global { d: 3 }).unwrap();
    let layer = CompConvLayer::init(plan, ConvSpec::same(3, 20, 3), &InitConfig::constant(0.0)).unwrap();
    let y = layer.forward(&Tensor::full([1, 3, 5, 5], 0.75), None).unwrap();
    let per_channel: Vec<f64> = (0..20).map(|c| y.plane(0, c)[12]).collect();
    let copies = per_channel.iter().filter(|&&v| v == 0.75).count();
    // with zero weights only the identity copies in G2 (2 channels) and G3 (4 channels) are non-zero
    assert_eq!(copies, 2 + 4);
    assert!(per_channel.iter().all(|&v| v == 0.75 || v == 0.0));
}

#[test]
fn vanilla_module_counts_closed_form() {
    let spec = ConvSpec::same(5, 7, 3).with_stride(2);
    let m = ConvModule::build(spec, DepthPolicy::Vanilla, &InitConfig::he_normal(1)).unwrap();
    assert_eq!(m.depth(), 0);
    let mut c = MacCounter::new();
    let y = m.forward(&Tensor::full([1, 5, 9, 9], 1.0), Some(&mut c)).unwrap();
    assert_eq!(y.shape().dims(), [1, 7, 5, 5]);
    assert_eq!(c.macs(), 25 * 9 * 5 * 7);
    assert_eq!(m.param_count(), spec.params());
}

#[test]
fn blob_round_trip_is_bit_exact() {
    let plan = build_plan(6, 9, DepthPolicy::Global { d: 2 }).unwrap();
    let host = ConvSpec::same(6, 9, 3).with_stride(2).with_padding(0);
    let layer = CompConvLayer::init(plan, host, &InitConfig::he_normal(42)).unwrap();
    let bytes = layer.export_weights();
    let back = CompConvLayer::import_weights(&bytes).unwrap();
    assert_eq!(back.export_weights(), bytes);
    let x = compconv::autograd::random_tensor([1, 6, 7, 7], 1, 0);
    assert_eq!(back.forward(&x, None).unwrap(), layer.forward(&x, None).unwrap());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(CompConvLayer::import_weights(&bad).is_err());
}
