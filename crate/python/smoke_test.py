"""Smoke test for the pycompconv extension module.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py` (or under pytest).
"""

import random

import pycompconv as cc


def test_planner():
    assert cc.choose_depth(512, 128) == 3
    assert cc.compute_cprim(512, 3) == 37
    plan = cc.Plan(512, 512, c0=128)
    assert (plan.depth, plan.c_prim, plan.drop, plan.shuffle_groups) == (3, 37, 6, 4)
    assert plan.violations() == []
    assert sum(ch for _, ch, _ in plan.segments) == 512
    assert cc.Plan.from_record(plan.to_record()) == plan

    _, macs = plan.cost(k=3, h=32, w=32)
    _, vanilla = cc.conv_cost_of(512, 512, k=3, h=32, w=32)
    assert abs(macs / vanilla - 0.177) < 1e-3


def test_layer():
    rng = random.Random(0)
    layer = cc.Layer(6, 20, k=3, stride=2, depth=3, seed=5)
    shape = (2, 6, 9, 9)
    x = [rng.uniform(-1, 1) for _ in range(2 * 6 * 9 * 9)]
    y, out_shape, macs = layer.forward(x, shape)
    ref, ref_shape = layer.reference_forward(x, shape)
    assert out_shape == ref_shape == (2, 20, 5, 5)
    assert max(abs(a - b) for a, b in zip(y, ref)) < 1e-10
    assert macs == 2 * layer.plan.cost(k=3, stride=2, h=9, w=9)[1]

    back = cc.Layer.from_bytes(layer.to_bytes())
    assert back.forward(x, shape)[0] == y

    plain = cc.Layer(6, 20, depth=0)
    assert plain.depth == 0 and plain.plan is None
    assert plain.param_count == 6 * 20 * 9


def test_reports():
    assert "vgg16-cifar" in cc.builtin_archs()
    report = cc.analyze("vgg16-cifar", depth=1)
    assert report["totals"]["compressed_params"] == 7_379_370
    assert report["totals"]["compressed_macs"] == 157_847_552
    assert all(s["passed"] == s["checks"] for s in cc.verify("plans"))


def test_training():
    records = cc.train_stripes("toy-comp", epochs=20, seed=1)
    assert len(records) == 21
    assert records[-1]["train_acc"] >= 0.95


def test_errors():
    for bad in (lambda: cc.Plan(4, 4), lambda: cc.analyze("nope"), lambda: cc.Layer(4, 4, depth=1, c0=32)):
        try:
            bad()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
