import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evnet.errors import ClassificationError, ShapeError
from evnet.graph import LayerSpec
from evnet.layers import (
    delta_forward_linear,
    dense_forward,
    dense_nonlinear_ops,
    linear_fan_out,
    maxpool_event,
    pointwise_recompute,
)
from evnet.tensor import DeltaPacket, delta_from_diff, delta_merge

from oracles import (
    LINEAR_KIND_LIST,
    conv2d_loops,
    conv_layer,
    delta_macs_loops,
    f32,
    pool_loops,
    random_linear_triple,
)


def test_fc_identity_padded():
    w = f32([[1, 0, 0], [0, 1, 0]])
    layer = LayerSpec("fc", "fully_connected", ("x",), {}, {"weight": w})
    out, macs = dense_forward(layer, [f32([1, 2, 3])])
    np.testing.assert_array_equal(out, [1, 2])
    assert macs == 6


def test_one_by_one_conv_macs():
    layer = LayerSpec("c", "conv2d", ("x",), {}, {"weight": f32(np.full((1, 1, 1, 1), 2.0))})
    out, macs = dense_forward(layer, [np.ones((1, 4, 4), np.float32)])
    assert macs == 16
    np.testing.assert_array_equal(out, np.full((1, 4, 4), 2.0))


def test_conv_matches_nested_loops(rng):
    layer = conv_layer(rng, 2, 4, 3, stride=1, pad=1)
    x = f32(rng.standard_normal((2, 8, 8)))
    out, macs = dense_forward(layer, [x])
    ref, mults = conv2d_loops(x, layer.weights["weight"], layer.weights["bias"], 1, 1)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)
    assert macs == 8 * 8 * 4 * (3 * 3 * 2) == mults


@pytest.mark.parametrize("stride,pad,k", [(2, 0, 3), (2, 1, 3), (3, 2, 2), (1, 0, 1)])
def test_conv_strided_matches_loops(rng, stride, pad, k):
    layer = conv_layer(rng, 3, 2, k, stride, pad)
    x = f32(rng.standard_normal((3, 7, 6)))
    out, macs = dense_forward(layer, [x])
    ref, mults = conv2d_loops(x, layer.weights["weight"], layer.weights["bias"], stride, pad)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)
    assert macs == mults


def test_pools_match_loops(rng):
    x = f32(rng.standard_normal((2, 6, 7)))
    mp = LayerSpec("p", "max_pool", ("x",), {"window": 2, "stride": 2})
    ap = LayerSpec("a", "avg_pool", ("x",), {"window": 3, "stride": 1})
    out, macs = dense_forward(mp, [x])
    np.testing.assert_array_equal(out, pool_loops(x, 2, 2, max))
    assert macs == 0 and dense_nonlinear_ops(mp, out.shape) == out.size * 4
    out, macs = dense_forward(ap, [x])
    np.testing.assert_allclose(out, pool_loops(x, 3, 1, lambda v: sum(v) / len(v)), rtol=1e-5)
    assert macs == out.size * 9


def test_zero_mac_kinds(rng):
    x = f32(rng.standard_normal((2, 3, 3)))
    for layer, ins in [(LayerSpec("r", "relu", ("x",)), [x]), (LayerSpec("a", "add", ("x", "y")), [x, x]),
                       (LayerSpec("c", "concat", ("x", "y"), {"axis": 0}), [x, x])]:
        assert dense_forward(layer, ins)[1] == 0


def test_dense_shape_errors(rng):
    with pytest.raises(ShapeError):
        dense_forward(conv_layer(rng, 2, 2, 3), [np.zeros((3, 5, 5), np.float32)])
    fc = LayerSpec("fc", "fully_connected", ("x",), {}, {"weight": f32(np.ones((2, 3)))})
    with pytest.raises(ShapeError):
        dense_forward(fc, [np.zeros(4, np.float32)])


# -- delta kernels --------------------------------------------------------------

def test_empty_delta_is_free(rng):
    layer = conv_layer(rng, 1, 3, 3, pad=1)
    out, macs = delta_forward_linear(layer, DeltaPacket.empty("x"), (1, 5, 5))
    assert len(out) == 0 and macs == 0


def test_fc_single_entry_costs_m():
    layer = LayerSpec("fc", "fully_connected", ("x",), {}, {"weight": f32(np.arange(20).reshape(5, 4) + 1)})
    out, macs = delta_forward_linear(layer, DeltaPacket("x", [2], [1.0]), (4,))
    assert macs == 5
    np.testing.assert_array_equal(out.materialize((5,)), [3, 7, 11, 15, 19])


def test_conv_delta_matches_dense_difference(rng):
    layer = conv_layer(rng, 2, 3, 3, pad=1)
    x = f32(rng.standard_normal((2, 6, 6)))
    delta = f32(rng.standard_normal((2, 6, 6)) * (rng.random((2, 6, 6)) < 0.2))
    packet, macs = delta_forward_linear(layer, delta_from_diff(x, x + delta), (2, 6, 6))
    diff = dense_forward(layer, [x + delta])[0] - dense_forward(layer, [x])[0]
    np.testing.assert_allclose(packet.materialize(diff.shape), diff, atol=1e-5)
    assert macs == delta_macs_loops(layer, (2, 6, 6), delta)


def test_bias_not_applied_to_deltas(rng):
    layer = conv_layer(rng, 1, 2, 3, pad=1)
    packet, _ = delta_forward_linear(layer, DeltaPacket("x", [12], [1.0]), (1, 5, 5))
    w = layer.weights["weight"]
    # the centre pixel hits every output in its 3x3 neighbourhood with the flipped kernel
    np.testing.assert_allclose(packet.materialize((2, 5, 5))[:, 1:4, 1:4], w[:, 0, ::-1, ::-1], rtol=1e-6)


def test_nonlinear_rejected():
    with pytest.raises(ClassificationError):
        delta_forward_linear(LayerSpec("r", "relu", ("x",)), DeltaPacket.empty("x"), (3,))
    with pytest.raises(ClassificationError):
        linear_fan_out(LayerSpec("p", "max_pool", ("x",), {"window": 2}), (1, 4, 4), np.arange(2))


def test_delta_index_out_of_range(rng):
    with pytest.raises(ShapeError):
        delta_forward_linear(conv_layer(rng, 1, 1, 3), DeltaPacket("x", [30], [1.0]), (1, 5, 5))


@pytest.mark.parametrize("kind", LINEAR_KIND_LIST)
def test_fan_out_matches_brute_force(kind):
    rng = np.random.default_rng(7)
    for _ in range(20):
        layer, shapes, _, deltas = random_linear_triple(rng, kind)
        for shape, delta in zip(shapes, deltas):
            idx = np.flatnonzero(delta)
            assert int(linear_fan_out(layer, shape, idx).sum()) == delta_macs_loops(layer, shape, delta)


def _packets(shapes, deltas, name="x"):
    return [DeltaPacket.from_unsorted(name, np.flatnonzero(d), d.reshape(-1)[np.flatnonzero(d)],
                                      size=d.size) for d in deltas]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(LINEAR_KIND_LIST), st.integers(0, 2**32 - 1))
def test_oracle_equivalence(kind, seed):
    rng = np.random.default_rng(seed)
    layer, shapes, xs, deltas = random_linear_triple(rng, kind)
    packet, macs = delta_forward_linear(layer, _packets(shapes, deltas), shapes)
    before, _ = dense_forward(layer, xs)
    after, _ = dense_forward(layer, [x + d for x, d in zip(xs, deltas)])
    np.testing.assert_allclose(packet.materialize(before.shape), after - before, atol=1e-5, rtol=1e-5)
    assert macs == sum(delta_macs_loops(layer, s, d) for s, d in zip(shapes, deltas))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(LINEAR_KIND_LIST), st.integers(0, 2**32 - 1))
def test_linearity_over_packet_merge(kind, seed):
    rng = np.random.default_rng(seed)
    layer, shapes, _, d1 = random_linear_triple(rng, kind)
    d2 = [f32(rng.standard_normal(s) * (rng.random(s) < 0.3)) for s in shapes]
    p1, p2 = _packets(shapes, d1), _packets(shapes, d2)
    merged = [delta_merge(a, b) for a, b in zip(p1, p2)]
    out12, _ = delta_forward_linear(layer, merged, shapes)
    out1, _ = delta_forward_linear(layer, p1, shapes)
    out2, _ = delta_forward_linear(layer, p2, shapes)
    n = out12.size
    np.testing.assert_allclose(out12.materialize((n,)), out1.materialize((n,)) + out2.materialize((n,)),
                               atol=1e-5, rtol=1e-5)


# -- nonlinear event kernels -----------------------------------------------------

def test_pointwise_relu():
    vals, ops = pointwise_recompute("relu", f32([-2.0, 3.5]))
    np.testing.assert_array_equal(vals, [0.0, 3.5])
    assert ops == 2
    with pytest.raises(ClassificationError):
        pointwise_recompute("tanh", f32([0.0]))


def test_maxpool_event_examples():
    layer = LayerSpec("p", "max_pool", ("x",), {"window": 2, "stride": 2})
    buf = f32(np.arange(16).reshape(1, 4, 4))
    idx, vals, comps = maxpool_event(layer, buf, DeltaPacket.empty("x"))
    assert idx.size == 0 and comps == 0
    buf[0, 0, 0] = 50.0
    idx, vals, comps = maxpool_event(layer, buf, DeltaPacket("x", [0], [50.0]))
    assert idx.tolist() == [0] and vals.tolist() == [50.0] and comps == 4
    # lowering the current maximum must lower the pooled value
    buf[0, 0, 0] = -1.0
    idx, vals, _ = maxpool_event(layer, buf, np.array([0]))
    assert vals.tolist() == [5.0]
    with pytest.raises(ShapeError):
        maxpool_event(layer, buf, np.array([16]))


def test_maxpool_event_touch_between_windows():
    # window 1, stride 3: element 1 is read by no window
    layer = LayerSpec("p", "max_pool", ("x",), {"window": 1, "stride": 3})
    idx, vals, comps = maxpool_event(layer, f32(np.ones((1, 4, 4))), np.array([1]))
    assert idx.size == 0 and vals.size == 0 and comps == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3))
def test_maxpool_event_equals_dense(seed, k, stride):
    rng = np.random.default_rng(seed)
    layer = LayerSpec("p", "max_pool", ("x",), {"window": k, "stride": stride})
    x = f32(rng.standard_normal((2, 7, 6)))
    out, _ = dense_forward(layer, [x])
    touched = np.flatnonzero(rng.random(x.size) < 0.2)
    x.reshape(-1)[touched] = f32(rng.standard_normal(touched.size))
    idx, vals, comps = maxpool_event(layer, x, touched)
    out.reshape(-1)[idx] = vals
    np.testing.assert_array_equal(out, dense_forward(layer, [x])[0])
    assert comps == idx.size * k * k
