import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from templar.errors import FormatError, ShapeMismatch
from templar.featnet import (
    Conv,
    FullyConnected,
    MaxPool,
    NetSpec,
    Network,
    ReLU,
    conv2d,
    forward,
    load_weights,
    maxpool2d,
    parse_layer,
    reference_spec,
    save_weights,
    validate_spec,
)
from templar.geom_align import AlignedFace


def test_reference_trace():
    spec = reference_spec()
    trace = validate_spec(spec)
    assert trace[-1] == (320,)
    c = spec.counts()
    assert (c["conv"], c["pool"], c["fc"]) == (10, 5, 1)
    pooled = [s for layer, s in zip(spec.layers, trace) if isinstance(layer, MaxPool)]
    assert [s[0] for s in pooled] == [50, 25, 12, 6, 3]


def test_layer_parsing_roundtrip():
    spec = reference_spec()
    assert NetSpec.from_lines(spec.lines()) == spec
    assert parse_layer("conv 8 5") == Conv(8, 5, 1, 0)
    for bad in ("", "conv", "pool 2", "fc x", "softmax 3"):
        with pytest.raises(ValueError):
            parse_layer(bad)


def test_fc_only_on_vector():
    spec = NetSpec((FullyConnected(5),))
    assert validate_spec(spec, (10,)) == [(5,)]
    rng = np.random.default_rng(0)
    net = Network.random(spec, rng, (10,))
    x = rng.normal(size=10)
    w, b = net.params[0]
    np.testing.assert_allclose(net.forward(x), w @ x + b, atol=1e-12)


def test_conv_5x5_valid():
    spec = NetSpec((Conv(4, 3),))
    assert validate_spec(spec, (5, 5, 1)) == [(3, 3, 4)]


def test_shape_mismatch_names_layer():
    spec = NetSpec((Conv(4, 3), MaxPool(2, 2), Conv(2, 7)))
    with pytest.raises(ShapeMismatch) as err:
        validate_spec(spec, (10, 10, 1))
    assert err.value.layer == 2
    with pytest.raises(ShapeMismatch):
        validate_spec(NetSpec((FullyConnected(3), Conv(1, 1))), (4, 4, 1))


def test_zero_weights_give_zero_descriptor():
    spec = NetSpec.from_lines(["conv 4 3 1 1", "relu", "maxpool 2 2", "fc 6"])
    net = Network.zeros(spec, (8, 8, 3))
    out = net.forward(np.random.default_rng(1).random((8, 8, 3)))
    assert out.shape == (6,) and np.all(out == 0)


def test_identity_1x1_conv():
    w = np.eye(3).reshape(3, 1, 1, 3)
    x = np.random.default_rng(2).normal(size=(6, 7, 3))
    np.testing.assert_array_equal(conv2d(x, w, np.zeros(3)), x)


def _loop_conv(x, w, b, stride, pad):
    x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    O, k, _, C = w.shape
    oh = (x.shape[0] - k) // stride + 1
    ow = (x.shape[1] - k) // stride + 1
    out = np.zeros((oh, ow, O))
    for o in range(O):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for di in range(k):
                    for dj in range(k):
                        for c in range(C):
                            acc += x[i * stride + di, j * stride + dj, c] * w[o, di, dj, c]
                out[i, j, o] = acc
    return out


def _loop_pool(x, k, s):
    oh = (x.shape[0] - k) // s + 1
    ow = (x.shape[1] - k) // s + 1
    out = np.full((oh, ow, x.shape[2]), -np.inf)
    for i in range(oh):
        for j in range(ow):
            for di in range(k):
                for dj in range(k):
                    out[i, j] = np.maximum(out[i, j], x[i * s + di, j * s + dj])
    return out


def loop_forward(net, x):
    """Nested-loop reference forward pass."""
    params = iter(net.params)
    for layer in net.spec.layers:
        if isinstance(layer, Conv):
            w, b = next(params)
            x = _loop_conv(x, w, b, layer.stride, layer.pad)
        elif isinstance(layer, MaxPool):
            x = _loop_pool(x, layer.kernel, layer.stride)
        elif isinstance(layer, ReLU):
            x = np.where(x > 0, x, 0.0)
        else:
            w, b = next(params)
            flat = x.reshape(-1)
            x = np.array([sum(w[o, i] * flat[i] for i in range(flat.size)) + b[o] for o in range(w.shape[0])])
    return x


TOY_SPECS = [
    ["conv 3 3 1 1", "relu", "maxpool 2 2", "fc 4"],
    ["conv 2 3 1 0", "relu", "conv 3 2 2 0", "relu", "fc 5"],
    ["conv 4 1 1 0", "maxpool 2 2", "conv 2 3 1 1", "relu", "maxpool 2 2", "fc 3"],
]


@pytest.mark.parametrize("case", range(12))
def test_matches_loop_oracle(case):
    rng = np.random.default_rng(case)
    spec = NetSpec.from_lines(TOY_SPECS[case % len(TOY_SPECS)])
    net = Network.random(spec, rng, (8, 8, 1))
    x = rng.normal(size=(8, 8, 1))
    np.testing.assert_allclose(net.forward(x), loop_forward(net, x), atol=1e-6)


def test_positive_homogeneity_without_bias():
    rng = np.random.default_rng(3)
    spec = NetSpec.from_lines(TOY_SPECS[0])
    net = Network.random(spec, rng, (8, 8, 1), bias=False)
    x = rng.normal(size=(8, 8, 1))
    np.testing.assert_allclose(net.forward(2.5 * x), 2.5 * net.forward(x), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([(2, 2), (3, 1), (2, 1), (3, 3)]))
def test_maxpool_properties(seed, ks):
    k, s = ks
    x = np.random.default_rng(seed).normal(size=(9, 7, 2))
    y = maxpool2d(x, k, s)
    np.testing.assert_array_equal(y, _loop_pool(x, k, s))
    assert y.max() <= x.max()
    np.testing.assert_array_equal(maxpool2d(x + 1.0, k, s), y + 1.0)


def test_forward_on_aligned_face_keeps_source():
    spec = NetSpec.from_lines(["conv 2 5 5 0", "relu", "maxpool 4 4", "fc 8"])
    net = Network.random(spec, np.random.default_rng(4))
    face = AlignedFace(np.random.default_rng(5).random((100, 100, 3)), source_id="x.ppm")
    d = forward(net, face)
    assert d.values.shape == (8,) and d.source_id == "x.ppm"
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((99, 100, 3)))


def test_weights_roundtrip(tmp_path):
    spec = NetSpec.from_lines(TOY_SPECS[2])
    net = Network.random(spec, np.random.default_rng(6), (8, 8, 1))
    save_weights(net, tmp_path / "w.tmpl")
    back = load_weights(tmp_path / "w.tmpl", spec, (8, 8, 1))
    for (w0, b0), (w1, b1) in zip(net.params, back.params):
        assert w0.tobytes() == w1.tobytes() and b0.tobytes() == b1.tobytes()
    x = np.random.default_rng(7).normal(size=(8, 8, 1))
    assert net.forward(x).tobytes() == back.forward(x).tobytes()


def test_weights_mismatch_and_corruption(tmp_path):
    spec = NetSpec.from_lines(TOY_SPECS[0])
    save_weights(Network.random(spec, np.random.default_rng(8), (8, 8, 1)), tmp_path / "w.tmpl")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "w.tmpl", NetSpec.from_lines(TOY_SPECS[1]), (8, 8, 1))
    blob = (tmp_path / "w.tmpl").read_bytes()
    (tmp_path / "t.tmpl").write_bytes(blob[:-9])
    with pytest.raises(FormatError):
        load_weights(tmp_path / "t.tmpl", spec, (8, 8, 1))
    (tmp_path / "v.tmpl").write_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(FormatError):
        load_weights(tmp_path / "v.tmpl", spec, (8, 8, 1))
