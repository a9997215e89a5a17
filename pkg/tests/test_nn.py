import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedbackdoor import nn
from fedbackdoor.nn import ConfigurationError, Dense, ModelParams, Network, NumericError, Update


def central_diff(f, x, i, h=1e-4):
    xp, xm = x.copy(), x.copy()
    xp[i] += h
    xm[i] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(0)
    net = nn.mlp([6, 5, 4, 3], rng, activation=activation)
    x = rng.normal(size=(7, 6))
    y = rng.integers(0, 3, size=7)
    _, grad = nn.loss_and_grad(net, x, y)

    def loss(v):
        return nn.cross_entropy(nn.forward(net.with_params(ModelParams(v, net.params.layout)), x), y)

    for name, _ in net.params.layout:
        sl = net.params.slice_of(name)
        for i in rng.choice(np.arange(sl.start, sl.stop), size=min(10, sl.stop - sl.start), replace=False):
            assert rel_err(grad.delta[i], central_diff(loss, net.params.values, i)) < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = nn.mlp([4, 6, 2], rng, output="tanh")
    x = rng.normal(size=(3, 4))
    dout = rng.normal(size=(3, 2))
    out, cache = nn.forward_with_cache(net, x)
    _, dx = nn.backward(net, cache, out, dout, need_input_grad=True)
    flat = x.ravel()
    for i in range(flat.size):
        f = lambda v: float(np.sum(nn.forward(net, v.reshape(3, 4)) * dout))
        assert rel_err(dx.ravel()[i], central_diff(f, flat, i)) < 1e-4


def test_forward_matches_straight_line_reimplementation():
    rng = np.random.default_rng(2)
    net = nn.mlp([5, 7, 3], rng)
    x = rng.normal(size=(4, 5))
    p = net.params
    h = np.maximum(x @ p.view("fc1.weight") + p.view("fc1.bias"), 0)
    ref = h @ p.view("fc2.weight") + p.view("fc2.bias")
    np.testing.assert_allclose(nn.forward(net, x), ref, rtol=0, atol=1e-10)


def test_zero_network_gives_equal_logits_and_log_c_loss():
    net = nn.mlp([4, 3, 5], np.random.default_rng(0))
    net = net.with_params(ModelParams(np.zeros(net.params.size), net.params.layout))
    x = np.random.default_rng(1).normal(size=(6, 4))
    logits = nn.forward(net, x)
    assert np.all(logits == logits[:, :1])
    assert nn.cross_entropy(logits, np.arange(6) % 5) == pytest.approx(np.log(5), abs=1e-12)


def test_identity_layer():
    arch = (Dense("fc1", 3, 3),)
    values = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    net = Network(arch, ModelParams(values, nn.architecture_layout(arch)))
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(nn.forward(net, x), x)


def test_duplicated_batch_gives_same_loss_and_grad():
    rng = np.random.default_rng(3)
    net = nn.mlp([4, 5, 3], rng)
    x = rng.normal(size=(1, 4))
    l1, g1 = nn.loss_and_grad(net, x, np.array([2]))
    l5, g5 = nn.loss_and_grad(net, np.repeat(x, 5, axis=0), np.full(5, 2))
    assert l1 == pytest.approx(l5, rel=1e-12)
    np.testing.assert_allclose(g1.delta, g5.delta, rtol=1e-12, atol=1e-15)


@given(st.integers(1, 20), st.integers(2, 9), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, c, seed):
    logits = np.random.default_rng(seed).normal(scale=30, size=(n, c))
    np.testing.assert_allclose(nn.softmax(logits).sum(axis=1), 1.0, atol=1e-6)


def test_sgd_step_examples():
    layout = (("w", (2,)),)
    p = ModelParams(np.array([1.0, 2.0]), layout)
    g = Update(np.array([1.0, -1.0]), layout)
    np.testing.assert_array_equal(nn.sgd_step(p, g, 0.5).values, [0.5, 2.5])
    np.testing.assert_array_equal(nn.sgd_step(p, g, 0.0).values, p.values)
    with pytest.raises(ConfigurationError):
        nn.sgd_step(p, Update(np.zeros(2), (("v", (2,)),)), 0.1)


def test_sgd_converges_on_quadratic():
    # loss (w - 3)^2 has gradient 2 (w - 3)
    layout = (("w", (1,)),)
    p = ModelParams(np.array([-4.0]), layout)
    for _ in range(200):
        p = nn.sgd_step(p, Update(2 * (p.values - 3.0), layout), 0.1)
    assert abs(p.values[0] - 3.0) < 1e-6


def test_dimension_mismatch_is_configuration_error():
    net = nn.mlp([4, 3], np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        nn.forward(net, np.zeros((2, 5)))


def test_non_finite_forward_names_layer():
    net = nn.mlp([2, 3, 2], np.random.default_rng(0))
    v = net.params.values.copy()
    v[net.params.slice_of("fc2.weight")] = np.inf
    with pytest.raises(NumericError) as info:
        nn.loss_and_grad(net.with_params(ModelParams(v, net.params.layout)), np.ones((1, 2)), np.array([0]))
    assert info.value.layer == "fc2"


def test_layout_must_cover_vector():
    with pytest.raises(ConfigurationError):
        ModelParams(np.zeros(5), (("a", (2, 2)),))


@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31))
def test_fgnn_round_trip_is_bit_exact(sizes, seed):
    net = nn.mlp(sizes, np.random.default_rng(seed))
    blob = nn.dumps_params(net.params)
    back = nn.loads_params(blob)
    assert back.layout == net.params.layout
    assert back.values.tobytes() == net.params.values.tobytes()


def test_fgnn_header(tmp_path):
    p = ModelParams(np.arange(6, dtype=np.float64), (("fc1.weight", (2, 3)),))
    nn.save_params(p, tmp_path / "m.fgnn")
    blob = (tmp_path / "m.fgnn").read_bytes()
    assert blob[:4] == b"FGNN"
    assert int.from_bytes(blob[4:8], "little") == nn.FORMAT_VERSION
    back = nn.load_params(tmp_path / "m.fgnn")
    assert back.layout == p.layout
    np.testing.assert_array_equal(back.values, p.values)


def test_loads_rejects_bad_magic():
    with pytest.raises(ConfigurationError):
        nn.loads_params(b"XXXX" + b"\0" * 12)


def test_operations_are_pure():
    rng = np.random.default_rng(4)
    net = nn.mlp([3, 4, 2], rng)
    before = net.params.values.copy()
    nn.loss_and_grad(net, rng.normal(size=(5, 3)), np.array([0, 1, 0, 1, 1]))
    np.testing.assert_array_equal(net.params.values, before)


def test_mlp_output_activations():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 3))
    assert np.all(nn.forward(nn.mlp([3, 4, 2], rng, output="relu"), x) >= 0)
    assert np.all(np.abs(nn.forward(nn.mlp([3, 4, 2], rng, output="tanh"), x)) < 1)
    with pytest.raises(ConfigurationError):
        nn.mlp([3, 2], rng, output="sigmoid")
