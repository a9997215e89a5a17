import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedbackdoor import nn
from fedbackdoor.data import LabeledDataset
from fedbackdoor.defenses import (AggregatorSpec, hidden_activations, PostDefenseSpec, aggregate, apply_post_defense, fedavg, krum,
                                  krum_select, median, neuron_clip, norm_bound, norm_clip, prune)
from fedbackdoor.nn import ConfigurationError, ModelParams, Update


def ups(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    layout = (("w", (rows.shape[1],)),)
    return [Update(r.copy(), layout) for r in rows]


def brute_krum(X, f):
    n = len(X)
    scores = []
    for i in range(n):
        d = sorted(float(np.sum((X[i] - X[j]) ** 2)) for j in range(n) if j != i)
        scores.append(sum(d[: n - f - 2]))
    return int(np.argmin(scores))


def test_fedavg_examples():
    np.testing.assert_array_equal(fedavg(ups([[1, 3], [3, 1]])).delta, [2, 2])
    np.testing.assert_array_equal(fedavg(ups([[1, 3]])).delta, [1, 3])
    np.testing.assert_allclose(fedavg(ups([[0.1, 7]] * 5)).delta, [0.1, 7], rtol=1e-15)
    with pytest.raises(ConfigurationError):
        fedavg([])


def test_median_examples():
    np.testing.assert_array_equal(median(ups([[1, 5], [2, 4], [3, 3]])).delta, [2, 4])
    np.testing.assert_array_equal(median(ups([[1, 5], [2, 4], [3, 3], [4, 0]])).delta, [2.5, 3.5])
    np.testing.assert_array_equal(median(ups([[1, 2]] * 4)).delta, [1, 2])
    corrupted = median(ups([[1, 1], [2, 2], [3, 1e6]]))
    np.testing.assert_array_equal(corrupted.delta, [2, 2])


@given(st.integers(1, 10), st.integers(1, 20), st.integers(0, 2**31))
def test_median_matches_sort_oracle(n, d, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    S = np.sort(X, axis=0)
    ref = S[n // 2] if n % 2 else (S[n // 2 - 1] + S[n // 2]) / 2
    np.testing.assert_array_equal(median(ups(X)).delta, ref)


def test_krum_examples():
    assert krum_select(ups([[0], [1], [2], [10]]), 0) == 1
    assert krum_select(ups([[3, 3]] * 5), 1) == 0
    with pytest.raises(ConfigurationError, match="n=4, f=1"):
        krum(ups([[0], [1], [2], [3]]), 1)


@given(st.integers(0, 2**31))
def test_krum_matches_brute_force_and_is_a_selection(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    f = int(rng.integers(0, (n - 3) // 2 + 1))
    X = rng.normal(size=(n, int(rng.integers(1, 21))))
    u = ups(X)
    i = krum_select(u, f)
    assert i == brute_krum(X, f)
    assert krum(u, f) is u[i]


@given(st.integers(0, 2**31))
def test_krum_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(7, 3))
    c = rng.normal(size=3) * 5
    # shifting is exact in the integers, so compare on an integer grid
    X, c = np.round(X * 8), np.round(c * 8)
    assert krum_select(ups(X), 1) == krum_select(ups(X + c), 1)


def test_norm_bound_examples():
    np.testing.assert_array_equal(norm_clip(ups([[0.01, 0.0]]), 0.02)[0].delta, [0.01, 0.0])
    np.testing.assert_allclose(norm_bound(ups([[0.03, 0.04]]), 0.02).delta, [0.012, 0.016], rtol=1e-14)
    with pytest.raises(ConfigurationError):
        norm_bound(ups([[1.0]]), 0.0)


@given(st.integers(0, 2**31), st.floats(1e-3, 10))
def test_norm_bound_output_within_bound(seed, C):
    X = np.random.default_rng(seed).normal(scale=5, size=(6, 9))
    for u in norm_clip(ups(X), C):
        assert u.norm() <= C + 1e-12
    assert norm_bound(ups(X), C).norm() <= C + 1e-12


@given(st.integers(0, 2**31))
def test_aggregators_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    for spec in (AggregatorSpec("fedavg"), AggregatorSpec("median"), AggregatorSpec("norm_bound", norm_threshold=0.5)):
        np.testing.assert_allclose(aggregate(spec, ups(X)).delta, aggregate(spec, ups(X[perm])).delta,
                                   rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(aggregate(AggregatorSpec("krum"), ups(X), 1).delta,
                                  aggregate(AggregatorSpec("krum"), ups(X[perm]), 1).delta)


def test_aggregate_error_names_rule():
    with pytest.raises(ConfigurationError, match="^krum: krum needs"):
        aggregate(AggregatorSpec("krum", krum_f=3), ups(np.zeros((5, 2))))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        AggregatorSpec("trimmed_mean")
    with pytest.raises(ConfigurationError):
        PostDefenseSpec("flame")


def test_robustness_to_large_outlier():
    rng = np.random.default_rng(0)
    benign = rng.normal(size=(9, 50))
    benign /= np.linalg.norm(benign, axis=1, keepdims=True)
    bad = rng.normal(size=50)
    bad *= 1e6 / np.linalg.norm(bad)
    u = ups(np.vstack([benign, bad]))
    assert krum(u, 1).norm() <= 2
    assert median(u).norm() <= 2
    assert fedavg(u).norm() >= 1e4


# --- post-training defenses --------------------------------------------------

@pytest.fixture
def net():
    return nn.mlp([5, 6, 4, 3], np.random.default_rng(0))


def test_neuron_clip_examples(net):
    assert np.array_equal(neuron_clip(net, 1e6).params.values, net.params.values)
    p = net.params.copy()
    W = p.view("fc3.weight")
    W[:] = 0.0
    W[:, 1] = 0.0
    W[0, 1] = 2.0  # column norm 2 = 2 * threshold
    p.view("fc3.bias")[1] = 0.4
    clipped = neuron_clip(net.with_params(p), 1.0).params
    assert clipped.view("fc3.weight")[0, 1] == 1.0
    assert clipped.view("fc3.bias")[1] == pytest.approx(0.2)


@given(st.floats(0.01, 3))
def test_neuron_clip_idempotent_and_bounded(thr):
    net = nn.mlp([5, 6, 4, 3], np.random.default_rng(1))
    once = neuron_clip(net, thr)
    twice = neuron_clip(once, thr)
    np.testing.assert_allclose(twice.params.values, once.params.values, rtol=1e-14, atol=1e-16)
    norms = np.linalg.norm(once.params.view("fc3.weight"), axis=0)
    assert np.all(norms <= thr * (1 + 1e-12))


def test_prune_examples(net):
    probe = LabeledDataset(np.random.default_rng(2).uniform(size=(30, 5)), np.zeros(30, dtype=np.int64), 3)
    assert prune(net, 0, probe) is net
    p = net.params.copy()
    p.view("fc2.weight")[:, 2] = 0.0
    p.view("fc2.bias")[2] = 0.0
    n_silent = int(np.sum(hidden_activations(net.with_params(p), probe.samples, "fc2").mean(axis=0) == 0))
    pruned = prune(net.with_params(p), n_silent, probe)
    assert np.all(pruned.params.view("fc3.weight")[2] == 0.0)
    with pytest.raises(ConfigurationError):
        prune(net, 4, probe)
    with pytest.raises(ConfigurationError):
        prune(net, 1, LabeledDataset(np.zeros((0, 5)), np.zeros(0, dtype=np.int64), 3))


def test_prune_all_but_one_matches_masked_forward(net):
    rng = np.random.default_rng(3)
    probe = LabeledDataset(rng.uniform(size=(40, 5)), np.zeros(40, dtype=np.int64), 3)
    pruned = prune(net, 3, probe)
    x = rng.uniform(size=(8, 5))
    p = net.params
    h1 = np.maximum(x @ p.view("fc1.weight") + p.view("fc1.bias"), 0)
    h2 = np.maximum(h1 @ p.view("fc2.weight") + p.view("fc2.bias"), 0)
    act = np.maximum(probe.samples @ p.view("fc1.weight") + p.view("fc1.bias"), 0)
    act = np.maximum(act @ p.view("fc2.weight") + p.view("fc2.bias"), 0).mean(axis=0)
    keep = np.argmax(act)
    mask = np.zeros(4)
    mask[keep] = 1.0
    ref = (h2 * mask) @ p.view("fc3.weight") + p.view("fc3.bias")
    np.testing.assert_allclose(nn.forward(pruned, x), ref, rtol=1e-12, atol=1e-14)


def test_post_defense_dispatch(net):
    assert apply_post_defense(PostDefenseSpec(), net) is net
    with pytest.raises(ConfigurationError):
        apply_post_defense(PostDefenseSpec("prune", prune_count=1), net, None)


def test_defenses_do_not_mutate_inputs(net):
    before = net.params.values.copy()
    neuron_clip(net, 0.01)
    probe = LabeledDataset(np.ones((3, 5)), np.zeros(3, dtype=np.int64), 3)
    prune(net, 2, probe)
    np.testing.assert_array_equal(net.params.values, before)
    X = np.ones((5, 3)) * 4
    u = ups(X)
    norm_bound(u, 0.1)
    np.testing.assert_array_equal(u[0].delta, X[0])
