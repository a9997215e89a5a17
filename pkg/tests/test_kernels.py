"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fedbackdoor import _fallback, kernels

try:
    from fedbackdoor import _kernels as compiled
except ImportError:  # pragma: no cover - pure-python install
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")
finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


def matrices(max_n=10, max_d=20):
    return st.integers(1, max_n).flatmap(
        lambda n: st.integers(1, max_d).flatmap(lambda d: arrays(np.float64, (n, d), elements=finite)))


def segmented(max_segments=4, max_size=12):
    sizes = st.lists(st.integers(1, max_size), min_size=1, max_size=max_segments)
    return sizes.flatmap(lambda s: st.tuples(
        st.just(np.concatenate([[0], np.cumsum(s)]).astype(np.int64)),
        arrays(np.float64, sum(s), elements=st.integers(-4, 4).map(float)),
        arrays(np.float64, sum(s), elements=st.integers(-4, 4).map(float))))


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")


@needs_compiled
@given(matrices())
def test_pairwise_and_krum_scores_agree(X):
    np.testing.assert_allclose(kernels.pairwise_sq_dists(X, compiled), kernels.pairwise_sq_dists(X, _fallback),
                               rtol=1e-12, atol=1e-9)
    m = max(0, X.shape[0] - 3)
    np.testing.assert_allclose(kernels.krum_scores(X, m, compiled), kernels.krum_scores(X, m, _fallback),
                               rtol=1e-12, atol=1e-9)


@needs_compiled
@given(matrices())
def test_median_agrees_exactly(X):
    np.testing.assert_array_equal(kernels.coord_median(X, compiled), kernels.coord_median(X, _fallback))


@needs_compiled
@given(matrices(), st.floats(1e-3, 1e3))
def test_clip_rows_agree(X, C):
    np.testing.assert_allclose(kernels.clip_rows(X, C, compiled), kernels.clip_rows(X, C, _fallback),
                               rtol=1e-14, atol=0)


@needs_compiled
@given(segmented(), st.floats(0, 1), st.floats(-1, 2))
def test_topk_craft_agrees_exactly_with_ties(seg, alpha, beta):
    offsets, gt, g = seg
    np.testing.assert_array_equal(kernels.topk_craft(gt, g, offsets, alpha, beta, compiled),
                                  kernels.topk_craft(gt, g, offsets, alpha, beta, _fallback))


@needs_compiled
@given(segmented(), st.integers(0, 12))
def test_topk_mask_agrees_exactly_with_ties(seg, k):
    # k may exceed a segment's size; the whole segment is then selected
    offsets, values, _ = seg
    np.testing.assert_array_equal(kernels.topk_mask(values, offsets, k, compiled),
                                  kernels.topk_mask(values, offsets, k, _fallback))


@pytest.mark.parametrize("impl", [_fallback, compiled] if compiled else [_fallback])
def test_topk_tie_break_prefers_lower_index(impl):
    gt = np.array([1.0, 1.0, 1.0, 0.0])
    out = kernels.topk_craft(gt, np.zeros(4), np.array([0, 4]), 0.5, 1.0, impl)
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0, 0.0])
    mask = kernels.topk_mask(np.array([2.0, -2.0, 2.0]), np.array([0, 3]), 2, impl)
    np.testing.assert_array_equal(mask, [True, True, False])


@pytest.mark.parametrize("impl", [_fallback, compiled] if compiled else [_fallback])
def test_topk_mask_k_larger_than_segment(impl):
    mask = kernels.topk_mask(np.array([3.0, -1.0, 0.5, 2.0]), np.array([0, 1, 4]), 2, impl)
    np.testing.assert_array_equal(mask, [True, True, False, True])


def test_kernel_inputs_are_validated():
    with pytest.raises(ValueError):
        kernels.topk_mask(np.ones(4), np.array([0, 5]), 1)
    with pytest.raises(ValueError):
        kernels.topk_mask(np.ones(4), np.array([0, 3, 2, 4]), 1)
    with pytest.raises(ValueError):
        kernels.topk_craft(np.ones(4), np.ones(3), np.array([0, 3]), 0.5, 0.5)
    with pytest.raises(ValueError):
        kernels.krum_scores(np.ones((4, 2)), 4)
