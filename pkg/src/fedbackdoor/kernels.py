"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``FEDBACKDOOR_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("FEDBACKDOOR_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def _c2(X):
    return np.ascontiguousarray(X, dtype=np.float64)


def _offsets(offsets, n):
    off = np.ascontiguousarray(offsets, dtype=np.int64)
    if off.ndim != 1 or off.size < 1 or off[0] < 0 or off[-1] > n or np.any(np.diff(off) < 0):
        raise ValueError(f"segment offsets must be non-decreasing within [0, {n}]")
    return off


def pairwise_sq_dists(X, impl=None):
    return (impl or _impl).pairwise_sq_dists(_c2(X))


def krum_scores(X, m, impl=None):
    X = _c2(X)
    if not 0 <= m < max(X.shape[0], 1):
        raise ValueError(f"krum neighbour count {m} must lie in [0, {X.shape[0] - 1}]")
    return (impl or _impl).krum_scores(X, int(m))


def coord_median(X, impl=None):
    return (impl or _impl).coord_median(_c2(X))


def clip_rows(X, C, impl=None):
    return (impl or _impl).clip_rows(_c2(X), float(C))


def topk_craft(g_tilde, g, offsets, alpha, beta, impl=None):
    g_tilde, g = _c2(g_tilde), _c2(g)
    if g_tilde.shape != g.shape:
        raise ValueError("topk_craft needs equal-length vectors")
    return (impl or _impl).topk_craft(g_tilde, g, _offsets(offsets, g.shape[0]),
                                      float(alpha), float(beta))


def topk_mask(values, offsets, k, impl=None):
    if k < 0:
        raise ValueError("k must be non-negative")
    values = _c2(values)
    return (impl or _impl).topk_mask(values, _offsets(offsets, values.shape[0]), int(k))
