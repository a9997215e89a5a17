"""Pure-numpy versions of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable. Every function
here has the same signature and semantics as its compiled counterpart.
"""
import numpy as np


def pairwise_sq_dists(X):
    n = X.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        diff = X - X[i]
        D[i] = np.einsum("ij,ij->i", diff, diff)
    return D


def krum_scores(X, m):
    """Sum of squared distances from each row to its ``m`` nearest other rows."""
    D = pairwise_sq_dists(X)
    n = X.shape[0]
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(D[i], i)
        others.sort()
        scores[i] = others[:m].sum()
    return scores


def coord_median(X):
    return np.median(X, axis=0)


def clip_rows(X, C):
    """Scale each row by min(1, C / ||row||)."""
    out = np.array(X, dtype=np.float64, copy=True)
    norms = np.sqrt(np.einsum("ij,ij->i", out, out))
    for i, nrm in enumerate(norms):
        if nrm > C:
            out[i] *= C / nrm
    return out


def topk_craft(g_tilde, g, offsets, alpha, beta):
    """Per segment, pull the ceil(alpha*size) most divergent coordinates toward ``g``.

    ``offsets`` holds segment boundaries (len = n_segments + 1). Ties in
    divergence resolve toward the lower index.
    """
    out = np.array(g_tilde, dtype=np.float64, copy=True)
    for s in range(len(offsets) - 1):
        lo, hi = int(offsets[s]), int(offsets[s + 1])
        size = hi - lo
        k = min(size, int(np.ceil(alpha * size)))
        if k == 0:
            continue
        diff = np.abs(g_tilde[lo:hi] - g[lo:hi])
        idx = np.argsort(-diff, kind="stable")[:k] + lo
        out[idx] = g_tilde[idx] - beta * (g_tilde[idx] - g[idx])
    return out


def topk_mask(values, offsets, k):
    """Boolean mask marking the ``k`` largest |values| per segment (lowest index on ties)."""
    mask = np.zeros(values.shape[0], dtype=bool)
    for s in range(len(offsets) - 1):
        lo, hi = int(offsets[s]), int(offsets[s + 1])
        if k == 0:
            continue
        idx = np.argsort(-np.abs(values[lo:hi]), kind="stable")[:k] + lo
        mask[idx] = True
    return mask
