"""Training-stage aggregation rules and post-training model defenses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .data import LabeledDataset
from .nn import ConfigurationError, Dense, Network, ReLU, Tanh, Update, _same_layout

AGGREGATORS = ("fedavg", "krum", "median", "norm_bound")
POST_DEFENSES = ("identity", "neuron_clip", "prune")


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    krum_f: int | None = None  # None: expected attackers per round, ceil(kappa * M)
    norm_threshold: float = 0.05

    def __post_init__(self):
        if self.kind not in AGGREGATORS:
            raise ConfigurationError(f"unknown aggregator {self.kind!r}")
        if self.norm_threshold <= 0:
            raise ConfigurationError("norm_threshold must be positive")


@dataclass(frozen=True)
class PostDefenseSpec:
    kind: str = "identity"
    clip_threshold: float = 1.0
    prune_count: int = 16
    probe_size: int = 200

    def __post_init__(self):
        if self.kind not in POST_DEFENSES:
            raise ConfigurationError(f"unknown post-training defense {self.kind!r}")


def _stack(updates: Sequence[Update]) -> np.ndarray:
    if not updates:
        raise ConfigurationError("no updates to aggregate")
    layout = updates[0].layout
    for u in updates[1:]:
        _same_layout(layout, u.layout)
    return np.stack([u.delta for u in updates])


def fedavg(updates: Sequence[Update]) -> Update:
    X = _stack(updates)
    return Update(X.mean(axis=0), updates[0].layout)


def median(updates: Sequence[Update]) -> Update:
    X = _stack(updates)
    return Update(kernels.coord_median(X), updates[0].layout)


def krum_select(updates: Sequence[Update], f: int) -> int:
    """Index of the Krum winner (lowest index on score ties)."""
    X = _stack(updates)
    n = X.shape[0]
    if n < 2 * f + 3:
        raise ConfigurationError(f"krum needs n >= 2f + 3, got n={n}, f={f}")
    scores = kernels.krum_scores(X, n - f - 2)
    return int(np.argmin(scores))


def krum(updates: Sequence[Update], f: int) -> Update:
    return updates[krum_select(updates, f)]


def norm_clip(updates: Sequence[Update], C: float) -> list[Update]:
    if C <= 0:
        raise ConfigurationError("norm bound must be positive")
    X = _stack(updates)
    clipped = kernels.clip_rows(X, C)
    return [Update(row, updates[0].layout) for row in clipped]


def norm_bound(updates: Sequence[Update], C: float) -> Update:
    """Clip every update to L2 norm ``C``, then average."""
    return fedavg(norm_clip(updates, C))


def aggregate(spec: AggregatorSpec, updates: Sequence[Update], krum_f: int = 0) -> Update:
    try:
        if spec.kind == "fedavg":
            return fedavg(updates)
        if spec.kind == "median":
            return median(updates)
        if spec.kind == "krum":
            f = spec.krum_f if spec.krum_f is not None else krum_f
            return krum(updates, f)
        return norm_bound(updates, spec.norm_threshold)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{spec.kind}: {exc}") from exc


# --- post-training defenses -------------------------------------------------

def neuron_clip(net: Network, threshold: float) -> Network:
    """Bound each output neuron's incoming weight norm by ``threshold``.

    The bias is scaled together with its weight column.
    """
    if threshold <= 0:
        raise ConfigurationError("clip threshold must be positive")
    last = net.dense_layers()[-1]
    params = net.params.copy()
    W = params.view(f"{last.name}.weight")
    b = params.view(f"{last.name}.bias")
    norms = np.sqrt((W * W).sum(axis=0))
    scale = np.ones_like(norms)
    over = norms > threshold
    scale[over] = threshold / norms[over]
    W *= scale
    b *= scale
    return net.with_params(params)


def hidden_activations(net: Network, x: np.ndarray, layer_name: str) -> np.ndarray:
    """Post-activation output of the dense layer ``layer_name``."""
    p = net.params
    h = np.asarray(x, dtype=np.float64)
    hit = False
    for layer in net.architecture:
        if isinstance(layer, Dense):
            if hit:
                break
            h = h @ p.view(f"{layer.name}.weight") + p.view(f"{layer.name}.bias")
            hit = layer.name == layer_name
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Tanh):
            h = np.tanh(h)
    return h


def prune(net: Network, n: int, probe: LabeledDataset) -> Network:
    """Zero the ``n`` last-hidden-layer neurons with lowest mean clean activation."""
    if len(probe) == 0:
        raise ConfigurationError("pruning needs a non-empty probe set")
    hidden = net.hidden_layers()
    if not hidden:
        raise ConfigurationError("network has no hidden layer to prune")
    target = hidden[-1]
    if n >= target.n_out:
        raise ConfigurationError(f"cannot prune {n} of {target.n_out} neurons")
    if n <= 0:
        return net
    acts = hidden_activations(net, probe.samples, target.name).mean(axis=0)
    order = np.argsort(acts, kind="stable")[:n]
    nxt = net.dense_layers()[len(hidden)]
    params = net.params.copy()
    params.view(f"{target.name}.weight")[:, order] = 0.0
    params.view(f"{target.name}.bias")[order] = 0.0
    params.view(f"{nxt.name}.weight")[order, :] = 0.0
    return net.with_params(params)


def apply_post_defense(spec: PostDefenseSpec, net: Network, probe: LabeledDataset | None = None) -> Network:
    if spec.kind == "identity":
        return net
    if spec.kind == "neuron_clip":
        return neuron_clip(net, spec.clip_threshold)
    if probe is None:
        raise ConfigurationError("pruning needs probe data")
    return prune(net, spec.prune_count, probe)
