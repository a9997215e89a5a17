"""Small dense neural-network engine with exact gradients.

Parameters live in one flat float64 vector (:class:`ModelParams`) partitioned
by a layout of named shapes, so models and updates can be added, subtracted,
aggregated and serialized without touching layer objects.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

Layout = tuple[tuple[str, tuple[int, ...]], ...]

MAGIC = b"FGNN"
FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    """Inconsistent shapes, layouts or hyperparameters."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""

    def __init__(self, layer: str, message: str = "non-finite value"):
        super().__init__(f"{message} in layer {layer!r}")
        self.layer = layer


@lru_cache(maxsize=256)
def _layout_index(layout: Layout) -> tuple[int, dict]:
    """Total size and ``name -> (slice, shape)`` for a layout."""
    index = {}
    start = 0
    for name, shape in layout:
        n = math.prod(shape)
        index[name] = (slice(start, start + n), tuple(shape))
        start += n
    return start, index


def _check_layout(layout: Layout, n: int) -> None:
    total = _layout_index(layout)[0]
    if total != n:
        raise ConfigurationError(f"layout covers {total} values but vector has {n}")


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        _check_layout(self.layout, self.values.shape[0])

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def offsets(self) -> np.ndarray:
        return layout_offsets(self.layout)

    def slice_of(self, name: str) -> slice:
        return _layout_index(self.layout)[1][name][0]

    def view(self, name: str) -> np.ndarray:
        sl, shape = _layout_index(self.layout)[1][name]
        return self.values[sl].reshape(shape)

    def copy(self) -> ModelParams:
        return ModelParams(self.values.copy(), self.layout)

    def apply(self, update: Update, scale: float = 1.0) -> ModelParams:
        """Return ``self - scale * update`` (the server-side step)."""
        _same_layout(self.layout, update.layout)
        return ModelParams(self.values - scale * update.delta, self.layout)

    def __sub__(self, other: ModelParams) -> Update:
        _same_layout(self.layout, other.layout)
        return Update(self.values - other.values, self.layout)


@dataclass(frozen=True)
class Update:
    delta: np.ndarray
    layout: Layout

    def __post_init__(self):
        _check_layout(self.layout, self.delta.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))

    @classmethod
    def zeros(cls, layout: Layout) -> Update:
        return cls(np.zeros(_layout_index(layout)[0]), layout)


def layout_offsets(layout: Layout) -> np.ndarray:
    sizes = [int(np.prod(shape)) for _, shape in layout]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def _same_layout(a: Layout, b: Layout) -> None:
    if a != b:
        raise ConfigurationError("layout mismatch between parameter vectors")


# --- layers -----------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int

    def param_layout(self) -> Layout:
        return ((f"{self.name}.weight", (self.n_in, self.n_out)),
                (f"{self.name}.bias", (self.n_out,)))


@dataclass(frozen=True)
class ReLU:
    name: str = "relu"


@dataclass(frozen=True)
class Tanh:
    name: str = "tanh"


Layer = Dense | ReLU | Tanh


@dataclass(frozen=True)
class Network:
    """An architecture plus its parameters. Treated as an immutable value."""

    architecture: tuple[Layer, ...]
    params: ModelParams

    @property
    def n_in(self) -> int:
        return self.dense_layers()[0].n_in

    @property
    def n_out(self) -> int:
        return self.dense_layers()[-1].n_out

    def dense_layers(self) -> list[Dense]:
        return [layer for layer in self.architecture if isinstance(layer, Dense)]

    def hidden_layers(self) -> list[Dense]:
        """Dense layers whose outputs are hidden activations (all but the last)."""
        return self.dense_layers()[:-1]

    def with_params(self, params: ModelParams) -> Network:
        _same_layout(self.params.layout, params.layout)
        return Network(self.architecture, params)


def architecture_layout(architecture: Sequence[Layer]) -> Layout:
    layout: list = []
    for layer in architecture:
        if isinstance(layer, Dense):
            layout.extend(layer.param_layout())
    return tuple(layout)


def init_params(architecture: Sequence[Layer], rng: np.random.Generator) -> ModelParams:
    """Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) for weights and biases."""
    chunks = []
    for layer in architecture:
        if isinstance(layer, Dense):
            bound = np.sqrt(1.0 / layer.n_in)
            chunks.append(rng.uniform(-bound, bound, size=layer.n_in * layer.n_out))
            chunks.append(rng.uniform(-bound, bound, size=layer.n_out))
    return ModelParams(np.concatenate(chunks), architecture_layout(architecture))


def mlp(sizes: Sequence[int], rng: np.random.Generator, *, activation: str = "relu",
        output: str | None = None, prefix: str = "fc") -> Network:
    """Build a dense network ``sizes[0] -> ... -> sizes[-1]``.

    ``output`` optionally appends ``"tanh"`` or ``"relu"`` after the last dense layer.
    """
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least input and output sizes")
    act = {"relu": ReLU, "tanh": Tanh}[activation]
    arch: list[Layer] = []
    for i in range(len(sizes) - 1):
        arch.append(Dense(f"{prefix}{i + 1}", sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            arch.append(act(f"{activation}{i + 1}"))
    if output == "tanh":
        arch.append(Tanh("out_tanh"))
    elif output == "relu":
        arch.append(ReLU("out_relu"))
    elif output is not None:
        raise ConfigurationError(f"unknown output activation {output!r}")
    arch_t = tuple(arch)
    return Network(arch_t, init_params(arch_t, rng))


# --- forward / backward -----------------------------------------------------

def _forward_cached(net: Network, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ConfigurationError(
            f"input has shape {x.shape}, first layer expects {net.n_in} features")
    cache = []
    h = x
    p = net.params
    for layer in net.architecture:
        cache.append(h)
        if isinstance(layer, Dense):
            h = h @ p.view(f"{layer.name}.weight") + p.view(f"{layer.name}.bias")
            if not np.isfinite(h).all():
                raise NumericError(layer.name)
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        else:
            h = np.tanh(h)
    return h, cache


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Network output for each row of ``batch`` (logits for classifiers)."""
    return _forward_cached(net, batch)[0]


def forward_with_cache(net: Network, batch: np.ndarray):
    return _forward_cached(net, batch)


def backward(net: Network, cache, out, dout: np.ndarray,
             need_input_grad: bool = False):
    """Backpropagate ``dout`` (d loss / d output) through a cached forward pass.

    Returns the flat parameter gradient and, if requested, d loss / d input.
    """
    p = net.params
    grad = np.zeros(p.size)
    d = dout
    h_out = out
    for layer, h_in in zip(reversed(net.architecture), reversed(cache)):
        if isinstance(layer, Dense):
            W = p.view(f"{layer.name}.weight")
            grad[p.slice_of(f"{layer.name}.weight")] = (h_in.T @ d).ravel()
            grad[p.slice_of(f"{layer.name}.bias")] = d.sum(axis=0)
            if h_in is cache[0] and not need_input_grad:
                d = None
                break
            d = d @ W.T
        elif isinstance(layer, ReLU):
            d = d * (h_in > 0.0)
        else:
            d = d * (1.0 - h_out * h_out)
        h_out = h_in
        if d is not None and not np.isfinite(d).all():
            raise NumericError(layer.name, "non-finite gradient")
    return grad, d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(net: Network, batch: np.ndarray) -> np.ndarray:
    return softmax(forward(net, batch))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logz - z[np.arange(len(labels)), labels]))


def loss_and_grad(net: Network, batch: np.ndarray, labels: np.ndarray) -> tuple[float, Update]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= net.n_out):
        raise ConfigurationError("label outside the class range")
    logits, cache = _forward_cached(net, batch)
    n = logits.shape[0]
    probs = softmax(logits)
    loss = cross_entropy(logits, labels)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grad, _ = backward(net, cache, logits, dlogits)
    return loss, Update(grad, net.params.layout)


def sgd_step(params: ModelParams, grad: Update, eta: float) -> ModelParams:
    if eta < 0:
        raise ConfigurationError("learning rate must be non-negative")
    return params.apply(grad, eta)


# --- serialization ----------------------------------------------------------

def dumps_params(params: ModelParams) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.layout))]
    for name, shape in params.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
    parts.append(np.ascontiguousarray(params.values, dtype="<f8").tobytes())
    return b"".join(parts)


def loads_params(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise ConfigurationError("not an FGNN parameter file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported FGNN version {version}")
    pos = 12
    layout = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        layout.append((name, tuple(int(d) for d in dims)))
    values = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    return ModelParams(values, tuple(layout))


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_params(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
