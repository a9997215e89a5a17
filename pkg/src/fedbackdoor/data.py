"""Datasets, i.i.d. client partitions, pixel triggers and poisoning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigurationError

DS_MAGIC = b"FGDS"


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("samples and labels differ in count")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.n_classes, self.image_shape)

    @staticmethod
    def concat(parts) -> LabeledDataset:
        parts = list(parts)
        return LabeledDataset(np.concatenate([p.samples for p in parts]),
                              np.concatenate([p.labels for p in parts]),
                              parts[0].n_classes, parts[0].image_shape)


@dataclass(frozen=True)
class TriggerPattern:
    """Pixel overrides stamped onto inputs, plus their partition into sub-triggers.

    ``coords`` are flat feature indices and ``values`` their override values;
    each entry of ``sub_triggers`` is an index array into ``coords``.
    """

    coords: np.ndarray
    values: np.ndarray
    source_class: int
    target_class: int
    sub_triggers: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        if self.coords.shape != self.values.shape:
            raise ConfigurationError("trigger coords and values differ in length")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ConfigurationError("trigger values must lie in [0, 1]")
        if self.sub_triggers:
            joined = np.sort(np.concatenate(self.sub_triggers))
            if not np.array_equal(joined, np.arange(len(self.coords))):
                raise ConfigurationError("sub-triggers must partition the global trigger")

    def part(self, which) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates and values of the global trigger (``"global"``) or a sub-trigger."""
        if which is None or which == "global":
            return self.coords, self.values
        if not 0 <= which < len(self.sub_triggers):
            raise IndexError(f"sub-trigger {which} out of range (have {len(self.sub_triggers)})")
        sel = self.sub_triggers[which]
        return self.coords[sel], self.values[sel]


def corner_trigger(image_shape=(8, 8), source_class=1, target_class=7, *, rows=4, width=1,
                   corner="top-left", n_sub=4, value=1.0) -> TriggerPattern:
    """A ``rows x width`` block of value ``value`` in an image corner.

    The block is split column-major into ``n_sub`` equal contiguous sub-triggers.
    """
    h, w = image_shape
    r0 = 0 if corner.startswith("top") else h - rows
    c0 = 0 if corner.endswith("left") else w - width
    coords = []
    for c in range(c0, c0 + width):
        for r in range(r0, r0 + rows):
            coords.append(r * w + c)
    coords = np.asarray(coords, dtype=np.int64)
    if len(coords) % n_sub:
        raise ConfigurationError("trigger size must divide evenly into sub-triggers")
    subs = tuple(np.array_split(np.arange(len(coords)), n_sub))
    return TriggerPattern(coords, np.full(len(coords), value), source_class, target_class, subs)


def embed_trigger(x: np.ndarray, trig: TriggerPattern, which="global") -> tuple[np.ndarray, int]:
    coords, values = trig.part(which)
    if coords.size and coords.max() >= x.shape[-1]:
        raise ConfigurationError("trigger coordinate outside the feature vector")
    out = np.array(x, dtype=np.float64, copy=True)
    out[..., coords] = values
    return out, trig.target_class


def stamp(samples: np.ndarray, trig: TriggerPattern, which="global") -> np.ndarray:
    return embed_trigger(samples, trig, which)[0]


@dataclass(frozen=True)
class PoisonedDataset:
    base: LabeledDataset
    poisoned_indices: np.ndarray
    rho: float
    data: LabeledDataset

    def __len__(self) -> int:
        return len(self.data)


def poison_dataset(ds: LabeledDataset, rho: float, trig: TriggerPattern, which="global",
                   rng: np.random.Generator | int = 0) -> PoisonedDataset:
    """Trigger and relabel exactly round(rho * |ds|) uniformly chosen samples."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"poison ratio {rho} outside [0, 1]")
    rng = np.random.default_rng(rng)
    n_poison = int(round(rho * len(ds)))
    idx = np.sort(rng.choice(len(ds), size=n_poison, replace=False))
    X = ds.samples.copy()
    y = ds.labels.copy()
    if n_poison:
        X[idx] = stamp(X[idx], trig, which)
        y[idx] = trig.target_class
    data = LabeledDataset(X, y, ds.n_classes, ds.image_shape)
    return PoisonedDataset(ds, idx, rho, data)


def iid_split(ds: LabeledDataset, k: int, rng: np.random.Generator | int = 0) -> list[LabeledDataset]:
    """Shuffle and cut into ``k`` groups whose sizes differ by at most one."""
    if k < 1:
        raise ConfigurationError("need at least one client")
    if k > len(ds):
        raise ConfigurationError(f"cannot split {len(ds)} samples across {k} clients")
    perm = np.random.default_rng(rng).permutation(len(ds))
    return [ds.subset(part) for part in np.array_split(perm, k)]


def train_test_split(ds: LabeledDataset, test_fraction: float, rng) -> tuple[LabeledDataset, LabeledDataset]:
    perm = np.random.default_rng(rng).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# --- built-in datasets ------------------------------------------------------

def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys, xs] = img[..., yd, xd]
    return out


def load_digits8(augment: int = 0, seed: int = 0) -> LabeledDataset:
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1].

    ``augment`` adds that many jittered copies of every image (one-pixel shifts
    plus small Gaussian noise, clipped to [0, 1]).
    """
    from sklearn.datasets import load_digits

    raw = load_digits()
    X = raw.data.astype(np.float64) / 16.0
    y = raw.target.astype(np.int64)
    if augment:
        rng = np.random.default_rng(seed)
        imgs = X.reshape(-1, 8, 8)
        extra_X, extra_y = [X], [y]
        for _ in range(augment):
            shifts = rng.integers(-1, 2, size=(len(X), 2))
            aug = np.stack([_shift(im, dy, dx) for im, (dy, dx) in zip(imgs, shifts)])
            aug = aug.reshape(len(X), 64) + rng.normal(0.0, 0.05, size=X.shape)
            extra_X.append(np.clip(aug, 0.0, 1.0))
            extra_y.append(y)
        X = np.concatenate(extra_X)
        y = np.concatenate(extra_y)
    return LabeledDataset(X, y, 10, (8, 8))


def synthetic_blobs(n: int = 3000, n_features: int = 64, n_classes: int = 10,
                    spread: float = 0.08, seed: int = 0) -> LabeledDataset:
    """Linearly separable Gaussian blobs with features in [0, 1]."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(n_classes, n_features))
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    X = np.clip(centers[y] + rng.normal(0.0, spread, size=(n, n_features)), 0.0, 1.0)
    side = int(np.sqrt(n_features))
    shape = (side, side) if side * side == n_features else None
    return LabeledDataset(X, y.astype(np.int64), n_classes, shape)


# --- FGDS container ---------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<III", len(ds), ds.n_features, ds.n_classes))
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())


def load_dataset(path, image_shape=None) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DS_MAGIC:
        raise ConfigurationError(f"{path} is not an FGDS dataset")
    n, d, c = struct.unpack_from("<III", blob, 4)
    off = 16
    X = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    y = np.frombuffer(blob, dtype="<u2", count=n, offset=off).astype(np.int64)
    if image_shape is None:
        side = int(np.sqrt(d))
        image_shape = (side, side) if side * side == d else None
    return LabeledDataset(X, y, c, image_shape)


def _read_idx(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    zero, dtype_code, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0 or dtype_code != 0x08:
        raise ConfigurationError(f"{path}: only unsigned-byte IDX files are supported")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    return np.frombuffer(blob, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def convert_idx(images_path, labels_path, out_path, n_classes: int = 10) -> LabeledDataset:
    """Convert an IDX image/label pair (the public MNIST format) into FGDS."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    ds = LabeledDataset(X, labels.astype(np.int64), n_classes, tuple(images.shape[1:]))
    save_dataset(ds, out_path)
    return ds
