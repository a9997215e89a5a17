"""Backdoor attacks: the two-step Double Whammy update and four baselines.

All update functions are pure: they read the global model and return a new
:class:`~fedbackdoor.nn.Update` without modifying their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .data import LabeledDataset, PoisonedDataset, TriggerPattern, poison_dataset
from .flcore import FLConfig, Federation, RoundSample, local_sgd, stream
from .nn import ConfigurationError, ModelParams, Network, Update, _same_layout

ATTACKS = ("none", "bfl", "dba", "pgd", "neurotoxin", "dwba_fixed", "dwba_rl")


@dataclass(frozen=True)
class LocalSearchAction:
    rho: float
    B_prime: int
    E_prime: int
    eta_prime: float


@dataclass(frozen=True)
class ModelCraftAction:
    alpha: float
    beta: float


@dataclass(frozen=True)
class ActionBounds:
    """Ranges that policy outputs in [-1, 1] are decoded into."""

    rho: tuple[float, float] = (0.0, 1.0)
    batch: tuple[int, int] = (16, 256)
    iters: tuple[int, int] = (1, 5)
    lr: tuple[float, float] = (1e-3, 0.2)
    alpha: tuple[float, float] = (0.0, 1.0)
    beta: tuple[float, float] = (0.0, 1.0)

    def decode_search(self, raw) -> LocalSearchAction:
        u = (np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
        lo, hi = np.log(self.lr[0]), np.log(self.lr[1])
        return LocalSearchAction(
            rho=float(self.rho[0] + u[0] * (self.rho[1] - self.rho[0])),
            B_prime=int(round(self.batch[0] + u[1] * (self.batch[1] - self.batch[0]))),
            E_prime=int(round(self.iters[0] + u[2] * (self.iters[1] - self.iters[0]))),
            eta_prime=float(np.exp(lo + u[3] * (hi - lo))),
        )

    def decode_craft(self, raw) -> ModelCraftAction:
        u = (np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0
        return ModelCraftAction(
            alpha=float(self.alpha[0] + u[0] * (self.alpha[1] - self.alpha[0])),
            beta=float(self.beta[0] + u[1] * (self.beta[1] - self.beta[0])),
        )

    def encode_search(self, a: LocalSearchAction) -> np.ndarray:
        """Inverse of :meth:`decode_search` (up to integer rounding)."""
        lo, hi = np.log(self.lr[0]), np.log(self.lr[1])
        u = [
            (a.rho - self.rho[0]) / (self.rho[1] - self.rho[0]),
            (a.B_prime - self.batch[0]) / (self.batch[1] - self.batch[0]),
            (a.E_prime - self.iters[0]) / (self.iters[1] - self.iters[0]),
            (np.log(a.eta_prime) - lo) / (hi - lo),
        ]
        return np.clip(np.asarray(u) * 2.0 - 1.0, -1.0, 1.0)

    def encode_craft(self, a: ModelCraftAction) -> np.ndarray:
        u = [(a.alpha - self.alpha[0]) / (self.alpha[1] - self.alpha[0]),
             (a.beta - self.beta[0]) / (self.beta[1] - self.beta[0])]
        return np.clip(np.asarray(u) * 2.0 - 1.0, -1.0, 1.0)


SEARCH_DIM = 4
CRAFT_DIM = 2


class AttackStreams(NamedTuple):
    poison: np.random.Generator
    search: np.random.Generator
    clean: np.random.Generator
    noise: np.random.Generator


def attack_streams(rng: np.random.Generator) -> AttackStreams:
    """Split one generator into the four sub-streams a crafted update consumes."""
    return AttackStreams(*np.random.default_rng(rng).spawn(4))


def layer_offsets(layout) -> np.ndarray:
    """Boundaries of each layer (weight and bias together) in the flat vector."""
    offsets = [0]
    prev = None
    pos = 0
    for name, shape in layout:
        layer = name.split(".")[0]
        if prev is not None and layer != prev:
            offsets.append(pos)
        pos += int(np.prod(shape))
        prev = layer
    offsets.append(pos)
    return np.asarray(offsets, dtype=np.int64)


# --- Double Whammy ----------------------------------------------------------

def local_search(w: ModelParams, pooled_poisoned: PoisonedDataset | LabeledDataset,
                 a1: LocalSearchAction, rng: np.random.Generator, net: Network) -> Update:
    data = pooled_poisoned.data if isinstance(pooled_poisoned, PoisonedDataset) else pooled_poisoned
    return local_sgd(net, w, data, a1.E_prime, a1.B_prime, a1.eta_prime, rng)


def clean_reference(w: ModelParams, pooled_clean: LabeledDataset, cfg: FLConfig,
                    rng: np.random.Generator, net: Network) -> Update:
    return local_sgd(net, w, pooled_clean, cfg.E, cfg.B, cfg.eta, rng)


def model_craft(g_tilde: Update, g: Update, a2: ModelCraftAction) -> Update:
    """Pull the top-alpha most divergent coordinates of each layer toward ``g`` by ``beta``."""
    _same_layout(g_tilde.layout, g.layout)
    out = kernels.topk_craft(g_tilde.delta, g.delta, layer_offsets(g.layout), a2.alpha, a2.beta)
    return Update(out, g.layout)


def dwba_update(w: ModelParams, attacker_data: LabeledDataset, a1: LocalSearchAction,
                a2: ModelCraftAction, rng: np.random.Generator, noise_sigma: float,
                cfg: FLConfig, net: Network, trigger: TriggerPattern) -> Update:
    s = attack_streams(rng)
    poisoned = poison_dataset(attacker_data, a1.rho, trigger, "global", s.poison)
    g_tilde = local_search(w, poisoned, a1, s.search, net)
    g = clean_reference(w, attacker_data, cfg, s.clean, net)
    crafted = model_craft(g_tilde, g, a2)
    if noise_sigma > 0:
        crafted = Update(crafted.delta + s.noise.normal(0.0, noise_sigma, crafted.delta.shape),
                         crafted.layout)
    return crafted


# --- baselines --------------------------------------------------------------

def bfl_update(w: ModelParams, attacker_data: LabeledDataset, rho: float, cfg: FLConfig,
               rng: np.random.Generator, net: Network, trigger: TriggerPattern,
               which="global") -> Update:
    """Poisoned local training with the benign hyperparameters, no scaling."""
    return _poisoned_training(w, attacker_data, rho, cfg, attack_streams(rng), net, trigger, which)


def _poisoned_training(w, data, rho, cfg, s: AttackStreams, net, trigger, which="global") -> Update:
    poisoned = poison_dataset(data, rho, trigger, which, s.poison)
    return local_sgd(net, w, poisoned.data, cfg.E, cfg.B, cfg.eta, s.search)


def pgd_update(w, attacker_data, rho, radius, cfg, rng, net, trigger) -> Update:
    if radius <= 0:
        raise ConfigurationError("projection radius must be positive")
    g = bfl_update(w, attacker_data, rho, cfg, rng, net, trigger)
    nrm = g.norm()
    if nrm <= radius:
        return g
    return Update(g.delta * (radius / nrm), g.layout)


def neurotoxin_update(w, attacker_data, rho, k_mask, cfg, rng, net, trigger) -> Update:
    """Poisoned update with the top-``k_mask`` |benign update| coordinates of each layer zeroed."""
    offsets = layer_offsets(w.layout)
    if k_mask < 0:
        raise ConfigurationError("k_mask must be non-negative")
    if k_mask >= int(np.diff(offsets).min()):
        raise ConfigurationError(f"k_mask={k_mask} must be below every layer size")
    s = attack_streams(rng)
    poisoned = _poisoned_training(w, attacker_data, rho, cfg, s, net, trigger)
    g = clean_reference(w, attacker_data, cfg, s.clean, net)
    mask = kernels.topk_mask(g.delta, offsets, k_mask)
    out = poisoned.delta.copy()
    out[mask] = 0.0
    return Update(out, w.layout)


def dba_update(w, attacker_k_data, sub_index, rho, cfg, rng, net, trigger) -> Update:
    if not 0 <= sub_index < len(trigger.sub_triggers):
        raise ConfigurationError(f"sub-trigger index {sub_index} out of range")
    return bfl_update(w, attacker_k_data, rho, cfg, rng, net, trigger, which=sub_index)


# --- attack objects plugged into the server loop ---------------------------

def pool_attacker_data(fed: Federation, eval_split: float) -> tuple[LabeledDataset, LabeledDataset]:
    """Pool the M attackers' data, holding out ``eval_split`` of it for reward estimation."""
    pooled = LabeledDataset.concat(fed.attacker_data)
    rng = stream(fed.cfg.seed, "attack", 0)
    perm = rng.permutation(len(pooled))
    n_eval = int(round(eval_split * len(pooled)))
    return pooled.subset(np.sort(perm[n_eval:])), pooled.subset(np.sort(perm[:n_eval]))


class _PerAttacker:
    def updates(self, fed: Federation, w: ModelParams, sample: RoundSample, round_: int):
        return [self.one(fed, w, k, stream(fed.cfg.seed, "attack", 1, round_, k))
                for k in sample.attackers_selected]


@dataclass
class BFL(_PerAttacker):
    rho: float = 0.5

    def one(self, fed, w, k, rng):
        return bfl_update(w, fed.clients[k], self.rho, fed.cfg, rng, fed.net, fed.trigger)


@dataclass
class PGD(_PerAttacker):
    rho: float = 0.5
    radius: float = 0.05

    def one(self, fed, w, k, rng):
        return pgd_update(w, fed.clients[k], self.rho, self.radius, fed.cfg, rng, fed.net, fed.trigger)


@dataclass
class Neurotoxin(_PerAttacker):
    rho: float = 0.5
    k_mask: int = 100

    def one(self, fed, w, k, rng):
        return neurotoxin_update(w, fed.clients[k], self.rho, self.k_mask, fed.cfg, rng,
                                 fed.net, fed.trigger)


@dataclass
class DBA(_PerAttacker):
    rho: float = 0.5

    def one(self, fed, w, k, rng):
        sub = int(rng.integers(len(fed.trigger.sub_triggers)))
        return dba_update(w, fed.clients[k], sub, self.rho, fed.cfg, rng, fed.net, fed.trigger)


ActionFn = Callable[[ModelParams, RoundSample, int], tuple[LocalSearchAction, ModelCraftAction]]


class DoubleWhammy:
    """Shared crafted update for every sampled attacker.

    ``action_fn(w, sample, round)`` supplies the two sub-actions; it is either
    a constant (``dwba_fixed``) or the trained policies (``dwba_rl``).
    """

    def __init__(self, action_fn: ActionFn, eval_split: float = 0.2, noise_sigma: float = 0.0):
        self.action_fn = action_fn
        self.eval_split = eval_split
        self.noise_sigma = noise_sigma
        self.last_actions = None

    def pooled(self, fed: Federation) -> LabeledDataset:
        cache = fed.__dict__.setdefault("_attacker_pools", {})
        if self.eval_split not in cache:
            cache[self.eval_split] = pool_attacker_data(fed, self.eval_split)[0]
        return cache[self.eval_split]

    def updates(self, fed: Federation, w: ModelParams, sample: RoundSample, round_: int):
        a1, a2 = self.action_fn(w, sample, round_)
        self.last_actions = (a1, a2)
        g = dwba_update(w, self.pooled(fed), a1, a2, stream(fed.cfg.seed, "attack", 2, round_),
                        self.noise_sigma, fed.cfg, fed.net, fed.trigger)
        return [g] * len(sample.attackers_selected)


def fixed_actions(a1: LocalSearchAction, a2: ModelCraftAction) -> ActionFn:
    return lambda w, sample, round_: (a1, a2)
