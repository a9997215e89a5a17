"""The attacker's simulated FL environment (its "world model").

Only data the attackers hold is used: their pooled clean data is split into
a training pool, which also stands in for the benign clients, and a held-out
part for estimating the reward.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .attacks import (ActionBounds, DoubleWhammy, LocalSearchAction, ModelCraftAction,
                      pool_attacker_data)
from .data import LabeledDataset, TriggerPattern, iid_split
from .defenses import apply_post_defense
from .flcore import (FLConfig, Federation, advance, attack_objective, backdoor_set,
                     build_network, stream, subsample)
from .nn import ConfigurationError, ModelParams, Network


@dataclass(frozen=True)
class EnvConfig:
    fl: FLConfig = field(default_factory=FLConfig)
    episode_rounds: int = 150
    gamma: float = 0.99
    attacker_eval_split: float = 0.2
    simulate_benign_from_attacker_data: bool = True
    state_layers: tuple[str, ...] | None = None  # None: the last two hidden layers
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if self.episode_rounds < 1:
            raise ConfigurationError("episode_rounds must be >= 1")
        if not 0 < self.attacker_eval_split < 1:
            raise ConfigurationError("attacker_eval_split must lie in (0, 1)")

    @property
    def lam(self) -> float:
        return self.fl.lam


@dataclass(frozen=True)
class AttackState:
    layer_view: np.ndarray
    n_attackers_sampled: int
    n_selected: int

    def vector(self) -> np.ndarray:
        """Raw observation: layer parameters followed by the scaled attacker count."""
        return np.concatenate([self.layer_view, [self.n_attackers_sampled / self.n_selected]])


def state_layer_names(net: Network, names: Sequence[str] | None = None) -> tuple[str, ...]:
    if names is not None:
        return tuple(names)
    hidden = net.hidden_layers()
    if len(hidden) < 2:
        raise ConfigurationError("state needs at least two hidden layers")
    return tuple(layer.name for layer in hidden[-2:])


def layer_view(w: ModelParams, layers: Sequence[str]) -> np.ndarray:
    parts = []
    for name, _ in w.layout:
        if name.split(".")[0] in layers:
            parts.append(w.values[w.slice_of(name)])
    return np.concatenate(parts)


def observe(w: ModelParams, n_attackers: int, cfg: FLConfig, layers: Sequence[str]) -> AttackState:
    return AttackState(layer_view(w, layers), int(n_attackers), cfg.n_selected)


def simulated_federation(cfg: EnvConfig, attacker_data: Sequence[LabeledDataset],
                         trigger: TriggerPattern, seed: int,
                         benign_clients: Sequence[LabeledDataset] | None = None) -> Federation:
    """The attacker's replica of the FL system for one episode.

    Benign clients are K - M shards of the attackers' pooled training data
    unless ``benign_clients`` is given (and the config allows it).
    """
    fl = replace(cfg.fl, seed=seed)
    attacker_data = list(attacker_data)
    if len(attacker_data) != fl.M:
        raise ConfigurationError(f"expected {fl.M} attacker datasets, got {len(attacker_data)}")
    n_features = attacker_data[0].n_features
    n_classes = attacker_data[0].n_classes
    net = build_network(n_features, n_classes, fl.hidden, seed)
    probe_fed = Federation(fl, net, attacker_data, attacker_data[0], trigger)
    train_pool, eval_pool = pool_attacker_data(probe_fed, cfg.attacker_eval_split)
    if cfg.simulate_benign_from_attacker_data or benign_clients is None:
        n_benign = fl.K - fl.M
        if len(train_pool) < n_benign:
            raise ConfigurationError(
                f"{len(train_pool)} attacker samples cannot be sharded into {n_benign} clients")
        benign = iid_split(train_pool, n_benign, stream(seed, "data", 10)) if n_benign else []
    else:
        benign = list(benign_clients)
    fed = Federation(fl, net, attacker_data + benign, eval_pool, trigger)
    if fl.post_defense.kind == "prune":
        rng = stream(seed, "data", 11)
        n = min(fl.post_defense.probe_size, len(train_pool))
        fed.probe = train_pool.subset(np.sort(rng.choice(len(train_pool), size=n, replace=False)))
    return fed


class AttackEnv:
    """Episodic MDP: one step is one FL round driven by a Double Whammy action."""

    def __init__(self, cfg: EnvConfig, attacker_data: Sequence[LabeledDataset],
                 trigger: TriggerPattern, bounds: ActionBounds | None = None,
                 benign_clients: Sequence[LabeledDataset] | None = None):
        self.cfg = cfg
        self.attacker_data = list(attacker_data)
        self.trigger = trigger
        self.bounds = bounds or ActionBounds()
        self.benign_clients = benign_clients
        self.fed: Federation | None = None
        self.w: ModelParams | None = None
        self.t = 0
        self.n_attackers = 0
        self.layers: tuple[str, ...] = ()
        self._pending = None
        self._attack = DoubleWhammy(self._next_action, cfg.attacker_eval_split, cfg.noise_sigma)
        self._reward_clean = None
        self._reward_backdoor = None
        self.failure_penalty = 0.0

    def _next_action(self, w, sample, round_):
        return self._pending

    def reset(self, seed: int = 0) -> AttackState:
        self.fed = simulated_federation(self.cfg, self.attacker_data, self.trigger, seed,
                                        self.benign_clients)
        self.w = self.fed.initial_params()
        self.t = 0
        self.n_attackers = 0
        self.layers = state_layer_names(self.fed.net, self.cfg.state_layers)
        self._reward_clean = self.fed.test
        self._reward_backdoor = backdoor_set(self.fed.test, self.trigger, source_only=False)
        self.failure_penalty = -10.0 * math.log(self.fed.net.n_out)
        return self.state()

    def state(self) -> AttackState:
        return observe(self.w, self.n_attackers, self.fed.cfg, self.layers)

    @property
    def state_dim(self) -> int:
        return self.state().vector().shape[0]

    def reward_of(self, w: ModelParams) -> float:
        model = apply_post_defense(self.fed.cfg.post_defense, self.fed.net.with_params(w),
                                   self.fed.probe)
        return -attack_objective(model, self._reward_clean, self._reward_backdoor, self.cfg.lam)

    def step(self, action: tuple[LocalSearchAction, ModelCraftAction]):
        """Advance one round. Returns ``(state, reward, done, info)``."""
        if self.fed is None:
            raise RuntimeError("call reset() before step()")
        self._pending = action
        try:
            w_next, sample = advance(self.fed, self.w, self.t, self._attack)
            reward = self.reward_of(w_next) if sample.attackers_selected else 0.0
        except nn.NumericError:
            self.t += 1
            return self.state(), self.failure_penalty, True, {"numeric_failure": True}
        self.w = w_next
        self.t += 1
        # The count observed next is the one the server draws for the coming round.
        self.n_attackers = len(subsample(self.fed.cfg, self.t).attackers_selected)
        done = self.t >= self.cfg.episode_rounds
        return self.state(), reward, done, {"attackers": sample.attackers_selected}


def return_of(rewards: Sequence[float], gamma: float) -> float:
    """Discounted return sum_t gamma^t r_t."""
    total = 0.0
    for t, r in enumerate(rewards):
        total += gamma ** t * r
    return total


def dump_episode(path, records) -> None:
    """Write ``(round, state, action, reward)`` tuples as JSON lines."""
    with open(path, "w") as fh:
        for round_, state, action, reward in records:
            digest = hashlib.sha256(state.vector().tobytes()).hexdigest()[:16]
            fh.write(json.dumps({"round": round_, "state_hash": digest,
                                 "action": action, "reward": reward}) + "\n")
