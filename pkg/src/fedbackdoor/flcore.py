"""Federated training loop: subsampling, local SGD, aggregation and evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import nn
from .data import LabeledDataset, TriggerPattern, iid_split, stamp, train_test_split
from .defenses import AggregatorSpec, PostDefenseSpec, aggregate, apply_post_defense
from .nn import ConfigurationError, ModelParams, Network, Update

# Independent named RNG streams derived from the master seed.
STREAMS = {"init": 1, "subsample": 2, "data": 3, "attack": 4, "policy": 5}

METRIC_FIELDS = ("round", "main_acc", "backdoor_acc", "reward", "global_norm")


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *[int(k) for k in keys]])


@dataclass(frozen=True)
class FLConfig:
    K: int = 20
    M: int = 2
    kappa: float = 0.25
    T: int = 150
    E: int = 1
    B: int = 128
    eta: float = 0.05
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    post_defense: PostDefenseSpec = field(default_factory=PostDefenseSpec)
    lam: float = 0.5
    seed: int = 0
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if not 0 <= self.M <= self.K:
            raise ConfigurationError(f"M={self.M} must lie in [0, K={self.K}]")
        if not 0 < self.kappa <= 1:
            raise ConfigurationError("kappa must lie in (0, 1]")
        if self.n_selected < 1:
            raise ConfigurationError("round(kappa * K) must be at least 1")
        if not 0 <= self.lam <= 1:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if self.E < 0 or self.B < 1 or self.eta < 0 or self.T < 0:
            raise ConfigurationError("E, T must be >= 0, B >= 1 and eta >= 0")

    @property
    def n_selected(self) -> int:
        return int(round(self.kappa * self.K))

    @property
    def krum_f(self) -> int:
        if self.aggregator.krum_f is not None:
            return self.aggregator.krum_f
        return math.ceil(self.kappa * self.M)

    @classmethod
    def paper(cls, **overrides) -> FLConfig:
        """Full-scale defaults: K=100, M=5, 10% subsampling, 500 rounds."""
        base = dict(K=100, M=5, kappa=0.1, T=500, E=1, B=128, eta=0.05)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> FLConfig:
        """Laptop-scale defaults: K=20, M=2, 25% subsampling, 150 rounds.

        Local training is longer and faster (E=5, eta=0.3) than at full scale so
        the small MLP converges within 150 rounds.
        """
        base = dict(K=20, M=2, kappa=0.25, T=150, E=5, B=128, eta=0.3)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class RoundSample:
    selected: tuple[int, ...]
    attackers_selected: tuple[int, ...]


@dataclass(frozen=True)
class MetricRecord:
    round: int
    main_acc: float
    backdoor_acc: float
    reward: float
    global_norm: float


def subsample(cfg: FLConfig, round_: int, seed: int | None = None) -> RoundSample:
    """Uniform sample of round(kappa*K) clients, a pure function of (seed, round)."""
    rng = stream(cfg.seed if seed is None else seed, "subsample", round_)
    chosen = np.sort(rng.choice(cfg.K, size=cfg.n_selected, replace=False))
    selected = tuple(int(c) for c in chosen)
    return RoundSample(selected, tuple(c for c in selected if c < cfg.M))


def local_sgd(net: Network, w: ModelParams, data: LabeledDataset, steps: int, batch: int,
              eta: float, rng: np.random.Generator) -> Update:
    """``steps`` minibatch SGD iterations from ``w``; returns ``w - w_final``.

    Minibatches are drawn without replacement and capped at the dataset size.
    """
    if len(data) == 0:
        raise ConfigurationError("local training needs at least one sample")
    w0 = w
    b = min(batch, len(data))
    model = net.with_params(w)
    for _ in range(steps):
        idx = rng.choice(len(data), size=b, replace=False)
        _, grad = nn.loss_and_grad(model, data.samples[idx], data.labels[idx])
        w = nn.sgd_step(w, grad, eta)
        model = model.with_params(w)
    return w0 - w


def benign_update(client: LabeledDataset, w: ModelParams, cfg: FLConfig, rng: np.random.Generator,
                  net: Network) -> Update:
    return local_sgd(net, w, client, cfg.E, cfg.B, cfg.eta, rng)


class Attack(Protocol):
    def updates(self, fed: Federation, w: ModelParams, sample: RoundSample,
                round_: int) -> list[Update]:
        """One crafted update per entry of ``sample.attackers_selected``."""


@dataclass
class Federation:
    """Everything the server loop needs besides the global model."""

    cfg: FLConfig
    net: Network
    clients: list[LabeledDataset]
    test: LabeledDataset
    trigger: TriggerPattern
    probe: LabeledDataset | None = None

    @property
    def attacker_data(self) -> list[LabeledDataset]:
        return self.clients[: self.cfg.M]

    def initial_params(self) -> ModelParams:
        return self.net.params


def build_network(n_features: int, n_classes: int, hidden: Sequence[int], seed: int) -> Network:
    return nn.mlp([n_features, *hidden, n_classes], stream(seed, "init"))


def build_federation(cfg: FLConfig, dataset: LabeledDataset, trigger: TriggerPattern,
                     test_fraction: float = 0.2) -> Federation:
    """Split ``dataset`` into a test set and K equal i.i.d. client shards."""
    train, test = train_test_split(dataset, test_fraction, stream(cfg.seed, "data", 0))
    clients = iid_split(train, cfg.K, stream(cfg.seed, "data", 1))
    net = build_network(dataset.n_features, dataset.n_classes, cfg.hidden, cfg.seed)
    probe = None
    if cfg.post_defense.kind == "prune":
        benign = LabeledDataset.concat(clients[cfg.M:])
        rng = stream(cfg.seed, "data", 2)
        n = min(cfg.post_defense.probe_size, len(benign))
        probe = benign.subset(np.sort(rng.choice(len(benign), size=n, replace=False)))
    return Federation(cfg, net, clients, test, trigger, probe)


def collect_updates(fed: Federation, w: ModelParams, sample: RoundSample, round_: int,
                    attack: Attack | None = None) -> list[Update]:
    """Updates of all selected clients, in client-index order."""
    cfg = fed.cfg
    crafted = {}
    if attack is not None and sample.attackers_selected:
        crafted = dict(zip(sample.attackers_selected,
                           attack.updates(fed, w, sample, round_)))
    out = []
    for k in sample.selected:
        if k in crafted:
            out.append(crafted[k])
        else:
            rng = stream(cfg.seed, "data", 100, round_, k)
            out.append(benign_update(fed.clients[k], w, cfg, rng, fed.net))
    return out


def advance(fed: Federation, w: ModelParams, round_: int,
            attack: Attack | None = None) -> tuple[ModelParams, RoundSample]:
    """One server round without evaluation: w - Aggr(updates)."""
    sample = subsample(fed.cfg, round_)
    updates = collect_updates(fed, w, sample, round_, attack)
    agg = aggregate(fed.cfg.aggregator, updates, fed.cfg.krum_f)
    w_next = w.apply(agg)
    if not np.isfinite(w_next.values).all():
        raise nn.NumericError("aggregate", "non-finite global model")
    return w_next, sample


def attack_objective(net: Network, clean: LabeledDataset, backdoor: LabeledDataset, lam: float) -> float:
    """lambda * clean loss + (1 - lambda) * backdoor loss."""
    total = 0.0
    if lam > 0:
        total += lam * nn.cross_entropy(nn.forward(net, clean.samples), clean.labels)
    if lam < 1:
        total += (1 - lam) * nn.cross_entropy(nn.forward(net, backdoor.samples), backdoor.labels)
    return total


def backdoor_set(ds: LabeledDataset, trig: TriggerPattern, source_only: bool = True) -> LabeledDataset:
    """Triggered copies relabeled to the target class.

    ``source_only`` keeps only source-class inputs; otherwise every
    non-target input is used.
    """
    keep = ds.labels == trig.source_class if source_only else ds.labels != trig.target_class
    X = stamp(ds.samples[keep], trig)
    y = np.full(int(keep.sum()), trig.target_class, dtype=np.int64)
    return LabeledDataset(X, y, ds.n_classes, ds.image_shape)


def evaluate(net: Network, w: ModelParams, test: LabeledDataset, trig: TriggerPattern,
             post_defense: PostDefenseSpec | None = None,
             probe: LabeledDataset | None = None) -> tuple[float, float]:
    """Main-task and backdoor accuracy of ``h(w)`` on the test set."""
    model = net.with_params(w)
    if post_defense is not None:
        model = apply_post_defense(post_defense, model, probe)
    main = float(np.mean(np.argmax(nn.forward(model, test.samples), axis=1) == test.labels))
    bd = backdoor_set(test, trig)
    if len(bd) == 0:
        return main, 0.0
    hit = np.argmax(nn.forward(model, bd.samples), axis=1) == trig.target_class
    return main, float(np.mean(hit))


def run_round(fed: Federation, w: ModelParams, round_: int,
              attack: Attack | None = None) -> tuple[ModelParams, MetricRecord]:
    cfg = fed.cfg
    w_next, sample = advance(fed, w, round_, attack)
    main, bd = evaluate(fed.net, w_next, fed.test, fed.trigger, cfg.post_defense, fed.probe)
    reward = 0.0
    if attack is not None and sample.attackers_selected:
        model = apply_post_defense(cfg.post_defense, fed.net.with_params(w_next), fed.probe)
        reward = -attack_objective(model, fed.test, backdoor_set(fed.test, fed.trigger, False), cfg.lam)
    record = MetricRecord(round_, main, bd, reward, float(np.linalg.norm(w_next.values)))
    return w_next, record


def run(fed: Federation, attack: Attack | None = None, rounds: int | None = None,
        window: tuple[int, int] | None = None, w: ModelParams | None = None,
        callback=None) -> tuple[ModelParams, list[MetricRecord]]:
    """Run the server loop; the attack is active only for rounds inside ``window``."""
    w = fed.initial_params() if w is None else w
    T = fed.cfg.T if rounds is None else rounds
    records = []
    for t in range(T):
        active = attack if window is None or window[0] <= t < window[1] else None
        w, rec = run_round(fed, w, t, active)
        records.append(rec)
        if callback is not None:
            callback(rec)
    return w, records


def with_aggregator(cfg: FLConfig, **kw) -> FLConfig:
    return replace(cfg, aggregator=replace(cfg.aggregator, **kw))


class MetricWriter:
    """Append-only CSV sink for :class:`MetricRecord` rows."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(METRIC_FIELDS)

    def write(self, rec: MetricRecord) -> None:
        self._w.writerow([rec.round, repr(rec.main_acc), repr(rec.backdoor_acc),
                          repr(rec.reward), repr(rec.global_norm)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        return [MetricRecord(int(r["round"]), float(r["main_acc"]), float(r["backdoor_acc"]),
                             float(r["reward"]), float(r["global_norm"]))
                for r in csv.DictReader(fh)]
