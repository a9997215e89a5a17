"""Experiment configuration: a versioned TOML schema with strict key checking."""
from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .attacks import ATTACKS, ActionBounds, LocalSearchAction, ModelCraftAction
from .defenses import AggregatorSpec, PostDefenseSpec
from .env import EnvConfig
from .flcore import FLConfig
from .nn import ConfigurationError
from .rl import TD3Hyper

SCHEMA_VERSION = 1
DATASETS = ("digits", "blobs", "fgds")
RL_MODES = ("alternating", "simultaneous")
OUTPUT_DIR_ENV = "FEDBACKDOOR_OUTPUT_DIR"


@dataclass(frozen=True)
class DataSpec:
    kind: str = "digits"
    path: str | None = None
    augment: int = 4
    test_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class TriggerSpec:
    source_class: int = 1
    target_class: int = 7
    rows: int = 4
    width: int = 1
    corner: str = "top-left"
    n_sub: int = 4
    value: float = 1.0


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    rho: float = 0.5
    radius: float = 0.05
    k_mask: int = 100
    noise_sigma: float = 0.0
    policy_run: str | None = None  # run_id of a train-policy run, for dwba_rl
    B_prime: int = 128
    E_prime: int = 5
    eta_prime: float = 0.3
    alpha: float = 0.0
    beta: float = 0.0

    def fixed_actions(self) -> tuple[LocalSearchAction, ModelCraftAction]:
        return (LocalSearchAction(self.rho, self.B_prime, self.E_prime, self.eta_prime),
                ModelCraftAction(self.alpha, self.beta))


@dataclass(frozen=True)
class RLSpec:
    mode: str = "alternating"
    iterations: int = 2
    steps_per_phase: int = 1000
    hyper: TD3Hyper = field(default_factory=TD3Hyper)


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    seed: int = 0
    fl: FLConfig = field(default_factory=FLConfig.desk)
    data: DataSpec = field(default_factory=DataSpec)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    env: EnvConfig = field(default_factory=EnvConfig)
    rl: RLSpec = field(default_factory=RLSpec)
    bounds: ActionBounds = field(default_factory=ActionBounds)
    attack_window: tuple[int, int] | None = None
    output_dir: str = "runs"

    def window(self) -> tuple[int, int]:
        return self.attack_window if self.attack_window is not None else (0, self.fl.T)


# --- parsing ----------------------------------------------------------------

def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(table: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigurationError(
            f"unknown key(s) {', '.join(where + k for k in unknown)}; allowed: {', '.join(sorted(allowed))}")


def _build(cls, table: dict, path: str, **extra):
    _check_keys(table, _names(cls) - set(extra), path)
    kw = {}
    for f in fields(cls):
        if f.name in table:
            value = table[f.name]
            kw[f.name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kw, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _table(doc: dict, key: str) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"{key} must be a table")
    return value


def _fl_from(tab: dict, seed: int) -> FLConfig:
    fl_keys = _names(FLConfig) - {"aggregator", "post_defense", "seed"}
    _check_keys(tab, fl_keys | {"profile", "defense"}, "fl")
    profile = tab.get("profile", "desk")
    if profile not in ("desk", "paper"):
        raise ConfigurationError(f"fl.profile must be 'desk' or 'paper', got {profile!r}")
    defense = tab.get("defense", {})
    _check_keys(defense, {"aggregator", "krum_f", "norm_threshold", "post", "clip_threshold",
                          "prune_count", "probe_size"}, "fl.defense")
    try:
        agg = AggregatorSpec(defense.get("aggregator", "fedavg"), defense.get("krum_f"),
                             defense.get("norm_threshold", 0.05))
        post = PostDefenseSpec(defense.get("post", "identity"), defense.get("clip_threshold", 1.0),
                               defense.get("prune_count", 16), defense.get("probe_size", 200))
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in tab.items() if k in fl_keys}
        factory = FLConfig.desk if profile == "desk" else FLConfig.paper
        return factory(aggregator=agg, post_defense=post, seed=seed, **kw)
    except ValueError as exc:
        raise ConfigurationError(f"fl: {exc}") from exc


def from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    top = {"schema_version", "run_id", "seed", "output_dir", "attack_window",
           "fl", "data", "trigger", "attack", "env", "rl", "bounds"}
    _check_keys(doc, top, "")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    if not isinstance(doc.get("run_id"), str) or not doc["run_id"]:
        raise ConfigurationError("run_id is required")
    seed = int(doc.get("seed", 0))
    fl = _fl_from(_table(doc, "fl"), seed)

    data = _build(DataSpec, _table(doc, "data"), "data")
    if data.kind not in DATASETS:
        raise ConfigurationError(f"data.kind must be one of {DATASETS}, got {data.kind!r}")
    if data.kind == "fgds" and not data.path:
        raise ConfigurationError("data.path is required when data.kind = 'fgds'")
    trigger = _build(TriggerSpec, _table(doc, "trigger"), "trigger")
    attack = _build(AttackSpec, _table(doc, "attack"), "attack")
    if attack.kind not in ATTACKS:
        raise ConfigurationError(f"attack.kind must be one of {ATTACKS}, got {attack.kind!r}")
    if attack.kind == "dwba_rl" and not attack.policy_run:
        raise ConfigurationError("attack.policy_run is required for dwba_rl")

    env_tab = dict(_table(doc, "env"))
    lam = env_tab.pop("lam", None)
    env_fl = fl if lam is None else replace(fl, lam=lam)
    env_aggr = env_tab.pop("aggregator", None)  # black-box ablation: mismatched defense
    if env_aggr is not None:
        env_fl = replace(env_fl, aggregator=replace(env_fl.aggregator, kind=env_aggr))
    env = _build(EnvConfig, env_tab, "env", fl=env_fl)

    rl_tab = dict(_table(doc, "rl"))
    sched = {k: rl_tab.pop(k) for k in ("mode", "iterations", "steps_per_phase") if k in rl_tab}
    hyper = _build(TD3Hyper, rl_tab, "rl")
    rl = RLSpec(hyper=hyper, **sched)
    if rl.mode not in RL_MODES:
        raise ConfigurationError(f"rl.mode must be one of {RL_MODES}, got {rl.mode!r}")
    if rl.iterations < 1 or rl.steps_per_phase < 0:
        raise ConfigurationError("rl.iterations must be >= 1 and rl.steps_per_phase >= 0")
    bounds = _build(ActionBounds, _table(doc, "bounds"), "bounds")

    window = doc.get("attack_window")
    if window is not None:
        window = tuple(int(x) for x in window)
        if len(window) != 2 or not 0 <= window[0] <= window[1] <= fl.T:
            raise ConfigurationError(f"attack_window {window} must satisfy 0 <= start <= end <= T={fl.T}")
    output_dir = os.environ.get(OUTPUT_DIR_ENV) or doc.get("output_dir", "runs")
    return ExperimentConfig(doc["run_id"], seed, fl, data, trigger, attack, env, rl, bounds,
                            window, output_dir)


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Inverse of :func:`from_dict` (``None`` fields are omitted)."""
    fl = asdict(cfg.fl)
    agg, post = fl.pop("aggregator"), fl.pop("post_defense")
    fl.pop("seed")
    fl["defense"] = {"aggregator": agg["kind"], "krum_f": agg["krum_f"],
                     "norm_threshold": agg["norm_threshold"], "post": post["kind"],
                     "clip_threshold": post["clip_threshold"], "prune_count": post["prune_count"],
                     "probe_size": post["probe_size"]}
    fl["profile"] = "desk"
    env = asdict(cfg.env)
    env_fl = env.pop("fl")
    env["lam"] = env_fl["lam"]
    env["aggregator"] = env_fl["aggregator"]["kind"]
    rl = {"mode": cfg.rl.mode, "iterations": cfg.rl.iterations,
          "steps_per_phase": cfg.rl.steps_per_phase, **asdict(cfg.rl.hyper)}
    doc = {"schema_version": SCHEMA_VERSION, "run_id": cfg.run_id, "seed": cfg.seed,
           "output_dir": cfg.output_dir, "fl": fl, "data": asdict(cfg.data),
           "trigger": asdict(cfg.trigger), "attack": asdict(cfg.attack), "env": env, "rl": rl,
           "bounds": asdict(cfg.bounds)}
    if cfg.attack_window is not None:
        doc["attack_window"] = list(cfg.attack_window)
    return _strip_none(doc)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, tuple):
        return [_strip_none(v) for v in obj]
    return obj


def loads(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed TOML: {exc}") from exc
    return from_dict(doc)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def preset_names() -> list[str]:
    root = resources.files("fedbackdoor") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def preset(name: str, **overrides) -> ExperimentConfig:
    """Load a bundled preset; ``overrides`` replace top-level tables key by key."""
    path = resources.files("fedbackdoor") / "presets" / f"{name}.toml"
    if not path.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    doc = tomllib.loads(path.read_text())
    for key, value in overrides.items():
        if isinstance(value, dict):
            doc.setdefault(key, {}).update(value)
        else:
            doc[key] = value
    return from_dict(doc)
