"""Command-line runner: ``train-policy``, ``run`` and ``plotdata``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import config as config_mod
from .attacks import BFL, DBA, PGD, DoubleWhammy, Neurotoxin, fixed_actions
from .config import ExperimentConfig
from .data import LabeledDataset, TriggerPattern, corner_trigger, load_dataset, load_digits8, synthetic_blobs
from .env import AttackEnv, state_layer_names
from .flcore import METRIC_FIELDS, Federation, MetricWriter, build_federation, run
from .nn import ConfigurationError
from .rl import (Policy, TrainingError, alternating_train, load_policy, make_policy, policy_actions,
                 save_policy, simultaneous_train)

log = logging.getLogger("fedbackdoor")

THREADS_ENV = "FEDBACKDOOR_THREADS"
CONFIG_NAME = "config.toml"
METRICS_NAME = "metrics.csv"
CURVE_NAME = "training_curve.csv"


class RunExistsError(ConfigurationError):
    pass


# --- pipeline pieces shared with the test-suite ------------------------------

def load_data(cfg: ExperimentConfig) -> LabeledDataset:
    spec = cfg.data
    if spec.kind == "digits":
        return load_digits8(spec.augment, spec.seed)
    if spec.kind == "blobs":
        return synthetic_blobs(seed=spec.seed)
    return load_dataset(spec.path)


def make_trigger(cfg: ExperimentConfig, ds: LabeledDataset) -> TriggerPattern:
    t = cfg.trigger
    if ds.image_shape is None or len(ds.image_shape) != 2:
        raise ConfigurationError("trigger placement needs 2-D image inputs")
    return corner_trigger(ds.image_shape, t.source_class, t.target_class, rows=t.rows,
                          width=t.width, corner=t.corner, n_sub=t.n_sub, value=t.value)


def setup(cfg: ExperimentConfig) -> Federation:
    ds = load_data(cfg)
    return build_federation(cfg.fl, ds, make_trigger(cfg, ds), cfg.data.test_fraction)


def make_env(cfg: ExperimentConfig, fed: Federation) -> AttackEnv:
    """The attacker's simulator, seeded from the attackers' own clean data."""
    return AttackEnv(cfg.env, fed.attacker_data, fed.trigger, cfg.bounds)


def policy_paths(run_dir: Path, mode: str) -> list[Path]:
    names = ["policy_search", "policy_craft"] if mode == "alternating" else ["policy_joint"]
    return [run_dir / n for n in names]


def train_policies(cfg: ExperimentConfig, fed: Federation, run_dir: Path | None = None) -> list[Policy]:
    env = make_env(cfg, fed)
    obs_dim = env.reset(cfg.seed).vector().shape[0]
    hidden = cfg.rl.hyper.hidden
    ckpt_dir = None
    curve = None
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        curve_fh = open(run_dir / CURVE_NAME, "w", newline="")
        curve = csv.writer(curve_fh, lineterminator="\n")
        curve.writerow(["iteration", "role", "episode", "return", "length"])

    def on_episode(it, role, ep, ret, length):
        log.info("iteration %d %s episode %d return %.4f", it, role, ep, ret)
        if curve is not None:
            curve.writerow([it, role, ep, repr(ret), length])

    def checkpoint(phase, *pis):
        if ckpt_dir is None:
            return
        for pi in pis:
            if pi is not None:
                save_policy(pi, ckpt_dir / f"phase{phase}_{pi.role}")

    try:
        if cfg.rl.mode == "alternating":
            pi1 = make_policy("search", obs_dim, cfg.seed, cfg.bounds, hidden)
            pi2 = make_policy("craft", obs_dim, cfg.seed, cfg.bounds, hidden)
            pis = list(alternating_train(env, pi1, pi2, cfg.rl.iterations, cfg.rl.steps_per_phase,
                                         cfg.rl.hyper, cfg.seed, checkpoint, on_episode))
        else:
            pi = make_policy("joint", obs_dim, cfg.seed, cfg.bounds, hidden)
            steps = 2 * cfg.rl.iterations * cfg.rl.steps_per_phase
            pis = [simultaneous_train(env, pi, steps, cfg.rl.hyper, cfg.seed, checkpoint, on_episode)]
    finally:
        if curve is not None:
            curve_fh.close()
    if run_dir is not None:
        for pi, path in zip(pis, policy_paths(run_dir, cfg.rl.mode)):
            save_policy(pi, path)
    return pis


def load_policies(cfg: ExperimentConfig) -> list[Policy]:
    run_dir = Path(cfg.output_dir) / cfg.attack.policy_run
    snapshot = run_dir / CONFIG_NAME
    if not snapshot.exists():
        raise ConfigurationError(f"policy run {cfg.attack.policy_run!r} not found under {cfg.output_dir}")
    mode = config_mod.load(snapshot).rl.mode
    paths = policy_paths(run_dir, mode)
    missing = [str(p) for p in paths if not p.with_suffix(".json").exists()]
    if missing:
        raise ConfigurationError(f"missing policy checkpoint(s): {', '.join(missing)}")
    return [load_policy(p) for p in paths]


def make_attack(cfg: ExperimentConfig, fed: Federation, policies: list[Policy] | None = None):
    a = cfg.attack
    if a.kind == "none":
        return None
    if a.kind == "bfl":
        return BFL(a.rho)
    if a.kind == "dba":
        return DBA(a.rho)
    if a.kind == "pgd":
        return PGD(a.rho, a.radius)
    if a.kind == "neurotoxin":
        return Neurotoxin(a.rho, a.k_mask)
    split = cfg.env.attacker_eval_split
    if a.kind == "dwba_fixed":
        return DoubleWhammy(fixed_actions(*a.fixed_actions()), split, a.noise_sigma)
    policies = policies if policies is not None else load_policies(cfg)
    layers = state_layer_names(fed.net, cfg.env.state_layers)
    return DoubleWhammy(policy_actions(policies, cfg.fl, layers), split, a.noise_sigma)


def run_experiment(cfg: ExperimentConfig, fed: Federation | None = None,
                   policies: list[Policy] | None = None, metrics_path: Path | None = None):
    fed = fed if fed is not None else setup(cfg)
    attack = make_attack(cfg, fed, policies)
    writer = MetricWriter(metrics_path) if metrics_path is not None else None
    with writer if writer is not None else nullcontext():
        return run(fed, attack, window=cfg.window(),
                   callback=writer.write if writer is not None else None)


# --- subcommands ------------------------------------------------------------

def _new_run_dir(cfg: ExperimentConfig) -> Path:
    run_dir = Path(cfg.output_dir) / cfg.run_id
    if run_dir.exists():
        raise RunExistsError(f"run {cfg.run_id!r} already exists at {run_dir}; choose a new run_id")
    run_dir.mkdir(parents=True)
    (run_dir / CONFIG_NAME).write_text(config_mod.dumps(cfg))
    return run_dir


def cmd_train_policy(cfg: ExperimentConfig) -> Path:
    fed = setup(cfg)
    run_dir = _new_run_dir(cfg)
    train_policies(cfg, fed, run_dir)
    return run_dir


def cmd_run(cfg: ExperimentConfig) -> Path:
    fed = setup(cfg)
    policies = load_policies(cfg) if cfg.attack.kind == "dwba_rl" else None
    run_dir = _new_run_dir(cfg)
    run_experiment(cfg, fed, policies, run_dir / METRICS_NAME)
    return run_dir


def cmd_plotdata(metric: str, run_ids: list[str], output_dir: str, out=None) -> None:
    """Wide CSV: a round column plus one column per run, padded with empty cells."""
    if metric not in METRIC_FIELDS[1:]:
        raise ConfigurationError(f"metric must be one of {METRIC_FIELDS[1:]}, got {metric!r}")
    missing = [r for r in run_ids if not (Path(output_dir) / r / METRICS_NAME).exists()]
    if missing:
        raise ConfigurationError(f"no metrics for run(s): {', '.join(missing)}")
    columns = []
    for r in run_ids:
        with open(Path(output_dir) / r / METRICS_NAME, newline="") as fh:
            columns.append({int(row["round"]): row[metric] for row in csv.DictReader(fh)})
    rounds = sorted(set().union(*columns))
    w = csv.writer(out or sys.stdout, lineterminator="\n")
    w.writerow(["round", *run_ids])
    for t in rounds:
        w.writerow([t, *(col.get(t, "") for col in columns)])


def _threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedbackdoor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-policy", help="train attack policies in the simulated environment")
    p.add_argument("config")
    p = sub.add_parser("run", help="run federated training with the configured attack")
    p.add_argument("config")
    p = sub.add_parser("plotdata", help="merge one metric of several runs into a wide CSV")
    p.add_argument("metric")
    p.add_argument("run_ids", nargs="+")
    p.add_argument("--output-dir", default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads():
            if args.command == "plotdata":
                out_dir = os.environ.get(config_mod.OUTPUT_DIR_ENV) or args.output_dir or "runs"
                cmd_plotdata(args.metric, args.run_ids, out_dir)
                return 0
            cfg = config_mod.load(args.config)
            if args.command == "train-policy":
                path = cmd_train_policy(cfg)
            else:
                path = cmd_run(cfg)
            print(path)
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
