import json
from dataclasses import replace

import numpy as np
import pytest

from fedbackdoor import nn
from fedbackdoor.attacks import DoubleWhammy, LocalSearchAction, ModelCraftAction
from fedbackdoor.env import AttackEnv, EnvConfig, dump_episode, return_of, simulated_federation
from fedbackdoor.flcore import run, run_round, subsample
from fedbackdoor.nn import ConfigurationError

A1 = LocalSearchAction(0.5, 32, 2, 0.1)
A2 = ModelCraftAction(0.2, 0.5)


@pytest.fixture
def env_cfg(small_cfg):
    return EnvConfig(fl=small_cfg, episode_rounds=6)


@pytest.fixture
def env(env_cfg, small_fed):
    return AttackEnv(env_cfg, small_fed.attacker_data, small_fed.trigger)


def test_reset_is_deterministic(env):
    a, b = env.reset(3), env.reset(3)
    assert a.vector().tobytes() == b.vector().tobytes()
    assert a.n_attackers_sampled == 0
    assert not np.array_equal(env.reset(4).layer_view, a.layer_view)


def test_layer_view_is_last_two_hidden_layers(env):
    s = env.reset(0)
    assert env.layers == ("fc1", "fc2")
    assert s.layer_view.shape == (64 * 16 + 16 + 16 * 8 + 8,)
    assert env.state_dim == s.layer_view.shape[0] + 1


def test_state_layers_configurable(env_cfg, small_fed):
    env = AttackEnv(replace(env_cfg, state_layers=("fc2",)), small_fed.attacker_data, small_fed.trigger)
    assert env.reset(0).layer_view.shape == (16 * 8 + 8,)


def test_rewards_zero_without_attackers_and_never_positive(env):
    env.reset(0)
    cfg = env.fed.cfg
    for t in range(6):
        sampled = subsample(cfg, t).attackers_selected
        s, r, done, info = env.step((A1, A2))
        assert r <= 0
        if not sampled:
            assert r == 0.0
        assert s.n_attackers_sampled == len(subsample(cfg, t + 1).attackers_selected)
        assert done == (t == 5)


def test_lambda_one_rewards_clean_loss_only(env_cfg, small_fed):
    cfg = replace(env_cfg, fl=replace(env_cfg.fl, lam=1.0))
    env = AttackEnv(cfg, small_fed.attacker_data, small_fed.trigger)
    env.reset(0)
    w = env.w
    model = env.fed.net.with_params(w)
    expected = -nn.cross_entropy(nn.forward(model, env.fed.test.samples), env.fed.test.labels)
    assert env.reward_of(w) == pytest.approx(expected, rel=1e-12)


def test_step_before_reset(env):
    with pytest.raises(RuntimeError):
        env.step((A1, A2))


def test_insufficient_attacker_data(env_cfg, small_fed):
    tiny = [c.subset(np.arange(2)) for c in small_fed.attacker_data]
    with pytest.raises(ConfigurationError):
        AttackEnv(env_cfg, tiny, small_fed.trigger).reset(0)


def test_numeric_failure_ends_episode(env):
    env.reset(0)
    t = next(t for t in range(30) if subsample(env.fed.cfg, t).attackers_selected)
    env.t = t
    s, r, done, info = env.step((LocalSearchAction(1.0, 16, 5, 1e300), A2))
    assert done and info["numeric_failure"]
    assert r == pytest.approx(-10 * np.log(10))


def test_env_matches_server_loop(env_cfg, small_fed):
    """Same seeds: stepping the env reproduces a direct run of the server loop."""
    actions = [(LocalSearchAction(0.2 + 0.1 * t, 16 + 8 * t, 1 + t % 3, 0.05 * (t + 1)),
                ModelCraftAction(0.1 * t, 0.15 * t)) for t in range(6)]
    env = AttackEnv(env_cfg, small_fed.attacker_data, small_fed.trigger)
    env.reset(11)
    env_w, env_r = [], []
    for a in actions:
        _, r, _, _ = env.step(a)
        env_w.append(env.w.values.tobytes())
        env_r.append(r)

    fed = simulated_federation(env_cfg, small_fed.attacker_data, small_fed.trigger, 11)
    attack = DoubleWhammy(lambda w, sample, t: actions[t])
    _, recs = run(fed, attack, rounds=6)
    fl_w = []
    w = fed.initial_params()
    for t in range(6):
        w, _ = run_round(fed, w, t, attack)
        fl_w.append(w.values.tobytes())
    assert env_w == fl_w
    assert env_r == [rec.reward for rec in recs]


def test_return_of():
    assert return_of([0.0] * 5, 0.9) == 0.0
    r, g, T = -0.3, 0.99, 40
    assert return_of([r] * T, g) == pytest.approx(r * (1 - g ** T) / (1 - g), rel=1e-12)


def test_env_config_validation(small_cfg):
    with pytest.raises(ConfigurationError):
        EnvConfig(fl=small_cfg, gamma=1.0)
    with pytest.raises(ConfigurationError):
        EnvConfig(fl=small_cfg, episode_rounds=0)


def test_dump_episode(env, tmp_path):
    s = env.reset(0)
    s2, r, _, _ = env.step((A1, A2))
    dump_episode(tmp_path / "ep.jsonl", [(0, s, [0.1, 0.2], r), (1, s2, [0.3], 0.0)])
    lines = [json.loads(x) for x in (tmp_path / "ep.jsonl").read_text().splitlines()]
    assert [x["round"] for x in lines] == [0, 1] and len(lines[0]["state_hash"]) == 16
