"""TD3 from scratch, plus the alternating two-policy training schedule."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attacks import CRAFT_DIM, SEARCH_DIM, ActionBounds
from .env import observe
from .nn import ModelParams, Network

log = logging.getLogger(__name__)

ROLES = ("search", "craft", "joint", "raw")
ACTION_DIMS = {"search": SEARCH_DIM, "craft": CRAFT_DIM, "joint": SEARCH_DIM + CRAFT_DIM}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TD3Hyper:
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    explore_noise: float = 0.1
    target_noise: float = 0.2
    noise_clip: float = 0.5
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    hidden: tuple[int, ...] = (256, 256)
    # 0: the action is concatenated with the observation at the critic input.
    # 1: it joins after the first hidden layer, so a wide observation cannot
    # drown it out.
    critic_action_layer: int = 0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise nn.ConfigurationError("tau must lie in (0, 1]")
        if self.policy_delay < 1:
            raise nn.ConfigurationError("policy_delay must be >= 1")
        if self.critic_action_layer not in (0, 1):
            raise nn.ConfigurationError("critic_action_layer must be 0 or 1")
        if self.critic_action_layer == 1 and len(self.hidden) < 2:
            raise nn.ConfigurationError("critic_action_layer = 1 needs at least two hidden layers")


# --- observation standardization --------------------------------------------

@dataclass
class RunningNorm:
    """Per-coordinate running mean/variance (Welford) for the leading ``dim`` features."""

    dim: int
    count: int = 0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, x: np.ndarray) -> None:
        if self.dim == 0:
            return
        x = x[: self.dim]
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim)
        return np.sqrt(self.m2 / self.count + 1e-8)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        if self.dim == 0 or self.count == 0:
            return obs
        head = np.clip((obs[..., : self.dim] - self.mean) / self.std, -10.0, 10.0)
        return np.concatenate([head, obs[..., self.dim:]], axis=-1)

    def copy(self) -> RunningNorm:
        return RunningNorm(self.dim, self.count, self.mean.copy(), self.m2.copy())


# --- policies ---------------------------------------------------------------

@dataclass
class Policy:
    role: str
    actor: Network
    bounds: ActionBounds = field(default_factory=ActionBounds)
    norm: RunningNorm | None = None

    @property
    def act_dim(self) -> int:
        return self.actor.n_out

    @property
    def obs_dim(self) -> int:
        return self.actor.n_in

    def raw(self, obs: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(obs)
        if self.norm is not None:
            x = self.norm(x)
        return nn.forward(self.actor, x)

    def decode(self, raw: np.ndarray):
        raw = np.clip(raw, -1.0, 1.0)
        if self.role == "search":
            return self.bounds.decode_search(raw)
        if self.role == "craft":
            return self.bounds.decode_craft(raw)
        if self.role == "joint":
            return (self.bounds.decode_search(raw[:SEARCH_DIM]),
                    self.bounds.decode_craft(raw[SEARCH_DIM:]))
        return raw

    def copy(self) -> Policy:
        return Policy(self.role, self.actor, self.bounds,
                      None if self.norm is None else self.norm.copy())


def make_policy(role: str, obs_dim: int, seed: int, bounds: ActionBounds | None = None,
                hidden=(256, 256), norm_dims: int | None = None, act_dim: int | None = None) -> Policy:
    """Fresh actor ``obs_dim -> hidden -> act_dim`` with tanh-squashed output.

    ``norm_dims`` leading observation features are standardized online
    (default: all but the trailing attacker-count feature).
    """
    if role not in ROLES:
        raise nn.ConfigurationError(f"unknown policy role {role!r}")
    act_dim = act_dim if act_dim is not None else ACTION_DIMS[role]
    actor = nn.mlp([obs_dim, *hidden, act_dim], np.random.default_rng([seed, 7, ROLES.index(role)]),
                   output="tanh", prefix="actor")
    nd = obs_dim - 1 if norm_dims is None else norm_dims
    return Policy(role, actor, bounds or ActionBounds(), RunningNorm(nd) if nd > 0 else None)


def act(policy: Policy, state, deterministic: bool = True,
        rng: np.random.Generator | None = None, noise: float = 0.1):
    """Decoded action for ``state`` (an AttackState or raw observation vector)."""
    obs = state.vector() if hasattr(state, "vector") else np.asarray(state, dtype=np.float64)
    raw = policy.raw(obs)[0]
    if not deterministic:
        rng = rng if rng is not None else np.random.default_rng()
        raw = np.clip(raw + rng.normal(0.0, noise, raw.shape), -1.0, 1.0)
    return policy.decode(raw)


# --- replay buffer ----------------------------------------------------------

class ReplayBuffer:
    """Ring buffer of transitions; storage grows geometrically up to ``capacity``."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int):
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self._alloc = 0
        self.size = 0
        self.pos = 0
        self.obs = np.zeros((0, obs_dim))
        self.act = np.zeros((0, act_dim))
        self.rew = np.zeros(0)
        self.next_obs = np.zeros((0, obs_dim))
        self.terminal = np.zeros(0)

    def _grow(self):
        new = min(self.capacity, max(1024, 2 * self._alloc))

        def pad(a, shape):
            out = np.zeros(shape)
            out[: len(a)] = a
            return out

        self.obs = pad(self.obs, (new, self.obs_dim))
        self.act = pad(self.act, (new, self.act_dim))
        self.rew = pad(self.rew, (new,))
        self.next_obs = pad(self.next_obs, (new, self.obs_dim))
        self.terminal = pad(self.terminal, (new,))
        self._alloc = new

    def add(self, obs, action, reward, next_obs, terminal) -> None:
        if self.pos >= self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self.pos
        self.obs[i] = obs
        self.act[i] = action
        self.rew[i] = reward
        self.next_obs[i] = next_obs
        self.terminal[i] = float(terminal)
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.terminal[idx]


# --- optimizer --------------------------------------------------------------

class Adam:
    """Adam with bias correction folded into the step size; moments updated in place."""

    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._tmp = np.zeros(n)
        self.t = 0

    def step(self, params: ModelParams, grad: np.ndarray) -> ModelParams:
        self.t += 1
        m, v, tmp = self.m, self.v, self._tmp
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1 - self.b2
        v += tmp
        c2 = np.sqrt(1 - self.b2 ** self.t)
        lr_t = self.lr * c2 / (1 - self.b1 ** self.t)
        np.sqrt(v, out=tmp)
        tmp += self.eps * c2
        np.divide(m, tmp, out=tmp)
        tmp *= lr_t
        return ModelParams(params.values - tmp, params.layout)


def soft_update(target: Network, online: Network, tau: float) -> Network:
    v = online.params.values - target.params.values
    v *= tau
    v += target.params.values
    return target.with_params(ModelParams(v, target.params.layout))


# --- critic -----------------------------------------------------------------

@dataclass(frozen=True)
class Critic:
    """Q(s, a) as one MLP on [s, a], or an observation encoder plus an MLP on [h(s), a]."""

    nets: tuple[Network, ...]

    @classmethod
    def build(cls, obs_dim: int, act_dim: int, hidden, rng, prefix: str, action_layer: int = 0) -> Critic:
        if action_layer == 0:
            return cls((nn.mlp([obs_dim + act_dim, *hidden, 1], rng, prefix=prefix),))
        enc = nn.mlp([obs_dim, hidden[0]], rng, output="relu", prefix=f"{prefix}s")
        head = nn.mlp([hidden[0] + act_dim, *hidden[1:], 1], rng, prefix=prefix)
        return cls((enc, head))

    def forward(self, s: np.ndarray, a: np.ndarray):
        """Q values of shape (n,) and the caches needed by :meth:`backward`."""
        if len(self.nets) == 1:
            q, cache = nn.forward_with_cache(self.nets[0], np.concatenate([s, a], axis=1))
            return q[:, 0], (cache, q)
        h, ecache = nn.forward_with_cache(self.nets[0], s)
        q, cache = nn.forward_with_cache(self.nets[1], np.concatenate([h, a], axis=1))
        return q[:, 0], (ecache, h, cache, q)

    def backward(self, caches, dq: np.ndarray, act_dim: int, need_params: bool = True):
        """Parameter gradients (one per net) and d/da for upstream ``dq`` of shape (n,)."""
        dq = dq[:, None]
        if len(self.nets) == 1:
            cache, q = caches
            grad, dx = nn.backward(self.nets[0], cache, q, dq, need_input_grad=True)
            return [grad], dx[:, -act_dim:]
        ecache, h, cache, q = caches
        grad_head, dx = nn.backward(self.nets[1], cache, q, dq, need_input_grad=True)
        grads = [grad_head]
        if need_params:
            grad_enc, _ = nn.backward(self.nets[0], ecache, h, dx[:, :-act_dim])
            grads.insert(0, grad_enc)
        return grads, dx[:, -act_dim:]

    def with_params(self, params) -> Critic:
        return Critic(tuple(n.with_params(p) for n, p in zip(self.nets, params)))

    def soft_update(self, online: Critic, tau: float) -> Critic:
        return Critic(tuple(soft_update(t, o, tau) for t, o in zip(self.nets, online.nets)))


# --- TD3 --------------------------------------------------------------------

class TD3:
    """Twin critics, target policy smoothing and delayed actor updates.

    The actor lives in ``self.policy``; critics, targets, optimizers and the
    replay buffer persist across calls to :func:`td3_train`.
    """

    def __init__(self, policy: Policy, hyper: TD3Hyper, seed: int):
        self.policy = policy
        self.hyper = hyper
        obs_dim, act_dim = policy.obs_dim, policy.act_dim
        rng = np.random.default_rng([seed, 11])
        self.critics = [Critic.build(obs_dim, act_dim, hyper.hidden, rng, f"q{i}", hyper.critic_action_layer)
                        for i in (1, 2)]
        self.critic_targets = list(self.critics)
        self.actor_target = policy.actor
        self.actor_opt = Adam(policy.actor.params.size, hyper.actor_lr)
        self.critic_opts = [[Adam(n.params.size, hyper.critic_lr) for n in c.nets] for c in self.critics]
        self.buffer = ReplayBuffer(obs_dim, act_dim, hyper.buffer_capacity)
        self.rng = np.random.default_rng([seed, 12])
        self.total_steps = 0
        self.n_updates = 0
        self.last_diag: dict = {}

    def _norm(self, obs):
        return self.policy.norm(obs) if self.policy.norm is not None else obs

    def update(self) -> dict:
        h = self.hyper
        obs, actions, rewards, next_obs, terminal = self.buffer.sample(h.batch, self.rng)
        s = self._norm(obs)
        s2 = self._norm(next_obs)
        n = s.shape[0]

        a2 = nn.forward(self.actor_target, s2)
        smooth = np.clip(self.rng.normal(0.0, h.target_noise, a2.shape), -h.noise_clip, h.noise_clip)
        a2 = np.clip(a2 + smooth, -1.0, 1.0)
        q1t = self.critic_targets[0].forward(s2, a2)[0]
        q2t = self.critic_targets[1].forward(s2, a2)[0]
        target = rewards + h.gamma * (1.0 - terminal) * np.minimum(q1t, q2t)

        act_dim = actions.shape[1]
        critic_loss = 0.0
        for i, critic in enumerate(self.critics):
            q, caches = critic.forward(s, actions)
            err = q - target
            critic_loss += float(np.mean(err * err))
            grads, _ = critic.backward(caches, 2.0 * err / n, act_dim)
            self.critics[i] = critic.with_params(
                [opt.step(net.params, g) for opt, net, g in zip(self.critic_opts[i], critic.nets, grads)])
        if not np.isfinite(critic_loss) or critic_loss > 1e6:
            raise TrainingError(
                f"critic loss diverged ({critic_loss:.3g}) after {self.n_updates} updates; "
                f"mean |target|={np.mean(np.abs(target)):.3g}, reward range "
                f"[{rewards.min():.3g}, {rewards.max():.3g}]")

        self.n_updates += 1
        diag = {"critic_loss": critic_loss, "q1_target": q1t, "q2_target": q2t, "target": target,
                "rewards": rewards, "terminal": terminal}
        if self.n_updates % h.policy_delay == 0:
            actor = self.policy.actor
            a, acache = nn.forward_with_cache(actor, s)
            q, caches = self.critics[0].forward(s, a)
            _, da = self.critics[0].backward(caches, np.full(n, -1.0 / n), act_dim, need_params=False)
            grad, _ = nn.backward(actor, acache, a, da)
            self.policy = replace(self.policy, actor=actor.with_params(self.actor_opt.step(actor.params, grad)))
            diag["actor_loss"] = float(-np.mean(q))
            self.actor_target = soft_update(self.actor_target, self.policy.actor, h.tau)
            self.critic_targets = [t.soft_update(c, h.tau)
                                   for t, c in zip(self.critic_targets, self.critics)]
        self.last_diag = diag
        return diag


# --- environments seen by the learner ---------------------------------------

class ToyEnv:
    """1-D matching task: observe x ~ U(-1, 1), reward -(x - a)^2."""

    obs_dim = 1
    act_dim = 1

    def __init__(self, episode_len: int = 50):
        self.episode_len = episode_len
        self.rng = np.random.default_rng(0)
        self.x = 0.0
        self.t = 0

    def reset(self, seed: int = 0) -> np.ndarray:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.x = float(self.rng.uniform(-1, 1))
        return np.array([self.x])

    def step(self, raw):
        a = float(np.clip(np.asarray(raw).ravel()[0], -1, 1))
        reward = -(self.x - a) ** 2
        self.x = float(self.rng.uniform(-1, 1))
        self.t += 1
        return np.array([self.x]), reward, self.t >= self.episode_len, {}


class PhaseEnv:
    """Vector interface over an AttackEnv for one policy role.

    The frozen ``partner`` policy supplies the complementary sub-action.
    """

    def __init__(self, env, role: str, partner: Policy | None, bounds: ActionBounds | None = None):
        if role in ("search", "craft") and partner is None:
            raise nn.ConfigurationError(f"training the {role} policy needs a frozen partner")
        self.env = env
        self.role = role
        self.partner = partner
        self.bounds = bounds or env.bounds
        self.state = None
        self.actions: list = []

    @property
    def act_dim(self) -> int:
        return ACTION_DIMS[self.role]

    def reset(self, seed: int = 0) -> np.ndarray:
        self.state = self.env.reset(seed)
        return self.state.vector()

    def full_action(self, raw):
        obs = self.state.vector()
        if self.role == "joint":
            return (self.bounds.decode_search(raw[:SEARCH_DIM]),
                    self.bounds.decode_craft(raw[SEARCH_DIM:]))
        other = act(self.partner, obs, deterministic=True)
        if self.role == "search":
            return self.bounds.decode_search(raw), other
        return other, self.bounds.decode_craft(raw)

    def step(self, raw):
        action = self.full_action(np.clip(raw, -1.0, 1.0))
        self.actions.append(action)
        self.state, reward, done, info = self.env.step(action)
        return self.state.vector(), reward, done, info


def _vector_env(env, policy: Policy, frozen_other: Policy | None):
    if hasattr(env, "attacker_data"):
        return PhaseEnv(env, policy.role, frozen_other, policy.bounds)
    return env


def td3_train(env, policy: Policy, frozen_other: Policy | None, steps: int,
              hyper: TD3Hyper | None = None, seed: int = 0, agent: TD3 | None = None,
              on_episode=None) -> Policy:
    """Train ``policy`` for ``steps`` environment steps and return the updated copy.

    Pass a persistent ``agent`` to continue with the same critics and replay
    buffer across calls.
    """
    hyper = hyper or TD3Hyper()
    if steps <= 0:
        return policy if agent is None else agent.policy
    agent = agent or TD3(policy.copy(), hyper, seed)
    venv = _vector_env(env, agent.policy, frozen_other)
    rng = np.random.default_rng([seed, 13, agent.total_steps])
    episode = 0
    obs = venv.reset(int(rng.integers(2**31)))
    ep_return, ep_len = 0.0, 0
    for _ in range(steps):
        if agent.policy.norm is not None:
            agent.policy.norm.update(obs)
        if agent.total_steps < hyper.warmup_steps:
            raw = rng.uniform(-1.0, 1.0, agent.policy.act_dim)
        else:
            raw = agent.policy.raw(obs)[0]
            raw = np.clip(raw + rng.normal(0.0, hyper.explore_noise, raw.shape), -1.0, 1.0)
        next_obs, reward, done, info = venv.step(raw)
        terminal = bool(info.get("numeric_failure", False))
        agent.buffer.add(obs, raw, reward, next_obs, terminal)
        agent.total_steps += 1
        ep_return += reward
        ep_len += 1
        if agent.total_steps >= hyper.warmup_steps and len(agent.buffer) > 0:
            agent.update()
        obs = next_obs
        if done:
            if on_episode is not None:
                on_episode(episode, ep_return, ep_len)
            log.debug("episode %d return %.4f", episode, ep_return)
            episode += 1
            ep_return, ep_len = 0.0, 0
            obs = venv.reset(int(rng.integers(2**31)))
    return agent.policy


def alternating_train(env, pi1: Policy, pi2: Policy, iterations: int, steps_per_phase: int,
                      hyper: TD3Hyper | None = None, seed: int = 0, checkpoint=None,
                      on_episode=None) -> tuple[Policy, Policy]:
    """Train the search policy with crafting frozen, then the reverse, ``iterations`` times."""
    if iterations < 1:
        raise nn.ConfigurationError("iterations must be >= 1")
    hyper = hyper or TD3Hyper()
    if steps_per_phase <= 0:
        return pi1, pi2
    agents = {"search": TD3(pi1.copy(), hyper, seed), "craft": TD3(pi2.copy(), hyper, seed + 1)}
    for it in range(iterations):
        pi1 = td3_train(env, pi1, pi2, steps_per_phase, hyper, seed, agents["search"],
                        _tag(on_episode, it, "search"))
        if checkpoint is not None:
            checkpoint(2 * it, pi1, pi2)
        pi2 = td3_train(env, pi2, pi1, steps_per_phase, hyper, seed + 1, agents["craft"],
                        _tag(on_episode, it, "craft"))
        if checkpoint is not None:
            checkpoint(2 * it + 1, pi1, pi2)
    return pi1, pi2


def simultaneous_train(env, pi_joint: Policy, steps: int, hyper: TD3Hyper | None = None,
                       seed: int = 0, checkpoint=None, on_episode=None) -> Policy:
    """One TD3 run over the joint six-dimensional action."""
    pi = td3_train(env, pi_joint, None, steps, hyper, seed,
                   on_episode=_tag(on_episode, 0, pi_joint.role))
    if checkpoint is not None:
        checkpoint(0, pi, None)
    return pi


def _tag(cb, iteration, role):
    if cb is None:
        return None
    return lambda ep, ret, length: cb(iteration, role, ep, ret, length)


def evaluate_policy(env, policy: Policy, episodes: int = 5, seed: int = 10_000) -> float:
    """Mean per-step reward of the deterministic policy."""
    total, count = 0.0, 0
    for ep in range(episodes):
        obs = env.reset(seed + ep)
        done = False
        while not done:
            obs, r, done, _ = env.step(policy.raw(obs)[0])
            total += r
            count += 1
    return total / max(count, 1)


def policy_actions(policies: Sequence[Policy], fl_cfg, layers: Sequence[str]):
    """Action function for :class:`~fedbackdoor.attacks.DoubleWhammy` driven by trained policies.

    ``policies`` is either ``(search, craft)`` or a single joint policy. The
    observation matches the simulated environment: the sampled attacker count
    is reported as 0 in round 0.
    """
    policies = list(policies)

    def action_fn(w, sample, round_):
        n = len(sample.attackers_selected) if round_ > 0 else 0
        state = observe(w, n, fl_cfg, layers)
        if len(policies) == 1:
            return act(policies[0], state)
        return act(policies[0], state), act(policies[1], state)

    return action_fn


# --- persistence ------------------------------------------------------------

def save_policy(policy: Policy, path) -> None:
    """Actor weights as FGNN plus a JSON sidecar with decoding table and normalizer."""
    path = Path(path)
    nn.save_params(policy.actor.params, path.with_suffix(".fgnn"))
    sizes = [layer.n_in for layer in policy.actor.dense_layers()] + [policy.act_dim]
    meta = {"role": policy.role, "sizes": sizes,
            "bounds": {k: list(v) for k, v in policy.bounds.__dict__.items()}}
    if policy.norm is not None:
        d = policy.norm.dim
        stats = ModelParams(np.concatenate([policy.norm.mean, policy.norm.m2]),
                            (("norm.mean", (d,)), ("norm.m2", (d,))))
        nn.save_params(stats, path.with_suffix(".norm.fgnn"))
        meta["norm"] = {"dim": d, "count": policy.norm.count}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_policy(path) -> Policy:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    params = nn.load_params(path.with_suffix(".fgnn"))
    template = nn.mlp(meta["sizes"], np.random.default_rng(0), output="tanh", prefix="actor")
    actor = template.with_params(params)
    bounds = ActionBounds(**{k: tuple(v) for k, v in meta["bounds"].items()})
    norm = None
    if "norm" in meta:
        stats = nn.load_params(path.with_suffix(".norm.fgnn"))
        norm = RunningNorm(meta["norm"]["dim"], meta["norm"]["count"],
                           stats.view("norm.mean").copy(), stats.view("norm.m2").copy())
    return Policy(meta["role"], actor, bounds, norm)
