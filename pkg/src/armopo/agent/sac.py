"""Soft actor-critic on top of :mod:`armopo.nnet`.

The actor is a :class:`~armopo.nnet.DenseNet` whose two heads give the mean
and log standard deviation of a Gaussian over pre-squash actions ``u``;
actions are ``center + scale * tanh(u)``. Critics are twin
:class:`~armopo.nnet.Mlp` Q-networks with Polyak-averaged targets. The
entropy temperature is tuned towards ``-action_dim``.

All gradients are derived by hand; see :meth:`SACAgent.update`.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import env as envs
from ..nnet import AdamState, DenseNet, Mlp, adam_step, load_checkpoint, save_checkpoint
from .buffer import ReplayBuffer

LOG_2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SACConfig:
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "swish"
    lr: float = 3e-4
    tau: float = 0.005
    gamma: float = 0.99
    batch_size: int = 256
    init_alpha: float = 1.0
    buffer_capacity: int = 100_000
    start_steps: int = 1000
    eval_every: int = 1000
    eval_episodes: int = 5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


def _softplus(x):
    return np.logaddexp(0.0, x)


class SACAgent:
    def __init__(self, state_dim, action_dim, action_low, action_high, config: SACConfig, rng):
        self.config = config
        self.state_dim = state_dim
        self.action_dim = action_dim
        low = np.asarray(action_low, dtype=np.float64)
        high = np.asarray(action_high, dtype=np.float64)
        self.center = (high + low) / 2.0
        self.scale = (high - low) / 2.0
        self.gamma = config.gamma
        self.tau = config.tau
        self.target_entropy = -float(action_dim)

        hid = config.hidden
        self.policy = DenseNet((state_dim,) + hid, action_dim, activation=config.activation)
        self.qnet = Mlp((state_dim + action_dim,) + hid, 1, activation=config.activation)
        self.pi_params = self.policy.init_params(rng)
        self.q1 = self.qnet.init_params(rng)
        self.q2 = self.qnet.init_params(rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = math.log(config.init_alpha)
        self._pi_opt = AdamState(self.policy.n_params, lr=config.lr)
        self._q1_opt = AdamState(self.qnet.n_params, lr=config.lr)
        self._q2_opt = AdamState(self.qnet.n_params, lr=config.lr)
        self._alpha_opt = AdamState(1, lr=config.lr)
        self.n_updates = 0

    @classmethod
    def for_env(cls, env_id: str, config: SACConfig, rng):
        spec = envs.get_spec(env_id)
        return cls(spec.state_dim, spec.action_dim, spec.low, spec.high, config, rng)

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def copy(self) -> "SACAgent":
        return copy.deepcopy(self)

    def _squash(self, u):
        return self.center + self.scale * np.tanh(u)

    def _sample(self, s, rng):
        """Reparameterised draw; returns ``(action, log_prob, u, eps, mu, log_std, cache)``."""
        mu, log_std, cache = self.policy.forward(self.pi_params, s, return_cache=True)
        eps = rng.standard_normal(mu.shape)
        u = mu + np.exp(log_std) * eps
        log_prob = np.sum(
            -0.5 * eps * eps - 0.5 * LOG_2PI - log_std - np.log(self.scale) - 2.0 * (LOG_2 - u - _softplus(-2.0 * u)),
            axis=-1,
        )
        return self._squash(u), log_prob, u, eps, mu, log_std, cache

    def act(self, s, rng=None, deterministic: bool = False):
        s = np.asarray(s, dtype=np.float64)
        mu, log_std = self.policy.forward(self.pi_params, s)
        if deterministic:
            return self._squash(mu)
        return self._squash(mu + np.exp(log_std) * rng.standard_normal(mu.shape))

    def policy_fn(self, deterministic: bool = False):
        agent = self

        def policy(state, rng):
            return agent.act(state, rng, deterministic=deterministic)

        return policy

    def q_values(self, s, a, target: bool = False):
        x = np.concatenate([s, a], axis=-1)
        p1, p2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return self.qnet.forward(p1, x)[..., 0], self.qnet.forward(p2, x)[..., 0]

    def update(self, batch, rng):
        """One SAC step on ``batch = (s, a, r, s_next, done)``.

        Critic target: ``r + γ(1-d)(min Q_targ(s', a') - α log π(a'|s'))``.
        Actor loss: ``mean(α log π(a|s) - min Q(s, a))`` with ``a`` drawn by
        reparameterisation. Temperature loss: ``-log α · mean(log π + H*)``.
        """
        s, a, r, s2, d = batch
        n = s.shape[0]
        alpha = self.alpha

        a2, logp2, *_ = self._sample(s2, rng)
        tq1, tq2 = self.q_values(s2, a2, target=True)
        y = r + self.gamma * (1.0 - d.astype(np.float64)) * (np.minimum(tq1, tq2) - alpha * logp2)

        x = np.concatenate([s, a], axis=1)
        q_losses = []
        for name in ("q1", "q2"):
            params = getattr(self, name)
            q, cache = self.qnet.forward(params, x, return_cache=True)
            err = q[:, 0] - y
            q_losses.append(0.5 * float(np.mean(err * err)))
            grad, _ = self.qnet.backward_outputs(params, cache, (err / n)[:, None])
            setattr(self, name, adam_step(getattr(self, f"_{name}_opt"), params, grad))

        act, logp, u, eps, mu, log_std, pcache = self._sample(s, rng)
        xa = np.concatenate([s, act], axis=1)
        q1, c1 = self.qnet.forward(self.q1, xa, return_cache=True)
        q2, c2 = self.qnet.forward(self.q2, xa, return_cache=True)
        use1 = (q1[:, 0] <= q2[:, 0])[:, None]
        qmin = np.where(use1, q1, q2)[:, 0]
        pi_loss = float(np.mean(alpha * logp - qmin))
        _, dx1 = self.qnet.backward_outputs(self.q1, c1, np.where(use1, 1.0, 0.0))
        _, dx2 = self.qnet.backward_outputs(self.q2, c2, np.where(use1, 0.0, 1.0))
        dq_da = (dx1 + dx2)[:, self.state_dim :]
        t = np.tanh(u)
        # d/du of [α log π - Qmin] with ε held fixed
        dl_du = (alpha * 2.0 * t - dq_da * self.scale * (1.0 - t * t)) / n
        dl_dmu = dl_du
        dl_dlogstd = dl_du * np.exp(log_std) * eps - alpha / n
        pgrad, _ = self.policy.backward_outputs(self.pi_params, pcache, dl_dmu, dl_dlogstd)
        self.pi_params = adam_step(self._pi_opt, self.pi_params, pgrad)

        alpha_grad = np.array([-float(np.mean(logp + self.target_entropy))])
        self.log_alpha = float(adam_step(self._alpha_opt, np.array([self.log_alpha]), alpha_grad)[0])

        self.q1_target = (1.0 - self.tau) * self.q1_target + self.tau * self.q1
        self.q2_target = (1.0 - self.tau) * self.q2_target + self.tau * self.q2
        self.n_updates += 1
        losses = {"q1": q_losses[0], "q2": q_losses[1], "pi": pi_loss, "alpha": alpha}
        if not all(math.isfinite(v) for v in losses.values()):
            raise FloatingPointError(f"non-finite SAC losses at update {self.n_updates}: {losses}")
        return losses

    def save(self, directory) -> None:
        """Write policy and critics in the network checkpoint format."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "log_alpha": self.log_alpha,
            "n_updates": self.n_updates,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
        }
        save_checkpoint(d / "policy.ckpt", self.policy, self.pi_params, meta)
        for name in ("q1", "q2", "q1_target", "q2_target"):
            save_checkpoint(d / f"{name}.ckpt", self.qnet, getattr(self, name))

    @classmethod
    def load(cls, directory) -> "SACAgent":
        d = Path(directory)
        policy, pi_params, meta = load_checkpoint(d / "policy.ckpt")
        cfg = SACConfig(**meta["config"])
        center, scale = np.asarray(meta["center"]), np.asarray(meta["scale"])
        agent = cls(policy.in_dim, policy.out_dim, center - scale, center + scale, cfg, np.random.default_rng(0))
        agent.pi_params = pi_params
        for name in ("q1", "q2", "q1_target", "q2_target"):
            _, p, _ = load_checkpoint(d / f"{name}.ckpt")
            setattr(agent, name, p)
        agent.log_alpha = meta["log_alpha"]
        agent.n_updates = meta["n_updates"]
        return agent


@dataclass
class OnlineRun:
    agent: SACAgent
    steps: int
    reached: bool
    episode_returns: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)
    record: dict = field(default_factory=dict)

    def replay_dataset(self, spec, regime: str):
        """Every transition seen during the run, with per-episode policy versions."""
        from ..data import TransitionDataset

        rec = self.record
        n = self.steps
        return TransitionDataset(
            spec=spec,
            regime=regime,
            s=rec["s"][:n],
            a=rec["a"][:n],
            r=rec["r"][:n],
            s_next=rec["s_next"][:n],
            done=rec["done"][:n],
            episode_lengths=tuple(rec["episode_lengths"]),
            behavior_meta={"policy": "sac_online_replay", "policy_versions": list(rec["policy_versions"])},
        )


def train_online(
    env_id: str,
    config: SACConfig,
    total_steps: int,
    seed: int,
    stop_return: float | None = None,
    moving_average: int = 10,
    keep_best: bool = True,
    target_return: float | None = None,
):
    """Train SAC on the true environment, one update per environment step.

    With ``stop_return`` the run stops as soon as the moving average of the
    last ``moving_average`` training-episode returns reaches it. Otherwise it
    runs ``total_steps`` and (with ``keep_best``) returns the snapshot with the
    best deterministic evaluation return.

    With ``target_return`` the stochastic policy is scored every
    ``eval_every`` steps and the snapshot whose score is closest to the target
    is returned; the run stops at the first score at or above the target.
    """
    spec = envs.get_spec(env_id)
    ss = np.random.SeedSequence(seed)
    init_rng, act_rng, upd_rng, reset_rng = (np.random.default_rng(x) for x in ss.spawn(4))
    agent = SACAgent.for_env(env_id, config, init_rng)
    buf = ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim)
    rec = {
        "s": np.empty((total_steps, spec.state_dim)),
        "a": np.empty((total_steps, spec.action_dim)),
        "r": np.empty(total_steps),
        "s_next": np.empty((total_steps, spec.state_dim)),
        "done": np.zeros(total_steps, dtype=bool),
        "episode_lengths": [],
        "policy_versions": [],
    }
    returns, curve = [], []
    best_agent, best_eval, best_gap = None, -math.inf, math.inf
    state = envs.reset(env_id, int(reset_rng.integers(2**31)))
    rec["policy_versions"].append(0)
    ep_ret, ep_len, reached, t = 0.0, 0, False, 0
    for t in range(1, total_steps + 1):
        if t <= config.start_steps:
            action = act_rng.uniform(spec.low, spec.high)
        else:
            action = agent.act(state, act_rng)
        res = envs.step(env_id, state, action)
        i = t - 1
        rec["s"][i], rec["a"][i], rec["r"][i] = state, action, res.reward
        rec["s_next"][i], rec["done"][i] = res.next_state, res.done
        buf.add_batch(state, action, res.reward, res.next_state, res.done)
        ep_ret += res.reward
        ep_len += 1
        state = res.next_state
        if t > config.start_steps and len(buf) >= config.batch_size:
            agent.update(buf.sample(config.batch_size, upd_rng), upd_rng)
        if res.done or ep_len >= spec.horizon:
            returns.append(ep_ret)
            rec["episode_lengths"].append(ep_len)
            ep_ret, ep_len = 0.0, 0
            state = envs.reset(env_id, int(reset_rng.integers(2**31)))
            if stop_return is not None and len(returns) >= moving_average:
                if np.mean(returns[-moving_average:]) >= stop_return:
                    reached = True
                    break
            rec["policy_versions"].append(agent.n_updates)
        if target_return is not None and t > config.start_steps and t % config.eval_every == 0:
            score = float(
                envs.batch_rollout_returns(
                    env_id, agent.policy_fn(False), config.eval_episodes, int(reset_rng.integers(2**31))
                ).mean()
            )
            curve.append((t, score))
            if best_agent is None or abs(score - target_return) < best_gap:
                best_gap, best_agent = abs(score - target_return), agent.copy()
            if score >= target_return:
                reached = True
                break
        elif stop_return is None and keep_best and t % config.eval_every == 0:
            score = float(
                envs.batch_rollout_returns(
                    env_id, agent.policy_fn(True), config.eval_episodes, int(reset_rng.integers(2**31))
                ).mean()
            )
            curve.append((t, score))
            if score > best_eval:
                best_eval, best_agent = score, agent.copy()
    if ep_len:
        rec["episode_lengths"].append(ep_len)
    rec["policy_versions"] = rec["policy_versions"][: len(rec["episode_lengths"])]
    final = best_agent if best_agent is not None else agent
    return OnlineRun(final, t, reached, returns, curve, rec)
