"""Offline policy learning in the penalised model MDP, plus online scoring."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import env as envs
from ..data import TransitionDataset
from ..uncertainty import HeuristicKind
from .buffer import ReplayBuffer
from .pmdp import PessimisticMDP, generate_rollouts
from .sac import SACAgent, SACConfig

Z_90 = 1.6448536269514722


@dataclass
class MOPOConfig:
    lam: float = 1.0
    horizon: int = 5
    heuristic: str = "ma"
    n_batches: int = 10_000
    rho_real: float = 0.05
    eval_every: int = 1000
    eval_episodes: int = 5
    rollout_starts: int = 400
    rollout_every: int = 250
    buffer_capacity: int = 100_000
    sac: SACConfig = field(default_factory=SACConfig)

    def __post_init__(self):
        if isinstance(self.sac, dict):
            self.sac = SACConfig(**self.sac)
        if not 0.0 <= self.rho_real <= 1.0:
            raise ValueError("rho_real must lie in [0, 1]")
        if not self.lam >= 0.0 or int(self.horizon) < 1:
            raise ValueError("lam must be >= 0 and horizon >= 1")
        HeuristicKind.parse(self.heuristic)
        if self.n_batches < 0 or self.eval_every < 1 or self.rollout_every < 1:
            raise ValueError("n_batches must be >= 0; eval_every and rollout_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sac"]["hidden"] = list(d["sac"]["hidden"])
        return d


@dataclass
class MOPOResult:
    agent: SACAgent
    best_return: float
    best_update: int
    curve: list
    rollout_log: list

    def to_dict(self) -> dict:
        return {
            "best_return": self.best_return,
            "best_update": self.best_update,
            "curve": [{"update": u, "return": r} for u, r in self.curve],
            "rollouts": self.rollout_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_online(agent, env_id: str, n_episodes: int, seed: int, start_states=None):
    """Mean and population std of undiscounted returns of the deterministic policy.

    ``agent`` may be a :class:`SACAgent` or a plain ``policy(states, rng)``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    policy = agent.policy_fn(deterministic=True) if hasattr(agent, "policy_fn") else agent
    returns = envs.batch_rollout_returns(env_id, policy, n_episodes, seed, start_states=start_states)
    if not np.all(np.isfinite(returns)):
        raise FloatingPointError("non-finite evaluation return")
    return float(returns.mean()), float(returns.std())


def normalized_score(ret, random_ref: float, expert_ref: float):
    if not (math.isfinite(random_ref) and math.isfinite(expert_ref)) or expert_ref <= random_ref:
        raise ValueError(f"degenerate references: random={random_ref}, expert={expert_ref}")
    return 100.0 * (np.asarray(ret, dtype=np.float64) - random_ref) / (expert_ref - random_ref)


def gaussian_ci(values, z: float = Z_90):
    """``(mean, half_width)`` with half width ``z * s / sqrt(n)`` (sample std)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(z * v.std(ddof=1) / math.sqrt(v.size))


def _mixed_batch(model_buf: ReplayBuffer, real: TransitionDataset, n: int, rho: float, rng):
    n_real = int(round(rho * n))
    n_model = n - n_real
    if len(model_buf) == 0:
        n_real, n_model = n, 0
    parts = []
    if n_model:
        parts.append(model_buf.sample(n_model, rng))
    if n_real:
        idx = rng.integers(0, len(real), size=n_real)
        parts.append((real.s[idx], real.a[idx], real.r[idx], real.s_next[idx], real.done[idx]))
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(5))


def mopo_train(dataset: TransitionDataset, model, env_id: str, config: MOPOConfig, seed: int, agent=None) -> MOPOResult:
    """SAC on a buffer of penalised model rollouts mixed with real transitions.

    A fresh batch of ``rollout_starts`` rollouts is generated before the first
    update and after every ``rollout_every`` updates. Every ``eval_every``
    updates the deterministic policy is scored on the true environment and
    the best-scoring snapshot is kept.
    """
    ss = np.random.SeedSequence(seed)
    init_rng, roll_rng, upd_rng, eval_rng = (np.random.default_rng(x) for x in ss.spawn(4))
    spec = envs.get_spec(env_id)
    agent = agent if agent is not None else SACAgent.for_env(env_id, config.sac, init_rng)
    if config.n_batches == 0:
        return MOPOResult(agent, float("nan"), 0, [], [])
    pmdp = PessimisticMDP.for_env(model, env_id, config.lam, config.heuristic, config.horizon)
    buf = ReplayBuffer(config.buffer_capacity, spec.state_dim, spec.action_dim)
    curve, log = [], []
    best_agent, best_ret, best_update = agent.copy(), -math.inf, 0
    policy = agent.policy_fn(deterministic=False)
    for k in range(config.n_batches):
        if k % config.rollout_every == 0:
            _, st = generate_rollouts(pmdp, policy, dataset.s, config.rollout_starts, roll_rng, buf)
            log.append({"update": k, **asdict(st), "truncation_rate": st.truncation_rate})
        agent.update(_mixed_batch(buf, dataset, config.sac.batch_size, config.rho_real, upd_rng), upd_rng)
        done_updates = k + 1
        if done_updates % config.eval_every == 0 or done_updates == config.n_batches:
            ret, _ = evaluate_online(agent, env_id, config.eval_episodes, int(eval_rng.integers(2**31)))
            curve.append((done_updates, ret))
            if ret > best_ret:
                best_ret, best_update, best_agent = ret, done_updates, agent.copy()
    return MOPOResult(best_agent, best_ret, best_update, curve, log)
