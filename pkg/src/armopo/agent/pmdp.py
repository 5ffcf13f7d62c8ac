"""Uncertainty-penalised surrogate MDP and short model rollouts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..uncertainty import HeuristicKind, check_compatible, from_moments
from .buffer import ReplayBuffer


class NonFiniteModelOutput(FloatingPointError):
    def __init__(self, rows):
        self.rows = np.asarray(rows)
        super().__init__(f"model produced non-finite samples for {self.rows.size} rows (first: {self.rows[:5].tolist()})")


@dataclass
class PessimisticMDP:
    """Model dynamics with reward ``r̂ - lam * û(s, a)`` and a known termination test."""

    model: object
    lam: float
    heuristic: HeuristicKind
    termination_fn: Callable[[np.ndarray], np.ndarray]
    horizon: int = 1

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if int(self.horizon) < 1:
            raise ValueError("rollout horizon must be >= 1")
        self.horizon = int(self.horizon)
        n_members = len(getattr(self.model, "members", [None]))
        self.heuristic = check_compatible(self.heuristic, n_members)

    @classmethod
    def for_env(cls, model, env_id: str, lam: float, heuristic, horizon: int = 1) -> "PessimisticMDP":
        from .. import env as envs

        return cls(model, lam, heuristic, lambda s: envs.termination_batch(env_id, s), horizon)


def pmdp_step(pmdp: PessimisticMDP, s, a, rng, strict: bool = True):
    """Sample one penalised transition per row.

    Returns ``(s_next, r_tilde, done, info)`` with ``info`` holding the raw
    reward, the penalty and a boolean ``valid`` mask. With ``strict`` a
    non-finite sample raises :class:`NonFiniteModelOutput`; otherwise the
    offending rows are flagged invalid.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite state or action")
    s_next, r_hat, moments = pmdp.model.sample_with_moments(s, a, rng)
    u = from_moments(pmdp.heuristic, moments)
    r_tilde = r_hat - pmdp.lam * u
    valid = np.all(np.isfinite(s_next), axis=1) & np.isfinite(r_tilde)
    if strict and not valid.all():
        raise NonFiniteModelOutput(np.flatnonzero(~valid))
    done = np.zeros(len(s), dtype=bool)
    done[valid] = pmdp.termination_fn(s_next[valid])
    return s_next, r_tilde, done, {"r_hat": r_hat, "penalty": u, "valid": valid}


@dataclass
class RolloutStats:
    n_starts: int
    n_transitions: int
    n_terminated: int
    n_rejected: int
    mean_reward: float
    mean_penalty: float

    @property
    def truncation_rate(self) -> float:
        return self.n_terminated / self.n_starts if self.n_starts else 0.0


def generate_rollouts(pmdp: PessimisticMDP, policy, start_pool, n_starts: int, rng, buffer: ReplayBuffer | None = None):
    """Roll ``n_starts`` uniformly drawn starts for up to ``pmdp.horizon`` steps.

    ``policy(states, rng)`` maps a batch of states to actions. Rollouts stop
    at the first terminal state; rows with non-finite samples are dropped.
    Returns ``(transitions, stats)`` where ``transitions`` is a tuple
    ``(s, a, r_tilde, s_next, done)``; they are also appended to ``buffer``.
    """
    pool = np.asarray(start_pool, dtype=np.float64)
    if len(pool) == 0:
        raise ValueError("empty start pool")
    states = pool[rng.integers(0, len(pool), size=n_starts)]
    out = {k: [] for k in ("s", "a", "r", "s_next", "done", "penalty")}
    n_rejected = n_terminated = 0
    for _ in range(pmdp.horizon):
        if len(states) == 0:
            break
        actions = policy(states, rng)
        s_next, r, done, info = pmdp_step(pmdp, states, actions, rng, strict=False)
        ok = info["valid"]
        n_rejected += int((~ok).sum())
        for key, val in (("s", states), ("a", actions), ("r", r), ("s_next", s_next), ("done", done),
                         ("penalty", info["penalty"])):
            out[key].append(val[ok])
        n_terminated += int(done[ok].sum())
        keep = ok & ~done
        states = s_next[keep]
    ds, da = pool.shape[1], pmdp.model.action_dim
    cat = {k: np.concatenate(v) if v else np.zeros((0,)) for k, v in out.items()}
    trans = (
        cat["s"].reshape(-1, ds),
        cat["a"].reshape(-1, da),
        cat["r"].reshape(-1),
        cat["s_next"].reshape(-1, ds),
        cat["done"].reshape(-1).astype(bool),
    )
    if buffer is not None and len(trans[2]):
        buffer.add_batch(*trans)
    n = len(trans[2])
    stats = RolloutStats(
        n_starts=n_starts,
        n_transitions=n,
        n_terminated=n_terminated,
        n_rejected=n_rejected,
        mean_reward=float(np.mean(trans[2])) if n else float("nan"),
        mean_penalty=float(np.mean(cat["penalty"])) if n else float("nan"),
    )
    return trans, stats
