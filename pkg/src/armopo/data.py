"""Offline transition datasets: collection, regimes, standardisation, files.

Binary dataset layout (all little-endian)::

    bytes 0..3    magic b"ARMD"
    bytes 4..7    uint32 header length H
    bytes 8..8+H  UTF-8 JSON header (sorted keys)
    then N packed records, each
        s       d_s      float64
        a       act_dim  float64
        r       1        float64
        s_next  d_s      float64
        done    1        uint8

The header carries ``format_version``, the environment spec, ``regime``,
``behavior_meta``, ``n``, ``state_dim``, ``action_dim`` and
``episode_lengths`` (transitions are stored in collection order, so episode
boundaries are run lengths).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import env as envs
from .env import EnvSpec

REGIMES = ("random", "medium", "medium_replay", "medium_expert")
STD_FLOOR = 1e-8
FORMAT_VERSION = 1
_MAGIC = b"ARMD"


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class TransitionDataset:
    """Column-stored transitions. Arrays are treated as immutable."""

    spec: EnvSpec
    regime: str
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    episode_lengths: tuple[int, ...] = ()
    behavior_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.s.shape[0]
        if n == 0:
            raise ValueError("dataset must be non-empty")
        ds, da = self.spec.state_dim, self.spec.action_dim
        if self.s.shape != (n, ds) or self.s_next.shape != (n, ds):
            raise ValueError("state arrays do not match the EnvSpec")
        if self.a.shape != (n, da):
            raise ValueError("action array does not match the EnvSpec")
        if self.r.shape != (n,) or self.done.shape != (n,):
            raise ValueError("reward/done arrays must be 1-D of length N")
        for name in ("s", "a", "r", "s_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if self.episode_lengths and sum(self.episode_lengths) != n:
            raise ValueError("episode lengths do not sum to N")
        if self.regime not in REGIMES and self.regime != "custom":
            raise ValueError(f"unknown regime {self.regime!r}")

    def __len__(self) -> int:
        return self.s.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))

    @property
    def targets(self) -> np.ndarray:
        """Model outputs in raw space: next-state columns, then reward."""
        return np.concatenate([self.s_next, self.r[:, None]], axis=1)

    def subset(self, idx, regime: str | None = None) -> "TransitionDataset":
        idx = np.asarray(idx)
        return TransitionDataset(
            spec=self.spec,
            regime=regime or self.regime,
            s=self.s[idx],
            a=self.a[idx],
            r=self.r[idx],
            s_next=self.s_next[idx],
            done=self.done[idx],
            behavior_meta=dict(self.behavior_meta, subset_of=self.regime),
        )

    def episodes(self) -> list[tuple[int, int]]:
        """``(start, stop)`` index ranges of the stored episodes."""
        lengths = self.episode_lengths or (len(self),)
        bounds = np.concatenate([[0], np.cumsum(lengths)])
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def traces(self, min_length: int) -> list["Trace"]:
        """Contiguous ground-truth traces with at least ``min_length`` steps."""
        out = []
        for a, b in self.episodes():
            if b - a < min_length:
                continue
            seg = slice(a, b)
            if not np.allclose(self.s[a + 1 : b], self.s_next[a : b - 1]):
                continue
            out.append(Trace(self.s[seg], self.a[seg], self.r[seg], self.s_next[seg]))
        return out


@dataclass(frozen=True)
class Trace:
    """Consecutive transitions ``s[t] -> s_next[t]`` with ``s[t+1] == s_next[t]``."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


def concat(datasets, regime: str, behavior_meta: dict | None = None) -> TransitionDataset:
    first = datasets[0]
    return TransitionDataset(
        spec=first.spec,
        regime=regime,
        s=np.concatenate([d.s for d in datasets]),
        a=np.concatenate([d.a for d in datasets]),
        r=np.concatenate([d.r for d in datasets]),
        s_next=np.concatenate([d.s_next for d in datasets]),
        done=np.concatenate([d.done for d in datasets]),
        episode_lengths=tuple(l for d in datasets for l in (d.episode_lengths or (len(d),))),
        behavior_meta=behavior_meta or {},
    )


def collect(env_id: str, policy, n_steps: int, seed: int, regime: str = "custom", behavior_meta=None):
    """Roll ``policy(state, rng) -> action`` for exactly ``n_steps`` transitions.

    Episodes reset on termination or at the horizon; the last episode may be
    cut short by the step budget.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    spec = envs.get_spec(env_id)
    ss = np.random.SeedSequence(seed)
    act_rng = np.random.default_rng(ss.spawn(1)[0])
    reset_seeds = np.random.default_rng(ss.spawn(1)[0])
    S = np.empty((n_steps, spec.state_dim))
    A = np.empty((n_steps, spec.action_dim))
    R = np.empty(n_steps)
    S2 = np.empty((n_steps, spec.state_dim))
    D = np.zeros(n_steps, dtype=bool)
    lengths = []
    state = envs.reset(env_id, int(reset_seeds.integers(2**31)))
    t_ep = 0
    for i in range(n_steps):
        action = np.asarray(policy(state, act_rng), dtype=np.float64).reshape(-1)
        if action.shape != (spec.action_dim,):
            raise ValueError(f"policy returned action of shape {action.shape}")
        action = np.clip(action, spec.low, spec.high)
        res = envs.step(env_id, state, action)
        S[i], A[i], R[i], S2[i], D[i] = state, action, res.reward, res.next_state, res.done
        t_ep += 1
        if res.done or t_ep >= spec.horizon:
            lengths.append(t_ep)
            t_ep = 0
            state = envs.reset(env_id, int(reset_seeds.integers(2**31)))
        else:
            state = res.next_state
    if t_ep:
        lengths.append(t_ep)
    return TransitionDataset(spec, regime, S, A, R, S2, D, tuple(lengths), behavior_meta or {})


def episode_returns(dataset: TransitionDataset, complete_only: bool = True) -> np.ndarray:
    """Undiscounted per-episode returns (optionally only finished episodes)."""
    out = []
    h = dataset.spec.horizon
    for a, b in dataset.episodes():
        finished = bool(dataset.done[b - 1]) or (b - a) >= h
        if finished or not complete_only:
            out.append(dataset.r[a:b].sum())
    return np.asarray(out)


def split(dataset: TransitionDataset, val_fraction: float, seed: int):
    """Uniform random transition split; ``|val| = round(N * val_fraction)``."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise ValueError("split leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


@dataclass(frozen=True)
class DatasetStats:
    """Channel-wise population mean/std over ``s``, ``a``, ``Δs`` and ``r``."""

    mean_s: np.ndarray
    std_s: np.ndarray
    mean_a: np.ndarray
    std_a: np.ndarray
    mean_ds: np.ndarray
    std_ds: np.ndarray
    mean_r: float
    std_r: float

    @property
    def mean_in(self) -> np.ndarray:
        return np.concatenate([self.mean_s, self.mean_a])

    @property
    def std_in(self) -> np.ndarray:
        return np.concatenate([self.std_s, self.std_a])

    @property
    def mean_out(self) -> np.ndarray:
        return np.concatenate([self.mean_ds, [self.mean_r]])

    @property
    def std_out(self) -> np.ndarray:
        return np.concatenate([self.std_ds, [self.std_r]])

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        kw = {k: np.asarray(d[k], dtype=np.float64) for k in ("mean_s", "std_s", "mean_a", "std_a", "mean_ds", "std_ds")}
        return cls(mean_r=float(d["mean_r"]), std_r=float(d["std_r"]), **kw)


def _mean_std(x):
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


def compute_stats(dataset: TransitionDataset) -> DatasetStats:
    ms, ss = _mean_std(dataset.s)
    ma, sa = _mean_std(dataset.a)
    md, sd = _mean_std(dataset.s_next - dataset.s)
    mr, sr = _mean_std(dataset.r)
    return DatasetStats(ms, ss, ma, sa, md, sd, float(mr), float(sr))


def standardize(x, mean, std):
    return (np.asarray(x, dtype=np.float64) - mean) / std


def destandardize(x, mean, std):
    return np.asarray(x, dtype=np.float64) * std + mean


def _record_dtype(ds: int, da: int) -> np.dtype:
    return np.dtype(
        [("s", "<f8", (ds,)), ("a", "<f8", (da,)), ("r", "<f8"), ("s_next", "<f8", (ds,)), ("done", "u1")]
    )


def _header(dataset: TransitionDataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "env_spec": dataset.spec.to_dict(),
        "regime": dataset.regime,
        "behavior_meta": dataset.behavior_meta,
        "n": len(dataset),
        "state_dim": dataset.spec.state_dim,
        "action_dim": dataset.spec.action_dim,
        "episode_lengths": list(dataset.episode_lengths),
    }


def write_dataset(path, dataset: TransitionDataset) -> None:
    ds, da = dataset.spec.state_dim, dataset.spec.action_dim
    rec = np.empty(len(dataset), dtype=_record_dtype(ds, da))
    rec["s"], rec["a"], rec["r"] = dataset.s, dataset.a, dataset.r
    rec["s_next"], rec["done"] = dataset.s_next, dataset.done.astype(np.uint8)
    blob = json.dumps(_header(dataset), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(rec.tobytes())


def _from_header(header, s, a, r, s_next, done) -> TransitionDataset:
    return TransitionDataset(
        spec=EnvSpec.from_dict(header["env_spec"]),
        regime=header["regime"],
        s=s,
        a=a,
        r=r,
        s_next=s_next,
        done=done,
        episode_lengths=tuple(header.get("episode_lengths", ())),
        behavior_meta=header.get("behavior_meta", {}),
    )


def read_dataset(path) -> TransitionDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header['format_version']}")
    dt = _record_dtype(header["state_dim"], header["action_dim"])
    rec = np.frombuffer(raw[8 + hlen :], dtype=dt)
    if rec.shape[0] != header["n"]:
        raise ValueError(f"{path}: expected {header['n']} records, found {rec.shape[0]}")
    return _from_header(
        header,
        rec["s"].astype(np.float64),
        rec["a"].astype(np.float64),
        rec["r"].astype(np.float64),
        rec["s_next"].astype(np.float64),
        rec["done"].astype(bool),
    )


def export_jsonl(path, dataset: TransitionDataset) -> None:
    """One JSON object per line: a header line, then one line per record."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"header": _header(dataset)}, sort_keys=True) + "\n")
        for i in range(len(dataset)):
            row = {
                "s": dataset.s[i].tolist(),
                "a": dataset.a[i].tolist(),
                "r": float(dataset.r[i]),
                "s_next": dataset.s_next[i].tolist(),
                "done": bool(dataset.done[i]),
            }
            f.write(json.dumps(row) + "\n")


def read_jsonl(path) -> TransitionDataset:
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())["header"]
        rows = [json.loads(line) for line in f if line.strip()]
    return _from_header(
        header,
        np.array([r["s"] for r in rows], dtype=np.float64),
        np.array([r["a"] for r in rows], dtype=np.float64),
        np.array([r["r"] for r in rows], dtype=np.float64),
        np.array([r["s_next"] for r in rows], dtype=np.float64),
        np.array([r["done"] for r in rows], dtype=bool),
    )


@dataclass
class RegimeConfig:
    """Sizes and SAC budgets for :func:`make_regime_suite`."""

    n_steps: int = 20_000
    n_expert_steps: int | None = None
    expert_train_steps: int = 30_000
    medium_max_train_steps: int = 30_000
    medium_fraction: float = 0.5
    medium_eval_every: int = 500
    medium_eval_episodes: int = 10
    n_ref_episodes: int = 10


def make_regime_suite(env_id: str, seed: int, config: RegimeConfig | None = None, sac_config=None):
    """Generate the four dataset regimes for ``env_id``.

    * ``random``: uniform random actions.
    * ``medium``: rollouts of the SAC snapshot whose evaluated stochastic
      return is closest to ``medium_fraction`` of the way from the random
      reference to the converged (expert) return.
    * ``medium_replay``: the full online replay of that half-trained run.
    * ``medium_expert``: ``medium`` followed by converged-policy rollouts.

    Returns ``(suite, refs)`` where ``refs`` holds the random and expert
    reference returns used for normalised scores.
    """
    from .agent.sac import SACConfig, train_online
    from .seeding import derive_seed

    config = config or RegimeConfig()
    sac_config = sac_config or SACConfig()
    n_expert = config.n_expert_steps or config.n_steps
    spec = envs.get_spec(env_id)

    rand_pol = envs.random_policy(env_id)
    random_ref = float(
        envs.batch_rollout_returns(env_id, rand_pol, config.n_ref_episodes, derive_seed(seed, "ref", "random")).mean()
    )
    random_ds = collect(
        env_id, rand_pol, config.n_steps, derive_seed(seed, "collect", "random"), "random", {"policy": "uniform_random"}
    )

    expert_run = train_online(env_id, sac_config, config.expert_train_steps, derive_seed(seed, "sac", "expert"))
    expert_agent = expert_run.agent
    expert_ref = float(
        envs.batch_rollout_returns(
            env_id, expert_agent.policy_fn(deterministic=True), config.n_ref_episodes, derive_seed(seed, "ref", "expert")
        ).mean()
    )
    threshold = random_ref + config.medium_fraction * (expert_ref - random_ref)

    medium_run = train_online(
        env_id,
        replace(sac_config, eval_every=config.medium_eval_every, eval_episodes=config.medium_eval_episodes),
        config.medium_max_train_steps,
        derive_seed(seed, "sac", "medium"),
        target_return=threshold,
    )
    medium_agent = medium_run.agent
    medium_ds = collect(
        env_id,
        medium_agent.policy_fn(deterministic=False),
        config.n_steps,
        derive_seed(seed, "collect", "medium"),
        "medium",
        {"policy": "sac_medium", "train_steps": medium_run.steps, "threshold": threshold},
    )
    replay = medium_run.replay_dataset(spec, "medium_replay")
    expert_ds = collect(
        env_id,
        expert_agent.policy_fn(deterministic=False),
        n_expert,
        derive_seed(seed, "collect", "expert"),
        "medium_expert",
        {"policy": "sac_expert"},
    )
    medium_expert = concat(
        [medium_ds, expert_ds],
        "medium_expert",
        {
            "policy": "sac_medium+sac_expert",
            "segments": [
                {"source": "medium", "start": 0, "stop": len(medium_ds)},
                {"source": "expert", "start": len(medium_ds), "stop": len(medium_ds) + len(expert_ds)},
            ],
        },
    )
    refs = {
        "random_ref": random_ref,
        "expert_ref": expert_ref,
        "medium_threshold": threshold,
        "medium_reached": medium_run.reached,
        "medium_train_steps": medium_run.steps,
        "expert_train_steps": expert_run.steps,
    }
    suite = {"random": random_ds, "medium": medium_ds, "medium_replay": replay, "medium_expert": medium_expert}
    return suite, refs
