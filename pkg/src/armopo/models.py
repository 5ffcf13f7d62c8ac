"""Probabilistic dynamics models over ``(s', r)`` given ``(s, a)``.

All models predict standardised ``Δs = s' - s`` and the reward internally and
expose distributions in raw units. Outputs are ordered as the next-state
dimensions in index order followed by the reward.

* :class:`DMDN`: one network with a diagonal Gaussian over all outputs.
* :class:`DARMDN`: one network per output; network ``j`` also sees the
  standardised values of the outputs that precede it in ``order``.
  Likelihoods use teacher forcing (ground-truth conditioning), sampling is
  ancestral.
* :class:`Ensemble`: independently trained DMDN members treated as an
  equally weighted mixture.
* :class:`OracleModel`: the true environment step with a fixed small sigma,
  used as a reference point for the metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import env as envs
from .data import DatasetStats, TransitionDataset, compute_stats
from .nnet import DenseNet, LOG_2PI, TrainConfig, load_checkpoint, save_checkpoint, train
from .seeding import derive_seed

KINDS = ("dmdn", "darmdn", "ensemble")


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-dimension mixture of Gaussians; arrays have shape (N, K, d).

    ``weights`` sum to one over the component axis. ``K = 1`` is a plain
    diagonal Gaussian.
    """

    mu: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.mu.ndim != 3 or self.mu.shape != self.sigma.shape or self.mu.shape != self.weights.shape:
            raise ValueError("mu, sigma and weights must share an (N, K, d) shape")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        if not np.allclose(self.weights.sum(axis=1), 1.0):
            raise ValueError("component weights must sum to one")

    @classmethod
    def gaussian(cls, mu, sigma) -> "PredictiveDistribution":
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
        return cls(mu[:, None, :], sigma[:, None, :], np.ones_like(mu)[:, None, :])

    @classmethod
    def mixture(cls, mus, sigmas) -> "PredictiveDistribution":
        """Equally weighted mixture of the Gaussians ``(mus[k], sigmas[k])``."""
        mu = np.stack(mus, axis=1)
        sigma = np.stack(sigmas, axis=1)
        return cls(mu, sigma, np.full_like(mu, 1.0 / mu.shape[1]))

    @property
    def n_components(self) -> int:
        return self.mu.shape[1]

    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.mu, axis=1)

    def std(self) -> np.ndarray:
        """Mixture standard deviation per dimension (law of total variance)."""
        m = self.mean()
        var = np.sum(self.weights * (self.sigma**2 + (self.mu - m[:, None, :]) ** 2), axis=1)
        return np.sqrt(var)

    def moment_matched(self) -> "PredictiveDistribution":
        if self.n_components == 1:
            return self
        return PredictiveDistribution.gaussian(self.mean(), self.std())

    def log_density(self, y) -> np.ndarray:
        """Per-dimension log-density of ``y`` (N, d)."""
        y = np.atleast_2d(y)[:, None, :]
        z = (y - self.mu) / self.sigma
        comp = np.log(self.weights) - np.log(self.sigma) - 0.5 * LOG_2PI - 0.5 * z * z
        if self.n_components == 1:
            return comp[:, 0, :]
        top = comp.max(axis=1, keepdims=True)
        return (top + np.log(np.sum(np.exp(comp - top), axis=1, keepdims=True)))[:, 0, :]

    def cdf(self, y) -> np.ndarray:
        from scipy.special import ndtr

        y = np.atleast_2d(y)[:, None, :]
        return np.sum(self.weights * ndtr((y - self.mu) / self.sigma), axis=1)


class DynamicsModel:
    """Shared raw/standardised plumbing; subclasses provide ``predict`` and ``sample_with_moments``."""

    kind = "base"

    def __init__(self, state_dim: int, action_dim: int, stats: DatasetStats, order=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.stats = stats
        self.n_out = state_dim + 1
        self.order = tuple(range(self.n_out)) if order is None else tuple(int(i) for i in order)
        if sorted(self.order) != list(range(self.n_out)):
            raise ValueError(f"order must be a permutation of 0..{self.n_out - 1}")

    def _check(self, *arrays):
        for x in arrays:
            if not np.all(np.isfinite(x)):
                raise ValueError("non-finite model input")

    def _inputs(self, s, a):
        st = self.stats
        return np.concatenate([(s - st.mean_s) / st.std_s, (a - st.mean_a) / st.std_a], axis=1)

    def _std_targets(self, s, s_next, r):
        y = np.concatenate([s_next - s, r[:, None]], axis=1)
        return (y - self.stats.mean_out) / self.stats.std_out

    def _raw_mean(self, s, mu_std):
        y = mu_std * self.stats.std_out + self.stats.mean_out
        y[:, : self.state_dim] += s
        return y

    def _raw(self, s, mu_std, sigma_std):
        return self._raw_mean(s, mu_std), sigma_std * self.stats.std_out

    def _split(self, s, y_std):
        y = self._raw_mean(s, y_std)
        return y[:, : self.state_dim], y[:, self.state_dim]

    @staticmethod
    def _prep(s, a):
        return np.atleast_2d(np.asarray(s, dtype=np.float64)), np.atleast_2d(np.asarray(a, dtype=np.float64))

    def predict(self, s, a) -> PredictiveDistribution:
        raise NotImplementedError

    def teacher_forced(self, s, a, s_next, r) -> PredictiveDistribution:
        """Distribution of each output conditioned on the true preceding outputs."""
        return self.predict(s, a)

    def moments(self, s, a) -> list[tuple[np.ndarray, np.ndarray]]:
        d = self.predict(s, a)
        return [(d.mu[:, k, :], d.sigma[:, k, :]) for k in range(d.n_components)]

    def sample_with_moments(self, s, a, rng):
        """Draw ``(s', r)`` and return the member moments that produced it."""
        raise NotImplementedError

    def sample(self, s, a, rng):
        s_next, r, _ = self.sample_with_moments(s, a, rng)
        return s_next, r

    def log_density(self, s, a, s_next, r):
        """``(total, per_dim)`` raw-space log-density under teacher forcing."""
        s, a = self._prep(s, a)
        s_next = np.atleast_2d(s_next)
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        dist = self.teacher_forced(s, a, s_next, r).moment_matched()
        per_dim = dist.log_density(np.concatenate([s_next, r[:, None]], axis=1))
        return per_dim.sum(axis=1), per_dim

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "order": list(self.order),
            "stats": self.stats.to_dict(),
        }


class DMDN(DynamicsModel):
    kind = "dmdn"

    def __init__(self, net: DenseNet, params, state_dim, action_dim, stats, seed: int | None = None):
        super().__init__(state_dim, action_dim, stats)
        if net.in_dim != state_dim + action_dim or net.out_dim != state_dim + 1:
            raise ValueError("network shape does not match the model dimensions")
        self.net = net
        self.params = params
        self.seed = seed

    def _std_forward(self, s, a):
        s, a = self._prep(s, a)
        self._check(s, a)
        mu, ls = self.net.forward(self.params, self._inputs(s, a))
        return s, mu, ls

    def predict(self, s, a) -> PredictiveDistribution:
        s, mu, ls = self._std_forward(s, a)
        return PredictiveDistribution.gaussian(*self._raw(s, mu, np.exp(ls)))

    def sample_with_moments(self, s, a, rng):
        s, mu, ls = self._std_forward(s, a)
        y = mu + np.exp(ls) * rng.standard_normal(mu.shape)
        s_next, r = self._split(s, y)
        return s_next, r, [self._raw(s, mu, np.exp(ls))]


class DARMDN(DynamicsModel):
    kind = "darmdn"

    def __init__(self, nets, params, state_dim, action_dim, stats, order=None, seeds=None):
        super().__init__(state_dim, action_dim, stats, order)
        base = state_dim + action_dim
        if len(nets) != self.n_out:
            raise ValueError(f"need {self.n_out} conditional networks, got {len(nets)}")
        for j, net in enumerate(nets):
            if net.in_dim != base + j or net.out_dim != 1:
                raise ValueError(f"network {j} must map {base + j} inputs to one output")
        self.nets = list(nets)
        self.params = list(params)
        self.seeds = seeds

    def _chain(self, s, a, fill):
        """Run the conditional nets in ``order``; ``fill(j, out_idx, mu, ls)`` gives the
        standardised value fed to later nets."""
        s, a = self._prep(s, a)
        self._check(s, a)
        x = self._inputs(s, a)
        n = x.shape[0]
        mu = np.empty((n, self.n_out))
        ls = np.empty((n, self.n_out))
        used = np.empty((n, self.n_out))
        cond = x
        for j, out in enumerate(self.order):
            m, l = self.nets[j].forward(self.params[j], cond)
            mu[:, out], ls[:, out] = m[:, 0], l[:, 0]
            used[:, out] = fill(j, out, m[:, 0], l[:, 0])
            cond = np.concatenate([cond, used[:, out : out + 1]], axis=1)
        return s, mu, ls, used

    def predict(self, s, a) -> PredictiveDistribution:
        """Conditionals chained on the predicted means."""
        s, mu, ls, _ = self._chain(s, a, lambda j, out, m, l: m)
        return PredictiveDistribution.gaussian(*self._raw(s, mu, np.exp(ls)))

    def teacher_forced(self, s, a, s_next, r) -> PredictiveDistribution:
        s, a = self._prep(s, a)
        y = self._std_targets(s, np.atleast_2d(s_next), np.atleast_1d(r))
        s, mu, ls, _ = self._chain(s, a, lambda j, out, m, l: y[:, out])
        return PredictiveDistribution.gaussian(*self._raw(s, mu, np.exp(ls)))

    def ar_log_density(self, s, a, s_next, r):
        return self.log_density(s, a, s_next, r)

    def sample_with_moments(self, s, a, rng):
        """Ancestral sampling; moments are the conditionals along the drawn path."""
        n = np.atleast_2d(s).shape[0]
        eps = rng.standard_normal((n, self.n_out))
        s, mu, ls, y = self._chain(s, a, lambda j, out, m, l: m + np.exp(l) * eps[:, j])
        s_next, r = self._split(s, y)
        return s_next, r, [self._raw(s, mu, np.exp(ls))]


class Ensemble(DynamicsModel):
    kind = "ensemble"

    def __init__(self, members: list[DMDN]):
        if len(members) < 1:
            raise ValueError("ensemble needs at least one member")
        m0 = members[0]
        super().__init__(m0.state_dim, m0.action_dim, m0.stats)
        self.members = list(members)

    def predict(self, s, a) -> PredictiveDistribution:
        dists = [m.predict(s, a) for m in self.members]
        return PredictiveDistribution.mixture([d.mu[:, 0] for d in dists], [d.sigma[:, 0] for d in dists])

    def sample_with_moments(self, s, a, rng):
        s, a = self._prep(s, a)
        n = s.shape[0]
        pick = rng.integers(0, len(self.members), size=n)
        draws = [m.sample_with_moments(s, a, rng) for m in self.members]
        s_next = np.stack([d[0] for d in draws])[pick, np.arange(n)]
        r = np.stack([d[1] for d in draws])[pick, np.arange(n)]
        return s_next, r, [d[2][0] for d in draws]

    def manifest(self) -> dict:
        out = super().manifest()
        out["n_members"] = len(self.members)
        return out


class OracleModel(DynamicsModel):
    """True deterministic dynamics wrapped in a Gaussian of fixed raw sigma."""

    kind = "oracle"

    def __init__(self, env_id: str, sigma: float = math.exp(-10.0), stats: DatasetStats | None = None):
        spec = envs.get_spec(env_id)
        if stats is None:
            ds = spec.state_dim
            one = np.ones
            stats = DatasetStats(np.zeros(ds), one(ds), np.zeros(spec.action_dim), one(spec.action_dim),
                                 np.zeros(ds), one(ds), 0.0, 1.0)
        super().__init__(spec.state_dim, spec.action_dim, stats)
        self.env_id = env_id
        self.sigma = float(sigma)

    def predict(self, s, a) -> PredictiveDistribution:
        s, a = self._prep(s, a)
        s_next, r, _ = envs.step_batch(self.env_id, s, a)
        mu = np.concatenate([s_next, r[:, None]], axis=1)
        return PredictiveDistribution.gaussian(mu, np.full_like(mu, self.sigma))

    def sample_with_moments(self, s, a, rng):
        d = self.predict(s, a)
        mu, sig = d.mu[:, 0], d.sigma[:, 0]
        y = mu + sig * rng.standard_normal(mu.shape)
        return y[:, : self.state_dim], y[:, self.state_dim], [(mu, sig)]


@dataclass
class ModelConfig:
    """Architecture and training settings for one model family."""

    kind: str = "dmdn"
    hidden: int = 200
    n_layers: int = 2
    activation: str = "tanh"
    dropout: float = 0.0
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    patience: int = 20
    weight_decay: float = 0.0
    n_members: int = 3
    n_components: int = 1
    order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_components != 1:
            raise NotImplementedError("only single-component heads are trained")
        if self.order is not None:
            self.order = tuple(self.order)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.lr, self.batch_size, self.epochs, self.patience, seed, self.weight_decay)

    def widths(self, in_dim: int) -> tuple[int, ...]:
        return (in_dim,) + (self.hidden,) * self.n_layers


def _net(cfg: ModelConfig, in_dim: int, out_dim: int) -> DenseNet:
    return DenseNet(cfg.widths(in_dim), out_dim, activation=cfg.activation, dropout=cfg.dropout)


def _check_dims(train_ds, val_ds):
    if train_ds.spec.state_dim != val_ds.spec.state_dim or train_ds.spec.action_dim != val_ds.spec.action_dim:
        raise ValueError("train and validation datasets disagree on dimensions")


def train_dmdn(train_ds: TransitionDataset, val_ds: TransitionDataset, cfg: ModelConfig, seed: int, stats=None):
    _check_dims(train_ds, val_ds)
    ds, da = train_ds.spec.state_dim, train_ds.spec.action_dim
    stats = stats or compute_stats(train_ds)
    net = _net(cfg, ds + da, ds + 1)
    init = net.init_params(np.random.default_rng(derive_seed(seed, "init")))
    model = DMDN(net, init, ds, da, stats, seed=seed)
    x_tr = model._inputs(train_ds.s, train_ds.a)
    y_tr = model._std_targets(train_ds.s, train_ds.s_next, train_ds.r)
    x_va = model._inputs(val_ds.s, val_ds.a)
    y_va = model._std_targets(val_ds.s, val_ds.s_next, val_ds.r)
    params, hist = train(net, init, (x_tr, y_tr), (x_va, y_va), cfg.train_config(derive_seed(seed, "train")))
    model.params = params
    return model, hist


def train_darmdn(train_ds: TransitionDataset, val_ds: TransitionDataset, cfg: ModelConfig, seed: int):
    _check_dims(train_ds, val_ds)
    ds, da = train_ds.spec.state_dim, train_ds.spec.action_dim
    stats = compute_stats(train_ds)
    order = cfg.order or tuple(range(ds + 1))
    shell = DynamicsModel(ds, da, stats)
    x_tr, x_va = shell._inputs(train_ds.s, train_ds.a), shell._inputs(val_ds.s, val_ds.a)
    y_tr = shell._std_targets(train_ds.s, train_ds.s_next, train_ds.r)
    y_va = shell._std_targets(val_ds.s, val_ds.s_next, val_ds.r)
    nets, params, hists, seeds = [], [], [], []
    for j, out in enumerate(order):
        prev = list(order[:j])
        net = _net(cfg, ds + da + j, 1)
        sj = derive_seed(seed, "dim", j)
        init = net.init_params(np.random.default_rng(derive_seed(sj, "init")))
        p, h = train(
            net,
            init,
            (np.concatenate([x_tr, y_tr[:, prev]], axis=1), y_tr[:, [out]]),
            (np.concatenate([x_va, y_va[:, prev]], axis=1), y_va[:, [out]]),
            cfg.train_config(derive_seed(sj, "train")),
        )
        nets.append(net)
        params.append(p)
        hists.append(h)
        seeds.append(sj)
    model = DARMDN(nets, params, ds, da, stats, order=order, seeds=seeds)
    return model, {"per_dim": hists}


def ensemble_train(train_ds: TransitionDataset, val_ds: TransitionDataset, cfg: ModelConfig, seed: int):
    """Train ``cfg.n_members`` DMDNs with distinct init seeds and shuffling orders."""
    stats = compute_stats(train_ds)
    members, hists = [], []
    for m in range(cfg.n_members):
        model, h = train_dmdn(train_ds, val_ds, cfg, derive_seed(seed, "member", m), stats=stats)
        members.append(model)
        hists.append(h)
    return Ensemble(members), {"members": hists}


def train_model(train_ds, val_ds, cfg: ModelConfig, seed: int):
    if cfg.kind == "dmdn":
        return train_dmdn(train_ds, val_ds, cfg, seed)
    if cfg.kind == "darmdn":
        return train_darmdn(train_ds, val_ds, cfg, seed)
    return ensemble_train(train_ds, val_ds, cfg, seed)


def _cfg_dict(cfg: ModelConfig | None):
    if cfg is None:
        return None
    d = asdict(cfg)
    d["order"] = list(d["order"]) if d["order"] is not None else None
    return d


def save_model(model: DynamicsModel, directory, config: ModelConfig | None = None) -> None:
    """Write a checkpoint bundle: ``manifest.json`` plus one file per network."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    man = model.manifest()
    man["config"] = _cfg_dict(config)
    if isinstance(model, DMDN):
        save_checkpoint(d / "net_0.ckpt", model.net, model.params, {"seed": model.seed})
        man["nets"] = ["net_0.ckpt"]
        man["seeds"] = [model.seed]
    elif isinstance(model, DARMDN):
        man["nets"] = []
        for j, (net, p) in enumerate(zip(model.nets, model.params)):
            name = f"net_{j}.ckpt"
            seed = model.seeds[j] if model.seeds else None
            save_checkpoint(d / name, net, p, {"seed": seed, "output": model.order[j]})
            man["nets"].append(name)
        man["seeds"] = list(model.seeds) if model.seeds else None
    elif isinstance(model, Ensemble):
        man["members"] = []
        for i, member in enumerate(model.members):
            name = f"member_{i}"
            save_model(member, d / name)
            man["members"].append(name)
        man["seeds"] = [m.seed for m in model.members]
    else:
        raise TypeError(f"cannot save model of kind {model.kind!r}")
    (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> DynamicsModel:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    stats = DatasetStats.from_dict(man["stats"])
    ds, da = man["state_dim"], man["action_dim"]
    if man["kind"] == "dmdn":
        net, p, meta = load_checkpoint(d / man["nets"][0])
        return DMDN(net, p, ds, da, stats, seed=meta.get("seed"))
    if man["kind"] == "darmdn":
        loaded = [load_checkpoint(d / name) for name in man["nets"]]
        return DARMDN([x[0] for x in loaded], [x[1] for x in loaded], ds, da, stats, man["order"], man.get("seeds"))
    if man["kind"] == "ensemble":
        return Ensemble([load_model(d / name) for name in man["members"]])
    raise ValueError(f"unknown model kind {man['kind']!r}")
