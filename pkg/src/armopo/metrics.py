"""Static evaluation of dynamics models.

One-step metrics are computed per output dimension (next-state dims, then
reward) from the model's teacher-forced marginals; mixtures are reduced to
their moment-matched Gaussian first.

* ``R2``: ``1 - SSE/SST`` of the mean prediction.
* ``OR``: fraction of points whose density is ``<= P_MIN``.
* ``L``: mean log-density over the non-outlier points.
* ``LR``: ``exp(L_model - L_baseline)``, the baseline being a Gaussian fitted
  to the evaluated targets (population std), averaged over the same points.
* ``KS``: ``max_i |F(q_i) - q_i|`` where ``q_i`` are PIT quantiles and ``F``
  their empirical CDF with the ``<=`` convention.

Long-horizon ``R2(L)``/``KS(L)`` come from populations of sampled
trajectories that replay ground-truth actions from a trace: the population
mean is the point prediction and the ``<=`` rank of the truth among the
samples is the quantile.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import STD_FLOOR, Trace, TransitionDataset
from .nnet import LOG_2PI

P_MIN = 1.47e-6
METRICS = ("r2", "log_likelihood", "lr", "or", "ks")


def r2_score(mu, targets):
    """Per-dimension R2; dimensions with zero target variance give NaN."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        mu, y = mu[:, None], y[:, None]
    sse = np.mean((y - mu) ** 2, axis=0)
    sst = np.mean((y - y.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 - sse / sst
    return np.where(sst > 0, out, np.nan)


def outlier_mask(density):
    return np.asarray(density) <= P_MIN


def outlier_rate(density):
    """Fraction of densities at or below ``P_MIN`` (per column if 2-D)."""
    return np.mean(outlier_mask(density), axis=0)


def _pick(logp, inliers):
    return np.where(inliers, logp, 0.0).sum(axis=0) / np.maximum(inliers.sum(axis=0), 1)


def mean_log_likelihood(logp, density=None):
    """Mean of ``logp`` per column over points that are not outliers."""
    logp = np.asarray(logp, dtype=np.float64)
    density = np.exp(logp) if density is None else density
    inliers = ~outlier_mask(density)
    out = _pick(logp, inliers)
    return np.where(inliers.any(axis=0), out, np.nan)


def baseline_log_density(targets):
    """Log-density of each target under a per-column Gaussian fitted to the targets."""
    y = np.asarray(targets, dtype=np.float64)
    mean = y.mean(axis=0)
    std = np.maximum(y.std(axis=0), STD_FLOOR)
    z = (y - mean) / std
    return -np.log(std) - 0.5 * LOG_2PI - 0.5 * z * z


def log_likelihood_ratio(logp, targets):
    """``L_model - L_baseline`` per column, both over the model's inlier points."""
    logp = np.asarray(logp, dtype=np.float64)
    inliers = ~outlier_mask(np.exp(logp))
    base = baseline_log_density(targets)
    out = _pick(logp, inliers) - _pick(base, inliers)
    return np.where(inliers.any(axis=0), out, np.nan)


def likelihood_ratio(logp, targets):
    with np.errstate(over="ignore"):
        return np.exp(log_likelihood_ratio(logp, targets))


def normal_pit(mu, sigma, targets):
    from scipy.special import ndtr

    return ndtr((np.asarray(targets) - mu) / sigma)


def ks_statistic(quantiles) -> float:
    q = np.sort(np.asarray(quantiles, dtype=np.float64).ravel())
    if q.size == 0:
        raise ValueError("need at least one quantile")
    ecdf = np.searchsorted(q, q, side="right") / q.size
    return float(np.max(np.abs(ecdf - q)))


def quantile_histogram(quantiles, n_bins: int = 20) -> np.ndarray:
    """Equal-width bins on [0, 1]; interior edges go to the lower bin, 0 to the first."""
    q = np.asarray(quantiles, dtype=np.float64).ravel()
    idx = np.clip(np.ceil(q * n_bins).astype(int) - 1, 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins)


def _eval_arrays(model, ds: TransitionDataset):
    dist = model.teacher_forced(ds.s, ds.a, ds.s_next, ds.r).moment_matched()
    y = ds.targets
    mu, sigma = dist.mu[:, 0], dist.sigma[:, 0]
    return y, mu, sigma, dist.log_density(y)


def log_likelihood(model, eval_set: TransitionDataset, j: int) -> float:
    _, _, _, logp = _eval_arrays(model, eval_set)
    return float(mean_log_likelihood(logp[:, j]))


def lr(model, eval_set: TransitionDataset, j: int) -> float:
    y, _, _, logp = _eval_arrays(model, eval_set)
    return float(likelihood_ratio(logp[:, [j]], y[:, [j]])[0])


def outlier_ratio(model, eval_set: TransitionDataset, j: int) -> float:
    _, _, _, logp = _eval_arrays(model, eval_set)
    return float(outlier_rate(np.exp(logp[:, j])))


def pit_quantiles(model, eval_set: TransitionDataset, j: int) -> np.ndarray:
    y, mu, sigma, _ = _eval_arrays(model, eval_set)
    return normal_pit(mu[:, j], sigma[:, j], y[:, j])


def r2(model, eval_set: TransitionDataset, j: int) -> float:
    y, mu, _, _ = _eval_arrays(model, eval_set)
    return float(r2_score(mu[:, [j]], y[:, [j]])[0])


def one_step_metrics(y, mu, sigma, logp, n_bins: int = 20) -> dict:
    """All one-step metrics per dimension from arrays of shape (N, d)."""
    q = normal_pit(mu, sigma, y)
    density = np.exp(logp)
    return {
        "r2": r2_score(mu, y),
        "log_likelihood": mean_log_likelihood(logp, density),
        "lr": likelihood_ratio(logp, y),
        "log_lr": log_likelihood_ratio(logp, y),
        "or": outlier_rate(density),
        "ks": np.array([ks_statistic(q[:, j]) for j in range(y.shape[1])]),
        "histogram": np.stack([quantile_histogram(q[:, j], n_bins) for j in range(y.shape[1])]),
    }


def trace_starts(length: int, l_max: int, n_starts: int) -> np.ndarray:
    """Evenly spaced start indices leaving room for ``l_max`` steps."""
    if length < l_max:
        raise ValueError(f"trace of length {length} is shorter than L_max={l_max}")
    return np.unique(np.round(np.linspace(0, length - l_max, n_starts)).astype(int))


def rollout_population(model, trace: Trace, l_max: int = 20, n: int = 100, rng=None, starts=None):
    """Sample ``n`` model trajectories of ``l_max`` steps from each start.

    Returns ``(samples, truth)``: ``samples`` has shape (S, n, l_max, d_s+1)
    holding ``(s_{t+L}, r_{t+L-1})`` for ``L = 1..l_max``; ``truth`` has
    shape (S, l_max, d_s+1).
    """
    if len(trace) < l_max:
        raise ValueError(f"trace of length {len(trace)} is shorter than L_max={l_max}")
    if n < 2:
        raise ValueError("population size must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    starts = trace_starts(len(trace), l_max, 50) if starts is None else np.asarray(starts)
    n_s = len(starts)
    ds = trace.s.shape[1]
    states = np.repeat(trace.s[starts], n, axis=0)
    samples = np.empty((n_s, n, l_max, ds + 1))
    truth = np.empty((n_s, l_max, ds + 1))
    for step in range(l_max):
        idx = starts + step
        actions = np.repeat(trace.a[idx], n, axis=0)
        s_next, r = model.sample(states, actions, rng)
        samples[:, :, step, :ds] = s_next.reshape(n_s, n, ds)
        samples[:, :, step, ds] = r.reshape(n_s, n)
        truth[:, step, :ds] = trace.s_next[idx]
        truth[:, step, ds] = trace.r[idx]
        states = s_next
    return samples, truth


def r2_long(samples, truth) -> np.ndarray:
    """R2 per (L, dim) using the population mean as prediction; shape (l_max, d)."""
    pred = samples.mean(axis=1)
    return np.stack([r2_score(pred[:, L], truth[:, L]) for L in range(truth.shape[1])])


def ks_long(samples, truth) -> np.ndarray:
    """KS per (L, dim) from order-statistic quantiles; shape (l_max, d)."""
    q = np.mean(samples <= truth[:, None], axis=1)
    l_max, d = truth.shape[1], truth.shape[2]
    return np.array([[ks_statistic(q[:, L, j]) for j in range(d)] for L in range(l_max)])


@dataclass
class MetricConfig:
    l_max: int = 20
    n_population: int = 100
    n_starts: int = 50
    n_traces: int = 4
    n_bins: int = 20


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def _nan(x):
    return np.array([np.nan if v is None else v for v in x], dtype=np.float64)


@dataclass
class MetricReport:
    """Per-dimension and aggregate static metrics plus long-horizon curves.

    ``per_dim[m]`` lists one value per output dimension; ``aggregate[m]`` is
    their mean over defined values. ``curves[m]`` holds aggregate ``R2(L)`` or
    ``KS(L)`` for ``L = 1..l_max`` and ``per_dim_curves[m]`` the per-dimension
    version as (l_max, d) nested lists.
    """

    dim_names: list
    per_dim: dict
    aggregate: dict
    histograms: list
    curves: dict = field(default_factory=dict)
    per_dim_curves: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean(
            {
                "dim_names": self.dim_names,
                "per_dim": self.per_dim,
                "aggregate": self.aggregate,
                "histograms": self.histograms,
                "curves": self.curves,
                "per_dim_curves": self.per_dim_curves,
                "flags": self.flags,
                "metadata": self.metadata,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            dim_names=d["dim_names"],
            per_dim={k: _nan(v) for k, v in d["per_dim"].items()},
            aggregate={k: (np.nan if v is None else v) for k, v in d["aggregate"].items()},
            histograms=d["histograms"],
            curves={k: _nan(v) for k, v in d.get("curves", {}).items()},
            per_dim_curves=d.get("per_dim_curves", {}),
            flags=d.get("flags", []),
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def long_metric(self, name: str, L: int) -> float:
        curve = self.curves.get(name)
        if curve is None or not 1 <= L <= len(curve):
            raise LookupError(f"{name}({L}) was not computed for this report")
        return float(curve[L - 1])

    def write_curves_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["L", "r2", "ks"])
            for L, (a, b) in enumerate(zip(self.curves["r2"], self.curves["ks"]), start=1):
                w.writerow([L, repr(float(a)), repr(float(b))])

    def write_histograms_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            n_bins = len(self.histograms[0])
            w.writerow(["dim", "bin", "low", "high", "count"])
            for name, counts in zip(self.dim_names, self.histograms):
                for b, c in enumerate(counts):
                    w.writerow([name, b, b / n_bins, (b + 1) / n_bins, int(c)])


def _aggregate(values, name, flags):
    v = np.asarray(values, dtype=np.float64)
    if np.any(~np.isfinite(v)):
        flags.append(f"{name}: undefined for dims {np.flatnonzero(~np.isfinite(v)).tolist()}, excluded from aggregate")
    finite = v[np.isfinite(v)]
    return float(finite.mean()) if finite.size else float("nan")


def evaluate_model(
    model,
    eval_set: TransitionDataset,
    traces=None,
    config: MetricConfig | None = None,
    rng=None,
    metadata: dict | None = None,
) -> MetricReport:
    """Run the full static suite; long-horizon curves need ``traces``."""
    config = config or MetricConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    y, mu, sigma, logp = _eval_arrays(model, eval_set)
    m = one_step_metrics(y, mu, sigma, logp, config.n_bins)
    flags: list[str] = []
    names = list(eval_set.spec.state_names or [f"s{i}" for i in range(eval_set.spec.state_dim)]) + ["reward"]
    per_dim = {k: m[k] for k in ("r2", "log_likelihood", "lr", "log_lr", "or", "ks")}
    aggregate = {k: _aggregate(v, k, flags) for k, v in per_dim.items()}
    if np.any(np.std(y, axis=0) < STD_FLOOR):
        flags.append("lr: degenerate baseline std floored")
    report = MetricReport(
        dim_names=names,
        per_dim=per_dim,
        aggregate=aggregate,
        histograms=m["histogram"].tolist(),
        flags=flags,
        metadata=dict(metadata or {}, n=len(eval_set), l_max=config.l_max, n_population=config.n_population),
    )
    if traces:
        chosen = list(traces)[: config.n_traces]
        pops = [
            rollout_population(
                model, tr, config.l_max, config.n_population, rng, trace_starts(len(tr), config.l_max, config.n_starts)
            )
            for tr in chosen
        ]
        samples = np.concatenate([p[0] for p in pops])
        truth = np.concatenate([p[1] for p in pops])
        r2c, ksc = r2_long(samples, truth), ks_long(samples, truth)
        report.per_dim_curves = {"r2": r2c.tolist(), "ks": ksc.tolist()}
        report.curves = {
            "r2": np.array([np.nanmean(row) if np.isfinite(row).any() else np.nan for row in r2c]),
            "ks": ksc.mean(axis=1),
        }
        report.metadata["n_long_starts"] = int(truth.shape[0])
        report.metadata["n_traces"] = len(chosen)
    return report
