"""Scalar uncertainty heuristics over member moments.

``moments`` is a list with one ``(mu, sigma)`` pair per member; arrays are
(N, d) or (d,). All heuristics are computed in raw units over every predicted
output, reward included, and return one value per row.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class HeuristicKind(str, Enum):
    MA = "ma"
    MPD = "mpd"
    ESD = "esd"
    SINGLE_SIGMA = "sigma"

    @classmethod
    def parse(cls, value) -> "HeuristicKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown heuristic {value!r}; expected one of {[k.value for k in cls]}") from None


def _stack(moments):
    if len(moments) == 0:
        raise ValueError("need at least one member")
    mus = np.stack([np.asarray(m, dtype=np.float64) for m, _ in moments])
    sigmas = np.stack([np.asarray(s, dtype=np.float64) for _, s in moments])
    return mus, sigmas


def ma(moments):
    """Max aleatory: largest Euclidean norm of a member's sigma vector."""
    _, sigmas = _stack(moments)
    return np.max(np.linalg.norm(sigmas, axis=-1), axis=0)


def mpd(moments):
    """Max pairwise distance between member means."""
    mus, _ = _stack(moments)
    if mus.shape[0] < 2:
        raise ValueError("MPD needs at least two members")
    diffs = mus[:, None] - mus[None, :]
    return np.max(np.linalg.norm(diffs, axis=-1), axis=(0, 1))


def esd_per_dim(moments):
    """Standard deviation of the equally weighted mixture, per dimension.

    Uses ``mean(σ²) + mean((μ - μ̄)²)``, algebraically equal to
    ``mean(σ² + μ²) - μ̄²`` but free of cancellation.
    """
    mus, sigmas = _stack(moments)
    mean = mus.mean(axis=0)
    var = np.mean(sigmas**2, axis=0) + np.mean((mus - mean) ** 2, axis=0)
    if np.any(var < -1e-12):
        raise ArithmeticError("negative mixture variance")
    return np.sqrt(np.maximum(var, 0.0))


def esd(moments):
    """Euclidean norm over dimensions of :func:`esd_per_dim`."""
    return np.linalg.norm(esd_per_dim(moments), axis=-1)


def single_sigma(moments):
    if len(moments) != 1:
        raise ValueError("the sigma heuristic needs exactly one member")
    return np.linalg.norm(np.asarray(moments[0][1], dtype=np.float64), axis=-1)


_DISPATCH = {
    HeuristicKind.MA: ma,
    HeuristicKind.MPD: mpd,
    HeuristicKind.ESD: esd,
    HeuristicKind.SINGLE_SIGMA: single_sigma,
}


def check_compatible(kind, n_members: int) -> HeuristicKind:
    kind = HeuristicKind.parse(kind)
    if kind in (HeuristicKind.MA, HeuristicKind.MPD, HeuristicKind.ESD) and n_members < 2:
        raise ValueError(f"{kind.value} needs an ensemble; use 'sigma' for single models")
    if kind is HeuristicKind.SINGLE_SIGMA and n_members != 1:
        raise ValueError("'sigma' applies to single models only")
    return kind


def from_moments(kind, moments):
    return _DISPATCH[HeuristicKind.parse(kind)](moments)


def penalty(model, kind, s, a):
    """û(s, a) for ``model`` under heuristic ``kind``."""
    moments = model.moments(s, a)
    kind = check_compatible(kind, len(moments))
    return from_moments(kind, moments)
