"""Rank and linear correlation between static model metrics and agent scores."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

# (column name, report accessor, sign); smaller-is-better metrics are negated.
STUDY_METRICS = (
    ("LR", lambda rep: rep.aggregate["lr"], 1.0),
    ("-OR", lambda rep: rep.aggregate["or"], -1.0),
    ("R2(1)", lambda rep: rep.long_metric("r2", 1), 1.0),
    ("-KS(1)", lambda rep: rep.long_metric("ks", 1), -1.0),
    ("R2(10)", lambda rep: rep.long_metric("r2", 10), 1.0),
    ("-KS(10)", lambda rep: rep.long_metric("ks", 10), -1.0),
    ("R2(20)", lambda rep: rep.long_metric("r2", 20), 1.0),
    ("-KS(20)", lambda rep: rep.long_metric("ks", 20), -1.0),
)
COEFFICIENTS = ("spearman", "pearson")


class UndefinedCorrelation(ValueError):
    pass


def _pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D with equal length")
    if x.size < 2:
        raise ValueError("need at least two points")
    return x, y


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their ranks."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(xs, ys) -> float:
    x, y = _pair(xs, ys)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelation("correlation undefined for constant input")
    dx, dy = x - x.mean(), y - y.mean()
    # rescale before squaring so tiny spreads do not underflow
    dx, dy = dx / np.abs(dx).max(), dy / np.abs(dy).max()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def spearman(xs, ys) -> float:
    x, y = _pair(xs, ys)
    return pearson(rankdata(x), rankdata(y))


@dataclass
class ExperimentRecord:
    model_id: str
    regime: str
    report: object
    score: float
    seeds: list = field(default_factory=list)


def correlate_study(records, metrics=STUDY_METRICS, min_records: int = 3) -> list[dict]:
    """One row per (regime, metric, coefficient).

    Coefficients that are undefined (constant input) or rely on a metric the
    reports do not contain (a horizon beyond their ``l_max``) become NaN.
    """
    by_regime: dict[str, list] = {}
    for rec in records:
        by_regime.setdefault(rec.regime, []).append(rec)
    rows = []
    for regime in sorted(by_regime):
        recs = by_regime[regime]
        if len(recs) < min_records:
            raise ValueError(f"regime {regime!r} has {len(recs)} records, need >= {min_records}")
        score = [r.score for r in recs]
        for name, get, sign in metrics:
            try:
                vals = [sign * float(get(r.report)) for r in recs]
            except LookupError:
                vals = None
            for coef, fn in (("spearman", spearman), ("pearson", pearson)):
                try:
                    value = float("nan") if vals is None else fn(vals, score)
                except UndefinedCorrelation:
                    value = float("nan")
                rows.append({"regime": regime, "metric": name, "coefficient": coef, "value": value, "n": len(recs)})
    return rows


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "metric", "coefficient", "value", "n"])
    for r in rows:
        w.writerow([r["regime"], r["metric"], r["coefficient"], repr(float(r["value"])), r["n"]])
    return buf.getvalue()


def table_json(rows) -> str:
    clean = [dict(r, value=None if not math.isfinite(r["value"]) else r["value"]) for r in rows]
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"
