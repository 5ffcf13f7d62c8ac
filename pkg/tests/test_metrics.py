from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from armopo import data, metrics
from armopo import env as envs
from armopo.models import OracleModel, PredictiveDistribution


def test_r2_hand_case():
    assert metrics.r2_score(np.zeros(3), np.array([0.0, 1.0, 2.0]))[0] == pytest.approx(-1.5, abs=1e-12)


def test_r2_perfect_and_mean():
    y = np.random.default_rng(0).normal(size=(50, 2))
    np.testing.assert_allclose(metrics.r2_score(y, y), 1.0)
    np.testing.assert_allclose(metrics.r2_score(np.broadcast_to(y.mean(0), y.shape), y), 0.0, atol=1e-12)


def test_r2_constant_target_is_undefined():
    assert math.isnan(metrics.r2_score(np.zeros(4), np.ones(4))[0])


@settings(max_examples=30)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30), st.integers(0, 100))
def test_r2_matches_sklearn_formula_and_is_permutation_invariant(ys, seed):
    y = np.array(ys)
    if np.var(y) < 1e-6:
        return
    rng = np.random.default_rng(seed)
    pred = y + rng.normal(size=y.size)
    ref = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    perm = rng.permutation(y.size)
    assert metrics.r2_score(pred, y)[0] == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert metrics.r2_score(pred[perm], y[perm])[0] == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_ks_three_quantiles():
    assert metrics.ks_statistic([0.25, 0.5, 0.75]) == pytest.approx(0.25, abs=1e-12)


def test_ks_point_mass():
    assert metrics.ks_statistic(np.full(7, 0.5)) == pytest.approx(0.5, abs=1e-12)


def test_ks_uniform_draws_small():
    q = np.random.default_rng(0).uniform(size=10_000)
    assert metrics.ks_statistic(q) < 0.02


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_ks_sample_point_definition(qs):
    q = np.array(qs)
    ecdf = np.array([np.mean(q <= v) for v in q])
    assert metrics.ks_statistic(q) == pytest.approx(np.max(np.abs(ecdf - q)), abs=1e-12)
    assert 0.0 <= metrics.ks_statistic(q) <= 1.0


def test_ks_never_exceeds_scipy_two_sided():
    q = np.random.default_rng(1).beta(2, 3, size=500)
    assert metrics.ks_statistic(q) <= stats.kstest(q, "uniform").statistic + 1e-12


def test_histogram_bin_centres():
    centres = (np.arange(20) + 0.5) / 20
    np.testing.assert_array_equal(metrics.quantile_histogram(centres), np.ones(20))


def test_histogram_edges():
    h = metrics.quantile_histogram(np.array([0.0, 0.05, 0.5, 1.0]))
    assert h[0] == 2  # 0 and the 0.05 edge
    assert h[9] == 1  # 0.5 sits on the edge between bins 9 and 10
    assert h[19] == 1
    assert metrics.quantile_histogram(np.full(9, 0.5))[9] == 9


@given(st.lists(st.floats(0, 1), min_size=1, max_size=100))
def test_histogram_partitions(qs):
    assert metrics.quantile_histogram(np.array(qs)).sum() == len(qs)


def _gauss_logp(y, mu, sigma):
    return stats.norm.logpdf(y, mu, sigma)


def test_lr_model_equal_to_baseline_is_one():
    y = np.random.default_rng(0).normal(2.0, 3.0, size=(200, 1))
    mu, sd = y.mean(0), y.std(0)
    logp = _gauss_logp(y, mu, sd)
    assert metrics.likelihood_ratio(logp, y)[0] == pytest.approx(1.0, abs=1e-10)


def test_lr_two_point_mean_gap():
    # baseline N(0, 1) on {-1, +1}; exact model with sigma 1 gains 1/2 nat per point
    y = np.array([[-1.0], [1.0]])
    logp = _gauss_logp(y, y, 1.0)
    assert metrics.log_likelihood_ratio(logp, y)[0] == pytest.approx(0.5, abs=1e-12)
    assert metrics.likelihood_ratio(logp, y)[0] == pytest.approx(math.exp(0.5), abs=1e-10)


def test_lr_dominating_model_above_one():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(100, 1))
    logp = _gauss_logp(y, y + 0.01, 0.1)
    assert metrics.likelihood_ratio(logp, y)[0] > 1.0


def test_log_likelihood_perfect_unit_model():
    y = np.random.default_rng(0).normal(size=(20, 1))
    ll = metrics.mean_log_likelihood(_gauss_logp(y, y, 1.0))
    assert ll[0] == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_likelihood_duplicates_and_sigma_monotone():
    y = np.random.default_rng(0).normal(size=(10, 1))
    a = metrics.mean_log_likelihood(_gauss_logp(y, y, 0.5))
    b = metrics.mean_log_likelihood(_gauss_logp(np.vstack([y, y]), np.vstack([y, y]), 0.5))
    assert a[0] == pytest.approx(b[0])
    assert metrics.mean_log_likelihood(_gauss_logp(y, y, 0.1))[0] > a[0]


def test_outlier_boundary_is_counted():
    d = np.array([metrics.P_MIN, 2 * metrics.P_MIN, 1.0])
    np.testing.assert_array_equal(metrics.outlier_mask(d), [True, False, False])
    assert metrics.outlier_rate(np.r_[np.full(9, 0.3), 1e-9]) == pytest.approx(0.1)
    assert metrics.outlier_rate(np.full(5, 0.2)) == 0.0


def test_outliers_excluded_from_l_and_lr():
    y = np.array([[0.0], [0.1], [50.0]])
    logp = _gauss_logp(y, 0.0, 1.0)  # the last point is an outlier
    ll = metrics.mean_log_likelihood(logp)[0]
    assert ll == pytest.approx(logp[:2, 0].mean())
    base = metrics.baseline_log_density(y)
    assert metrics.log_likelihood_ratio(logp, y)[0] == pytest.approx(logp[:2, 0].mean() - base[:2, 0].mean())


def test_pit_values():
    mu, sigma = np.array([0.0, 1.0, 0.0]), np.array([1.0, 2.0, 1.0])
    q = metrics.normal_pit(mu, sigma, np.array([0.0, 3.0, -1e300]))
    assert q[0] == 0.5
    assert q[1] == pytest.approx(stats.norm.cdf(1.0), abs=1e-12)
    assert q[2] == 0.0


def test_trace_starts_even():
    s = metrics.trace_starts(200, 20, 50)
    assert s[0] == 0 and s[-1] == 180
    assert len(s) == 50
    with pytest.raises(ValueError):
        metrics.trace_starts(10, 20, 5)


@pytest.fixture(scope="module")
def pendulum_trace():
    ds = data.collect("pendulum", envs.random_policy("pendulum"), 400, seed=0)
    return ds, ds.traces(20)


def test_oracle_population_is_degenerate(pendulum_trace):
    ds, traces = pendulum_trace
    model = OracleModel("pendulum", sigma=1e-12)
    samples, truth = metrics.rollout_population(model, traces[0], 20, 10, np.random.default_rng(0), starts=[0, 50])
    assert samples.shape == (2, 10, 20, 4)
    assert truth.shape == (2, 20, 4)
    spread = samples.max(axis=1) - samples.min(axis=1)
    assert spread.max() < 1e-6
    r2 = metrics.r2_long(samples, truth)
    assert r2.shape == (20, 4)


def test_population_is_seeded(pendulum_trace):
    _, traces = pendulum_trace
    model = OracleModel("pendulum", sigma=0.1)
    a = metrics.rollout_population(model, traces[0], 5, 4, np.random.default_rng(3), starts=[0, 10])
    b = metrics.rollout_population(model, traces[0], 5, 4, np.random.default_rng(3), starts=[0, 10])
    assert a[0].tobytes() == b[0].tobytes()


def test_population_rejects_short_trace(pendulum_trace):
    _, traces = pendulum_trace
    with pytest.raises(ValueError):
        metrics.rollout_population(OracleModel("pendulum"), traces[0], 500, 4)


def test_ks_long_order_statistic():
    samples = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)  # (S, n, L, d)
    # truth below every sample has rank quantile 0, so KS over one start is 1
    assert metrics.ks_long(samples, np.array([[[0.0]]]))[0, 0] == pytest.approx(1.0)
    # truth tied with the second sample: "<=" count gives 2/4
    assert metrics.ks_long(samples, np.array([[[2.0]]]))[0, 0] == pytest.approx(0.5)
    assert metrics.ks_long(samples, np.array([[[9.0]]]))[0, 0] == pytest.approx(0.0)


def test_r2_long_collapses_to_one_step(pendulum_trace):
    _, traces = pendulum_trace
    tr = traces[0]
    model = OracleModel("pendulum", sigma=1e-9)
    starts = metrics.trace_starts(len(tr), 20, 10)
    samples, truth = metrics.rollout_population(model, tr, 1, 3, np.random.default_rng(0), starts=starts)
    mu = model.predict(tr.s[starts], tr.a[starts]).mean()
    np.testing.assert_allclose(metrics.r2_long(samples, truth)[0], metrics.r2_score(mu, truth[:, 0]), atol=1e-9)


class _FixedModel:
    """Teacher-forced predictions supplied directly, for report plumbing tests."""

    def __init__(self, mu, sigma):
        self.mu, self.sigma = mu, sigma

    def teacher_forced(self, s, a, s_next, r):
        return PredictiveDistribution.gaussian(self.mu, self.sigma)


def _dataset(n, seed=0):
    return data.collect("pendulum", envs.random_policy("pendulum"), n, seed=seed)


def test_report_schema_and_json_roundtrip(tmp_path, pendulum_trace):
    ds, traces = pendulum_trace
    model = OracleModel("pendulum", sigma=0.05)
    rep = metrics.evaluate_model(model, ds, traces, metrics.MetricConfig(n_population=5, n_starts=5),
                                 np.random.default_rng(0))
    for m in ("r2", "log_likelihood", "lr", "or", "ks"):
        assert len(rep.per_dim[m]) == 4
        assert m in rep.aggregate
    assert rep.aggregate["r2"] == pytest.approx(np.mean(rep.per_dim["r2"]))
    assert len(rep.curves["r2"]) == 20 and len(rep.curves["ks"]) == 20
    assert all(sum(h) == len(ds) for h in rep.histograms)
    back = metrics.MetricReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    rep.write_curves_csv(tmp_path / "c.csv")
    rep.write_histograms_csv(tmp_path / "h.csv")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 21
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 1 + 4 * 20


def test_report_flags_undefined_r2():
    spec = envs.get_spec("pendulum")
    n = 30
    rng = np.random.default_rng(0)
    s = envs.pendulum_state(rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))
    ds = data.TransitionDataset(spec, "custom", s, np.zeros((n, 1)), np.zeros(n), s.copy(), np.zeros(n, bool))
    y = ds.targets
    rep = metrics.evaluate_model(_FixedModel(y + 0.01, np.full_like(y, 0.1)), ds)
    assert math.isnan(rep.per_dim["r2"][3])
    assert any("r2" in f for f in rep.flags)
    assert math.isfinite(rep.aggregate["r2"])


def test_true_conditional_gaussian_is_calibrated():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, size=(10_000, 1))
    mu, sigma = np.sin(x), 0.1 + 0.3 * np.abs(x)
    y = mu + sigma * rng.normal(size=x.shape)
    assert metrics.ks_statistic(metrics.normal_pit(mu, sigma, y)) < 0.05
    wide = metrics.normal_pit(mu, 3 * sigma, y)
    assert metrics.ks_statistic(wide) > 0.2
    h = metrics.quantile_histogram(wide)
    assert h.argmax() in (9, 10)
