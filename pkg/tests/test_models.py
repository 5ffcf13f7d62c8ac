from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from armopo import data
from armopo import env as envs
from armopo.nnet import DenseNet
from armopo.models import (
    DARMDN,
    DMDN,
    Ensemble,
    ModelConfig,
    OracleModel,
    PredictiveDistribution,
    load_model,
    save_model,
    train_model,
)

SMALL = dict(hidden=32, epochs=40, batch_size=64, lr=3e-3, patience=10)


@pytest.fixture(scope="module")
def pendulum_split():
    ds = data.collect("pendulum", envs.random_policy("pendulum"), 3000, seed=0, regime="random")
    return data.split(ds, 0.1, 0)


@pytest.fixture(scope="module")
def trained(pendulum_split):
    tr, va = pendulum_split
    out = {}
    for kind in ("dmdn", "darmdn", "ensemble"):
        out[kind], _ = train_model(tr, va, ModelConfig(kind=kind, **SMALL), seed=1)
    return out


def test_gaussian_log_density_matches_scipy():
    d = PredictiveDistribution.gaussian([[0.5, -1.0]], [[2.0, 0.3]])
    y = np.array([[1.0, -0.8]])
    ref = stats.norm.logpdf(y, loc=[[0.5, -1.0]], scale=[[2.0, 0.3]])
    np.testing.assert_allclose(d.log_density(y), ref, rtol=1e-12)
    np.testing.assert_allclose(d.cdf(y), stats.norm.cdf(y, loc=[[0.5, -1.0]], scale=[[2.0, 0.3]]), rtol=1e-12)


@settings(max_examples=30)
@given(
    m1=st.floats(-5, 5), m2=st.floats(-5, 5), s1=st.floats(0.1, 3), s2=st.floats(0.1, 3), y=st.floats(-8, 8)
)
def test_mixture_density_and_moments(m1, m2, s1, s2, y):
    d = PredictiveDistribution.mixture([np.array([[m1]]), np.array([[m2]])], [np.array([[s1]]), np.array([[s2]])])
    ref = math.log(0.5 * stats.norm.pdf(y, m1, s1) + 0.5 * stats.norm.pdf(y, m2, s2))
    assert d.log_density(np.array([[y]]))[0, 0] == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert d.mean()[0, 0] == pytest.approx(0.5 * (m1 + m2))
    var = 0.5 * (s1**2 + s2**2) + 0.25 * (m1 - m2) ** 2
    assert d.std()[0, 0] == pytest.approx(math.sqrt(var), rel=1e-10)


def test_distribution_validation():
    with pytest.raises(ValueError):
        PredictiveDistribution.gaussian([[0.0]], [[0.0]])


@pytest.mark.parametrize("kind", ["dmdn", "darmdn", "ensemble"])
def test_shapes_and_finiteness(trained, pendulum_split, kind):
    model = trained[kind]
    _, va = pendulum_split
    s, a = va.s[:7], va.a[:7]
    d = model.predict(s, a)
    assert d.mean().shape == (7, 4)
    s_next, r, moms = model.sample_with_moments(s, a, np.random.default_rng(0))
    assert s_next.shape == (7, 3) and r.shape == (7,)
    assert len(moms) == (3 if kind == "ensemble" else 1)
    total, per_dim = model.log_density(s, a, va.s_next[:7], va.r[:7])
    assert per_dim.shape == (7, 4) and np.all(np.isfinite(total))


@pytest.mark.parametrize("kind", ["dmdn", "darmdn", "ensemble"])
def test_models_learn_random_pendulum(trained, pendulum_split, kind):
    _, va = pendulum_split
    mu = trained[kind].teacher_forced(va.s, va.a, va.s_next, va.r).mean()
    y = np.concatenate([va.s_next, va.r[:, None]], axis=1)
    r2 = 1 - ((y - mu) ** 2).sum(0) / ((y - y.mean(0)) ** 2).sum(0)
    assert np.all(r2 > 0.8), r2  # smoke bound for a 32-unit, 40-epoch model


def test_darmdn_teacher_forcing_uses_true_prefix(trained, pendulum_split):
    model = trained["darmdn"]
    _, va = pendulum_split
    s, a, sn, r = va.s[:5], va.a[:5], va.s_next[:5], va.r[:5]
    base = model.teacher_forced(s, a, sn, r).mu[:, 0]
    sn2 = sn.copy()
    sn2[:, 2] += 1.0  # the last state dimension conditions only the reward net
    moved = model.teacher_forced(s, a, sn2, r).mu[:, 0]
    np.testing.assert_array_equal(base[:, :3], moved[:, :3])
    assert not np.allclose(base[:, 3], moved[:, 3])


def test_darmdn_first_conditional_ignores_targets(trained, pendulum_split):
    model = trained["darmdn"]
    _, va = pendulum_split
    s, a = va.s[:4], va.a[:4]
    tf = model.teacher_forced(s, a, va.s_next[:4], va.r[:4]).mu[:, 0, 0]
    _, _, moms = model.sample_with_moments(s, a, np.random.default_rng(3))
    np.testing.assert_allclose(moms[0][0][:, 0], tf, rtol=1e-12)


def test_darmdn_ancestral_sampling_is_seeded(trained, pendulum_split):
    model = trained["darmdn"]
    _, va = pendulum_split
    a = model.sample(va.s[:9], va.a[:9], np.random.default_rng(5))
    b = model.sample(va.s[:9], va.a[:9], np.random.default_rng(5))
    c = model.sample(va.s[:9], va.a[:9], np.random.default_rng(6))
    assert a[0].tobytes() == b[0].tobytes()
    assert not np.array_equal(a[0], c[0])


def test_ensemble_mixture_moments(trained, pendulum_split):
    ens = trained["ensemble"]
    _, va = pendulum_split
    s, a = va.s[:6], va.a[:6]
    mus = np.stack([m.predict(s, a).mean() for m in ens.members])
    sig = np.stack([m.predict(s, a).std() for m in ens.members])
    d = ens.predict(s, a)
    np.testing.assert_allclose(d.mean(), mus.mean(0), rtol=1e-12)
    np.testing.assert_allclose(d.std() ** 2, (sig**2).mean(0) + mus.var(0), rtol=1e-9)


def test_ensemble_members_are_distinct_but_close(pendulum_split):
    tr, va = pendulum_split
    ens, _ = train_model(tr, va, ModelConfig(kind="ensemble", **SMALL), seed=2)
    y = np.concatenate([va.s_next, va.r[:, None]], axis=1)
    r2s = []
    for m in ens.members:
        mu = m.predict(va.s, va.a).mean()
        r2s.append(np.mean(1 - ((y - mu) ** 2).sum(0) / ((y - y.mean(0)) ** 2).sum(0)))
    assert max(r2s) - min(r2s) < 0.02, r2s
    assert not np.array_equal(ens.members[0].params, ens.members[1].params)


@pytest.mark.parametrize("kind", ["dmdn", "darmdn", "ensemble"])
def test_save_load_roundtrip(tmp_path, trained, pendulum_split, kind):
    model = trained[kind]
    save_model(model, tmp_path / kind, ModelConfig(kind=kind, **SMALL))
    back = load_model(tmp_path / kind)
    assert type(back) is type(model)
    _, va = pendulum_split
    s, a = va.s[:10], va.a[:10]
    assert back.predict(s, a).mu.tobytes() == model.predict(s, a).mu.tobytes()
    x = back.sample(s, a, np.random.default_rng(1))[0]
    y = model.sample(s, a, np.random.default_rng(1))[0]
    assert x.tobytes() == y.tobytes()


def test_training_is_reproducible(pendulum_split):
    tr, va = pendulum_split
    cfg = ModelConfig(kind="dmdn", hidden=8, epochs=2, batch_size=64)
    m1, _ = train_model(tr, va, cfg, seed=4)
    m2, _ = train_model(tr, va, cfg, seed=4)
    assert m1.params.tobytes() == m2.params.tobytes()


def test_bad_order_and_kind():
    with pytest.raises(ValueError):
        ModelConfig(kind="gp")
    stats_ = OracleModel("pendulum").stats
    with pytest.raises(ValueError):
        DARMDN([], [], 3, 1, stats_, order=(0, 0, 1, 2))


def test_untrainable_model_kind_cannot_be_saved(tmp_path):
    with pytest.raises(TypeError):
        save_model(OracleModel("pendulum"), tmp_path)


def test_non_finite_input_rejected(trained):
    with pytest.raises(ValueError, match="non-finite"):
        trained["dmdn"].predict(np.array([[np.nan, 0.0, 0.0]]), np.array([[0.0]]))


@pytest.mark.parametrize("env_id", ["pendulum", "hopper_lite"])
def test_oracle_mean_is_true_step(env_id):
    model = OracleModel(env_id)
    spec = envs.get_spec(env_id)
    s = envs.reset(env_id, 2)[None]
    a = ((spec.low + spec.high) / 2)[None]
    truth = envs.step(env_id, s[0], a[0])
    mu = model.predict(s, a).mean()[0]
    np.testing.assert_array_equal(mu[:-1], truth.next_state)
    assert mu[-1] == truth.reward
    assert model.moments(s, a)[0][1][0, 0] == pytest.approx(math.exp(-10))


def test_model_classes_exported():
    assert {DMDN.kind, DARMDN.kind, Ensemble.kind} == {"dmdn", "darmdn", "ensemble"}


def _stats(ds):
    return data.compute_stats(ds)


def test_zero_initialised_dmdn_predicts_stats(pendulum_split):
    tr, _ = pendulum_split
    st_ = _stats(tr)
    net = DenseNet((4, 8), 4)
    model = DMDN(net, net.init_params(np.random.default_rng(0), zero_output=True), 3, 1, st_)
    s, a = tr.s[:5], tr.a[:5]
    d = model.predict(s, a)
    np.testing.assert_allclose(d.mean()[:, :3], s + st_.mean_out[:3], atol=1e-12)
    np.testing.assert_allclose(d.mean()[:, 3], st_.mean_out[3], atol=1e-12)
    np.testing.assert_allclose(d.std(), np.broadcast_to(st_.std_out, (5, 4)), rtol=1e-12)
    assert d.mu.tobytes() == model.predict(s, a).mu.tobytes()


def test_factorisation_identity(trained, pendulum_split):
    _, va = pendulum_split
    total, per_dim = trained["darmdn"].ar_log_density(va.s, va.a, va.s_next, va.r)
    np.testing.assert_array_equal(total, per_dim.sum(axis=1))


def test_darmdn_without_conditioning_equals_dmdn(pendulum_split):
    tr, va = pendulum_split
    st_ = _stats(tr)
    rng = np.random.default_rng(0)
    joint = DenseNet((4, 6), 4)
    jp = joint.init_params(rng) + 0.1 * rng.normal(size=joint.n_params)
    dmdn = DMDN(joint, jp, 3, 1, st_)
    (w1, b1), (wm1, bm1), (wm2, bm2), (wl1, bl1), (wl2, bl2) = joint.layers(jp)
    nets, params = [], []
    for j in range(4):
        net = DenseNet((4 + j, 6), 1)
        p = net.init_params(rng)
        (v1, c1), (vm1, cm1), (vm2, cm2), (vl1, cl1), (vl2, cl2) = net.layers(p)
        v1[...] = 0.0  # conditioning inputs get zero weight
        v1[:4] = w1
        c1[...] = b1
        vm1[...], cm1[...], vl1[...], cl1[...] = wm1, bm1, wl1, bl1
        vm2[...], cm2[...] = wm2[:, [j]], bm2[[j]]
        vl2[...], cl2[...] = wl2[:, [j]], bl2[[j]]
        nets.append(net)
        params.append(p)
    dar = DARMDN(nets, params, 3, 1, st_)
    a = dmdn.log_density(va.s, va.a, va.s_next, va.r)[0]
    b = dar.ar_log_density(va.s, va.a, va.s_next, va.r)[0]
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_raw_log_density_change_of_variables(trained, pendulum_split):
    model = trained["dmdn"]
    _, va = pendulum_split
    s, a, sn, r = va.s[:20], va.a[:20], va.s_next[:20], va.r[:20]
    _, mu, ls = model._std_forward(s, a)
    y = model._std_targets(s, sn, r)
    std_logp = stats.norm.logpdf(y, mu, np.exp(ls)).sum(axis=1)
    raw = model.log_density(s, a, sn, r)[0]
    np.testing.assert_allclose(raw, std_logp - np.log(model.stats.std_out).sum(), rtol=1e-10, atol=1e-10)


def _collapse(model):
    """Push every log-sigma head to the lower clamp."""
    nets = model.nets if isinstance(model, DARMDN) else [model.net]
    params = model.params if isinstance(model, DARMDN) else [model.params]
    for net, p in zip(nets, params):
        w, b = net.layers(p)[-1]  # log-sigma output layer
        w[...] = 0.0
        b[...] = -50.0


@pytest.mark.parametrize("kind", ["dmdn", "darmdn"])
def test_vanishing_sigma_sample_equals_mean(pendulum_split, kind):
    tr, va = pendulum_split
    model, _ = train_model(tr, va, ModelConfig(kind=kind, hidden=8, epochs=1), seed=0)
    _collapse(model)
    s, a = va.s[:50], va.a[:50]
    sn, r = model.sample(s, a, np.random.default_rng(0))
    mean = model.predict(s, a).mean()
    y_std = model._std_targets(s, sn, r)
    mean_std = model._std_targets(s, mean[:, :3], mean[:, 3])
    np.testing.assert_allclose(y_std, mean_std, atol=1e-3)


def test_identical_member_ensemble_matches_single(trained, pendulum_split):
    single = trained["dmdn"]
    ens = Ensemble([single, single, single])
    _, va = pendulum_split
    s, a = np.repeat(va.s[:1], 10000, axis=0), np.repeat(va.a[:1], 10000, axis=0)
    x = ens.sample(s, a, np.random.default_rng(0))
    y = single.sample(s, a, np.random.default_rng(1))
    xs = np.column_stack([x[0], x[1]])
    ys = np.column_stack([y[0], y[1]])
    for j in range(4):
        assert stats.ks_2samp(xs[:, j], ys[:, j]).statistic < 0.02
    moms = ens.moments(va.s[:3], va.a[:3])
    assert len(moms) == 3
    for mu, sig in moms[1:]:
        np.testing.assert_array_equal(mu, moms[0][0])
        np.testing.assert_array_equal(sig, moms[0][1])


def test_single_model_moments_match_predict(trained, pendulum_split):
    _, va = pendulum_split
    moms = trained["dmdn"].moments(va.s[:4], va.a[:4])
    d = trained["dmdn"].predict(va.s[:4], va.a[:4])
    assert len(moms) == 1
    np.testing.assert_array_equal(moms[0][0], d.mean())
    np.testing.assert_array_equal(moms[0][1], d.std())


def test_trained_ensemble_members_disagree(trained, pendulum_split):
    _, va = pendulum_split
    moms = trained["ensemble"].moments(va.s[:1], va.a[:1])
    assert any(not np.array_equal(moms[0][0], m[0]) for m in moms[1:])
    assert len(trained["ensemble"].members) == 3


def test_zero_sigma_darmdn_sampling_chains_means(pendulum_split):
    tr, va = pendulum_split
    model, _ = train_model(tr, va, ModelConfig(kind="darmdn", hidden=8, epochs=1), seed=0)
    _collapse(model)
    s, a = va.s[:5], va.a[:5]
    sn, r = model.sample(s, a, np.random.default_rng(0))
    mean = model.predict(s, a).mean()
    np.testing.assert_allclose(np.column_stack([sn, r]), mean, atol=1e-3 * model.stats.std_out.max())


def test_sin_dimension_benefits_from_conditioning(trained, pendulum_split):
    from armopo import metrics

    _, va = pendulum_split
    j = 1  # sin(theta), conditioned on cos(theta) by the autoregressive model
    assert metrics.lr(trained["darmdn"], va, j) > metrics.lr(trained["dmdn"], va, j)
