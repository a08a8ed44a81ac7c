import math

import numpy as np
import pytest

from mvhidden.model import ModelError, make_model
from mvhidden.wonham import (
    FilterConfig,
    FilterError,
    FilterState,
    alpha_bar,
    filter_observations,
    filter_step,
    filter_step_penalized,
    forward_distribution,
    innovation_increments,
    run_filter,
    write_filter_csv,
)

from conftest import gbm_toy


def _log_step_oracle(Q, g, sigma0, h2, p, eps):
    """Term-by-term evaluation of the log-coordinate update, no renormalisation."""
    m = len(p)
    abar = sum(g[j] * p[j] for j in range(m))
    v = []
    for i in range(m):
        inflow = sum(Q[j][i] * p[j] for j in range(m)) / p[i]
        quad = (g[i] - abar) ** 2 / (2.0 * sigma0**2)
        v.append(math.log(p[i]) + h2 * (inflow - quad) + math.sqrt(h2) * (g[i] - abar) * eps / sigma0)
    return v


def test_alpha_bar(ex71):
    assert alpha_bar(ex71, [0.5, 0.5]) == 2.5
    assert alpha_bar(ex71, [1.0, 0.0]) == 2.0
    assert alpha_bar(gbm_toy(), [1.0]) == 0.0
    with pytest.raises(ModelError):
        alpha_bar(ex71, [1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(h2=0.0)
    with pytest.raises(ValueError):
        FilterConfig(M=-1.0)


@pytest.mark.parametrize("eps", [-3.0, 0.0, 2.5])
def test_single_regime_stays_one(eps):
    cfg = FilterConfig(h2=1e-3)
    state = filter_step(gbm_toy(), cfg, FilterState.from_p([1.0]), eps)
    assert state.p[0] == 1.0 and state.v[0] == 0.0


def test_example_step_zero_noise(ex71):
    cfg = FilterConfig(h2=1e-3, renormalize_each_step=False)
    state = filter_step(ex71, cfg, FilterState.from_p([0.5, 0.5]), 0.0)
    assert state.v[0] == pytest.approx(math.log(0.5) - 1.25e-4, abs=1e-15)
    assert state.p[0] == pytest.approx(0.5 * math.exp(-1.25e-4), rel=1e-14)
    assert state.t == pytest.approx(1e-3)


def test_step_matches_term_oracle(ex71, rng):
    cfg = FilterConfig(h2=1e-3, renormalize_each_step=False)
    for _ in range(200):
        p = rng.dirichlet([1.0, 1.0]) * 0.98 + 0.01
        eps = float(rng.standard_normal())
        got = filter_step(ex71, cfg, FilterState.from_p(p), eps)
        want = _log_step_oracle(ex71.Q.tolist(), ex71.g.tolist(), ex71.sigma0, cfg.h2, p.tolist(), eps)
        np.testing.assert_allclose(got.v, want, rtol=0, atol=1e-14)
        np.testing.assert_allclose(got.p, np.exp(want), rtol=1e-12)


def test_symmetric_model_has_no_noise():
    model = make_model(
        Q=[[-1.0, 1.0], [1.0, -1.0]],
        g=[2.0, 2.0],
        sigma0=1.0,
        r=([0.0, 0.0], [0.0, 0.0]),
        b=([[0.0, 0.0]], [[0.0, 0.0]]),
        sigma_bar=([[[0.0, 0.0]]], [[[0.0, 0.0]]]),
    )
    cfg = FilterConfig(h2=1e-3)
    a = filter_step(model, cfg, FilterState.from_p([0.5, 0.5]), 3.0)
    b = filter_step(model, cfg, FilterState.from_p([0.5, 0.5]), -3.0)
    np.testing.assert_array_equal(a.p, b.p)
    np.testing.assert_allclose(a.p, [0.5, 0.5], atol=1e-15)


def test_step_rejects_bad_input(ex71):
    cfg = FilterConfig()
    with pytest.raises(FilterError):
        filter_step(ex71, cfg, FilterState.from_p([1.0, 0.0]), 0.0)
    with pytest.raises(FilterError):
        filter_step(ex71, cfg, FilterState.from_p([0.5, 0.5]), math.nan)


def test_state_invariants(ex71, rng):
    state = FilterState.from_p([0.5, 0.5])
    cfg = FilterConfig(h2=1e-3)
    for e in rng.standard_normal(500):
        state = filter_step(ex71, cfg, state, float(e))
        assert abs(state.p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(state.p, np.exp(state.v), rtol=1e-12)
    raw = FilterState(np.array([0.2, 0.6]), np.log([0.2, 0.6])).normalize()
    assert raw.p.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(raw.p, np.exp(raw.v), rtol=1e-15)


def test_penalized_barrier_branch(ex71):
    cfg = FilterConfig(h2=1e-3, M=20.0, renormalize_each_step=False)
    tiny = math.exp(-2 * cfg.M)
    state = FilterState.from_p([tiny, 1.0 - tiny])
    out = filter_step_penalized(ex71, cfg, state, 0.0)
    assert out.v[0] - state.v[0] == pytest.approx(-cfg.M * cfg.h2, rel=1e-12)
    # same diffusion term under noise
    out = filter_step_penalized(ex71, cfg, state, 1.0)
    abar = float(state.p @ ex71.g)
    noise = math.sqrt(cfg.h2) * (ex71.g[0] - abar) / ex71.sigma0
    assert out.v[0] - state.v[0] == pytest.approx(-cfg.M * cfg.h2 + noise, rel=1e-12)


def test_penalized_equals_plain_inside(ex71, rng):
    for renorm in (True, False):
        cfg = FilterConfig(h2=1e-3, renormalize_each_step=renorm)
        for _ in range(100):
            state = FilterState.from_p(rng.dirichlet([2.0, 2.0]))
            eps = float(rng.standard_normal())
            a = filter_step(ex71, cfg, state, eps)
            b = filter_step_penalized(ex71, cfg, state, eps)
            assert np.array_equal(a.p, b.p) and np.array_equal(a.v, b.v)


def test_penalized_handles_exact_zero(ex71):
    out = filter_step_penalized(ex71, FilterConfig(), FilterState.from_p([0.0, 1.0]), 0.5)
    assert np.all(np.isfinite(out.v)) and out.p[0] >= 0.0


@pytest.mark.parametrize("renorm", [True, False])
def test_penalized_long_run_stability(ex71, renorm):
    cfg = FilterConfig(h2=1e-3, renormalize_each_step=renorm)
    eps = np.random.default_rng(7).standard_normal(100_000) * 3.0
    path = run_filter(ex71, cfg, [0.5, 0.5], eps, penalized=True)
    p = np.array([s.p for s in path])
    assert np.all(np.isfinite(p))
    assert p.max() <= math.exp(10.0)
    assert p.min() >= 0.0


def test_rademacher_option(ex71):
    from mvhidden.wonham import draw_noise

    draws = draw_noise(FilterConfig(noise="rademacher"), np.random.default_rng(0), 1000)
    assert set(np.unique(draws)) == {-1.0, 1.0}


def test_raw_mass_drift_bound(ex71):
    # statistical bound over seeded runs; rare tail paths drift further
    cfg = FilterConfig(h2=1e-3, renormalize_each_step=False)
    worst = []
    for seed in range(100):
        eps = np.random.default_rng(seed).standard_normal(int(round(ex71.T / cfg.h2)))
        state = FilterState.from_p([0.5, 0.5])
        drift = 0.0
        for e in eps:
            state = filter_step_penalized(ex71, cfg, state, float(e))
            drift = max(drift, abs(state.p.sum() - 1.0))
        worst.append(drift)
    assert np.mean(worst) < 0.05
    assert np.percentile(worst, 90) < 0.05


def test_innovations_invert_zero_noise(ex71):
    h2 = 1e-3
    p_path = np.tile([0.3, 0.7], (11, 1))
    abar = 0.3 * 2 + 0.7 * 3
    y = abar * h2 * np.arange(11)
    np.testing.assert_allclose(innovation_increments(ex71, y, p_path, h2), 0.0, atol=1e-10)
    with pytest.raises(ModelError):
        innovation_increments(ex71, y, p_path[:5], h2)


def test_innovations_constant_regime_are_brownian(ex71):
    h2 = 1e-3
    w = np.random.default_rng(3).standard_normal(50)
    # regime 1 forever and a posterior pinned to it: drift cancels exactly
    y = np.concatenate([[0.0], np.cumsum(2.0 * h2 + ex71.sigma0 * math.sqrt(h2) * w)])
    eps = innovation_increments(ex71, y, np.tile([1.0, 0.0], (51, 1)), h2)
    np.testing.assert_allclose(eps, w, atol=1e-9)


def test_innovations_statistics(ex71):
    from mvhidden.simulate import sample_ctmc_path

    h2, N = 1e-3, 10_000
    model = make_model(ex71.Q, ex71.g, ex71.sigma0, (ex71.r0, ex71.r1), (ex71.b0, ex71.b1), (ex71.s0, ex71.s1), (0.0, N * h2))
    path = sample_ctmc_path(model, seed=11, p0=[0.5, 0.5])
    alpha = path.at(h2 * np.arange(N)) - 1
    dy = model.g[alpha] * h2 + model.sigma0 * math.sqrt(h2) * np.random.default_rng(11).standard_normal(N)
    y = np.concatenate([[0.0], np.cumsum(dy)])
    p_path = filter_observations(model, FilterConfig(h2=h2), [0.5, 0.5], y)
    eps = innovation_increments(model, y, p_path, h2)
    assert abs(eps.mean()) <= 4.0 / math.sqrt(N)
    assert abs(eps.var() - 1.0) <= 0.1


def test_uninformative_limit_tracks_forward_equation(ex71):
    quiet = make_model(ex71.Q, ex71.g, 1e6, (ex71.r0, ex71.r1), (ex71.b0, ex71.b1), (ex71.s0, ex71.s1), (0.0, 1.0))
    h2, N = 1e-4, 10_000
    cfg = FilterConfig(h2=h2)
    eps = np.random.default_rng(5).standard_normal(N)
    path = run_filter(quiet, cfg, [0.9, 0.1], eps)
    p = np.array([s.p for s in path])
    exact = forward_distribution(quiet, [0.9, 0.1], h2 * np.arange(N + 1))
    assert np.max(np.abs(p - exact)) <= 1e-3


def test_forward_distribution_stationary(ex71):
    out = forward_distribution(ex71, [1.0, 0.0], [0.0, 50.0])
    np.testing.assert_allclose(out[0], [1.0, 0.0])
    np.testing.assert_allclose(out[1], [0.5, 0.5], atol=1e-12)


def test_filter_csv(ex71, tmp_path):
    path = run_filter(ex71, FilterConfig(), [0.5, 0.5], [0.1, -0.2])
    out = tmp_path / "f.csv"
    write_filter_csv(out, path)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,p_1,p_2,v_1,v_2"
    assert len(lines) == 4
    row = [float(v) for v in lines[-1].split(",")]
    assert row[1] == path[-1].p[0] and row[3] == path[-1].v[0]
