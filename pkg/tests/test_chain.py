import numpy as np
import pytest

from mvhidden.chain import (
    GridError,
    GridSpec,
    check_cfl,
    grid_problems,
    local_consistency_stats,
    p_layer_terms,
    p_transition_terms,
    shift,
    x_kernel,
    x_transition_probs,
)
from mvhidden.model import control_set, diffusion, drift, make_model

from conftest import gbm_toy, two_regime_toy


def _affine_toy(r, b, sigma, T=1.0):
    return make_model([[0.0]], [0.0], 1.0, ([r], [0.0]), ([[b]], [[0.0]]), ([[[sigma]]], [[[0.0]]]), (0.0, T))


def test_grid_shapes(ex71, ex71_grid):
    assert ex71_grid.n_steps == 750
    assert ex71_grid.n_x == 25
    assert ex71_grid.p_shape == (5,)
    np.testing.assert_allclose(ex71_grid.p_coords()[1], [0.25, 0.75])
    full = GridSpec.build(ex71, 0.25, 0.001, 0.0, 6.0, "full")
    assert full.layer_shape == (25, 5, 5)
    assert GridSpec.build(gbm_toy(), 0.25, 0.01, 0.0, 2.0).p_mode == "single"


def test_grid_problems(ex71):
    assert grid_problems(ex71, 0.25, 0.001, 0.0, 6.0, "reduced") == []
    problems = grid_problems(ex71, 0.3, 0.0007, 0.0, 6.1, "reduced")
    assert len(problems) == 3
    assert any("1 / h1" in p for p in problems)
    assert "single p_mode requires m = 1" in grid_problems(ex71, 0.25, 0.001, 0.0, 6.0, "single")
    with pytest.raises(GridError):
        GridSpec.build(ex71, 0.3, 0.001, 0.0, 6.0)


def test_nearest_node(ex71_grid):
    assert ex71_grid.node(1.1, [0.55, 0.45]) == (4, 2)
    assert ex71_grid.node(-3.0, [1.2, -0.2]) == (0, 4)
    assert ex71_grid.node(9.0, [0.0, 1.0]) == (24, 0)


def test_shift_clamps_edges():
    layer = np.arange(4.0)
    np.testing.assert_array_equal(shift(layer, 0, 1), [1, 2, 3, 3])
    np.testing.assert_array_equal(shift(layer, 0, -1), [0, 0, 1, 2])


def test_symmetric_pure_diffusion(ex71_grid):
    # b = 0 and a = s by construction: r = 0, b = r, sigma = sqrt(s)
    s = 0.8
    toy = _affine_toy(0.0, 0.0, np.sqrt(s))
    grid = GridSpec.build(toy, 0.25, 0.001, 0.0, 2.0)
    stay, up, down = x_transition_probs(toy, grid, 0.0, 1.0, [1.0], 1.0)
    h1, h2 = 0.25, 0.001
    assert up == pytest.approx(s * h2 / (2 * h1**2), rel=1e-14)
    assert down == up
    assert stay == pytest.approx(1 - s * h2 / h1**2, rel=1e-14)


def test_pure_drift_is_one_sided():
    toy = _affine_toy(0.0, 2.0, 0.0)
    grid = GridSpec.build(toy, 0.25, 0.001, 0.0, 2.0)
    stay, up, down = x_transition_probs(toy, grid, 0.0, 1.0, [1.0], 1.0)
    assert up == pytest.approx(2.0 * 0.001 / 0.25, rel=1e-14)
    assert down == 0.0
    assert stay == pytest.approx(1 - 2.0 * 0.001 / 0.25, rel=1e-14)


def test_example_node(ex71, ex71_grid):
    # b = 1.5 - 2 * 0.5 = 0.5, a = (0.5 * 1.5)^2 = 0.5625
    stay, up, down = x_transition_probs(ex71, ex71_grid, 0.0, 1.0, [0.5, 0.5], 0.5)
    assert up == pytest.approx((0.5625e-3 + 2 * 0.25 * 0.001 * 0.5) / 0.125, rel=1e-13)
    assert up == pytest.approx(6.5e-3, rel=1e-13)
    assert down == pytest.approx(4.5e-3, rel=1e-13)
    assert stay == pytest.approx(0.989, rel=1e-13)


def test_kernel_matches_pointwise(ex71, ex71_grid, ex71_controls, rng):
    for _ in range(20):
        n = int(rng.integers(ex71_grid.n_steps))
        t = ex71_grid.time(n)
        kern = x_kernel(ex71, ex71_grid, t, ex71_controls)
        k, i, j = (int(rng.integers(s)) for s in kern.up.shape)
        p = ex71_grid.p_coords()[j]
        stay, up, down = x_transition_probs(ex71, ex71_grid, t, ex71_grid.x_nodes[i], p, ex71_controls[k])
        assert kern.up[k, i, j] == pytest.approx(up, rel=1e-13, abs=1e-18)
        assert kern.down[k, i, j] == pytest.approx(down, rel=1e-13, abs=1e-18)
        assert kern.stay[k, i, j] == pytest.approx(stay, rel=1e-13)


def test_kernel_deterministic(ex71, ex71_grid, ex71_controls):
    a = x_kernel(ex71, ex71_grid, 0.3, ex71_controls)
    b = x_kernel(ex71, ex71_grid, 0.3, ex71_controls)
    assert np.array_equal(a.up, b.up) and np.array_equal(a.stay, b.stay)


def test_p_terms_example(ex71, ex71_grid):
    up, down, diag = p_transition_terms(ex71, ex71_grid, 0.0, [0.5, 0.5])
    assert up[0] == pytest.approx(5e-4, rel=1e-13)
    assert down[0] == pytest.approx(5e-4, rel=1e-13)
    assert diag[0] == pytest.approx(-1e-3, rel=1e-13)


def test_p_terms_quiet_coordinate():
    model = make_model(
        Q=[[-1.0, 1.0], [1.0, -1.0]],
        g=[1.0, 1.0],
        sigma0=1.0,
        r=([0.0, 0.0], [0.0, 0.0]),
        b=([[0.0, 0.0]], [[0.0, 0.0]]),
        sigma_bar=([[[0.0, 0.0]]], [[[0.0, 0.0]]]),
    )
    grid = GridSpec.build(model, 0.25, 0.01, 0.0, 1.0)
    for term in p_transition_terms(model, grid, 0.0, [0.5, 0.5]):
        np.testing.assert_array_equal(term, 0.0)


def test_p_terms_hand_oracle(rng):
    model = two_regime_toy()
    grid = GridSpec.build(model, 0.25, 0.001, 0.0, 2.0)
    h1, h2 = 0.25, 0.001
    for _ in range(50):
        p = rng.uniform(0, 1, 2)
        up, down, diag = p_transition_terms(model, grid, 0.0, p)
        abar = model.g @ p
        for i in range(2):
            c = (p[i] * (model.g[i] - abar)) ** 2 / model.sigma0**2
            q = model.Q[0, i] * p[0] + model.Q[1, i] * p[1]
            assert up[i] == pytest.approx((c * h2 + 2 * h1 * max(q, 0) * h2) / (2 * h1**2), rel=1e-12, abs=1e-18)
            assert down[i] == pytest.approx((c * h2 + 2 * h1 * max(-q, 0) * h2) / (2 * h1**2), rel=1e-12, abs=1e-18)
            assert diag[i] == pytest.approx(-c * h2 / h1**2 - h2 * abs(q) / h1, rel=1e-12, abs=1e-18)


def test_p_terms_sum_to_zero(ex71, ex71_grid, rng):
    for _ in range(10_000):
        p = rng.uniform(0, 1, 2)
        up, down, diag = p_transition_terms(ex71, ex71_grid, 0.0, p)
        assert np.all(np.abs(up + down + diag) <= 1e-12)
        assert np.all(diag <= 0)


def test_reduced_mode_differs_only_first_coordinate(ex71, ex71_grid):
    terms = p_layer_terms(ex71, ex71_grid)
    assert [axis for axis, *_ in terms] == [1]
    full = GridSpec.build(ex71, 0.25, 0.001, 0.0, 6.0, "full")
    assert [axis for axis, *_ in p_layer_terms(ex71, full)] == [1, 2]


def test_cfl_example(ex71, ex71_grid, ex71_controls):
    report = check_cfl(ex71, ex71_grid, ex71_controls)
    assert report.passed
    assert report.n_violations == 0
    assert 0 < report.max_coefficient <= 1
    # oracle: brute force over every (n, x, p, u) with the scalar formulas
    worst = 0.0
    for n in (0, ex71_grid.n_steps - 1):
        t = ex71_grid.time(n)
        for x in ex71_grid.x_nodes:
            for p in ex71_grid.p_coords():
                for u in ex71_controls:
                    b = drift(ex71, t, x, p, u)
                    _, a = diffusion(ex71, t, x, p, u)
                    worst = max(worst, 0.001 * (abs(b) / 0.25 + a / 0.0625))
    # coefficients grow with t, so the last layer attains the maximum
    assert report.max_coefficient == pytest.approx(worst, rel=1e-12)
    assert report.max_p_diag == pytest.approx(2e-3, rel=1e-12)


def test_cfl_pure_drift_passes():
    toy = _affine_toy(0.0, 1.0, 0.0)
    grid = GridSpec.build(toy, 0.25, 0.01, 0.0, 2.0)
    report = check_cfl(toy, grid, control_set(-1, 1, 5))
    assert report.passed
    assert report.max_coefficient == pytest.approx(0.01 / 0.25, rel=1e-14)


def test_cfl_linear_in_h2():
    toy = gbm_toy(r=0.05, b=0.2, sigma=0.5)
    U = control_set(-2, 2, 9)
    one = check_cfl(toy, GridSpec.build(toy, 0.25, 0.01, 0.0, 3.0), U)
    two = check_cfl(toy, GridSpec.build(toy, 0.25, 0.02, 0.0, 3.0), U)
    assert two.max_coefficient == pytest.approx(2 * one.max_coefficient, rel=1e-14)


def test_cfl_coarse_grid_fails(ex71, ex71_controls):
    grid = GridSpec.build(ex71, 0.01, 0.01, 0.0, 1.0, "reduced")
    report = check_cfl(ex71, grid, ex71_controls)
    assert not report.passed
    assert report.max_coefficient > 1
    assert report.n_violations > 0 and 0 < len(report.violations) <= 50
    assert "FAIL" in report.text()
    assert report.to_dict()["passed"] is False


def test_local_consistency_identities(ex71, ex71_grid, rng):
    h1, h2 = ex71_grid.h1, ex71_grid.h2
    for _ in range(500):
        t = float(rng.uniform(0, 0.75))
        x = float(rng.choice(ex71_grid.x_nodes))
        p = ex71_grid.p_coords()[int(rng.integers(5))]
        u = float(rng.uniform(-2, 2))
        stats = local_consistency_stats(ex71, ex71_grid, t, x, p, u)
        b = drift(ex71, t, x, p, u)
        _, a = diffusion(ex71, t, x, p, u)
        assert stats.mean == pytest.approx(b * h2, abs=1e-14)
        # exact expansion of h1^2 (up + down) - mean^2
        assert stats.variance == pytest.approx(a * h2 + h1 * h2 * abs(b) - (b * h2) ** 2, abs=1e-14)


def test_frozen_node_has_no_motion():
    toy = _affine_toy(0.0, 0.0, 0.3)
    grid = GridSpec.build(toy, 0.25, 0.01, 0.0, 2.0)
    stats = local_consistency_stats(toy, grid, 0.0, 1.0, [1.0], 0.0)
    assert stats.mean == 0.0 and stats.variance == 0.0
