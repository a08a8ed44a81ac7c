"""Backward value iteration, multiplier search and the efficient frontier.

For a fixed multiplier ``lam`` the chain minimises
``E[(x_N + lam - kappa)^2] - lam^2``.  The recursion is evaluated in
increment form::

    V_n = V + up (V[x+h1] - V) + down (V[x-h1] - V)
            + sum_i up_i (V[p_i+h1] - V) + down_i (V[p_i-h1] - V)

which equals the weighted sum with ``stay`` and ``diag_i`` exactly in real
arithmetic (``stay = 1 - up - down``, ``diag_i = -up_i - down_i``) and keeps
rounding from drifting constant layers.  Only the x-weights depend on the
control, so the posterior part is added after the minimisation.

The dual ``d(lam) = V_lam(s, x0, p0)`` is concave; the constrained optimum
is found by maximising it over ``lam``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .chain import GridSpec, check_cfl, p_layer_terms, shift, x_kernel
from .model import RegimeModel

logger = logging.getLogger(__name__)

BOUND_TOL = 1e-12
WORKERS_ENV = "MVHIDDEN_WORKERS"


class SolverError(RuntimeError):
    """Raised for NaN values, failed CFL checks or violated value bounds."""


class LambdaSearchError(SolverError):
    """Raised when the dual has no interior maximiser in the bracket."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float
    kappa: float
    controls: np.ndarray
    x0: float = 1.0
    p0: tuple[float, ...] | None = None
    force: bool = False

    def initial_posterior(self, model: RegimeModel) -> np.ndarray:
        if self.p0 is None:
            return np.full(model.m, 1.0 / model.m)
        return np.asarray(self.p0, dtype=float)


@dataclass
class ValueGrid:
    V: np.ndarray
    lam: float
    kappa: float
    grid: GridSpec
    model_hash: str


@dataclass
class PolicyGrid:
    """Argmin control index per (n, x-node, p-node) plus the control table."""

    index: np.ndarray
    controls: np.ndarray

    def control(self, n: int, node: tuple[int, ...]) -> np.ndarray:
        return self.controls[self.index[(n,) + tuple(node)]]

    @property
    def values(self) -> np.ndarray:
        return self.controls[self.index]

    @classmethod
    def constant(cls, grid: GridSpec, u: Sequence[float]) -> "PolicyGrid":
        controls = np.atleast_2d(np.asarray(u, dtype=float))
        return cls(np.zeros((grid.n_steps,) + grid.layer_shape, dtype=np.intp), controls)


@dataclass
class SolveResult:
    values: ValueGrid | None
    policy: PolicyGrid
    value_at_start: float
    start_node: tuple[int, ...]
    boundary_hits: int
    layer0: np.ndarray = field(repr=False)


@dataclass
class FrontierPoint:
    kappa: float
    lambda_star: float = math.nan
    dual_value: float = math.nan
    variance: float = math.nan
    std_dev: float = math.nan
    chain_mean: float = math.nan
    chain_variance: float = math.nan
    mc_mean: float = math.nan
    mc_variance: float = math.nan
    mc_residual: float = math.nan
    n_evaluations: int = 0
    status: str = "ok"

    def as_row(self) -> dict[str, Any]:
        return asdict(self)


def terminal_values(grid: GridSpec, lam: float, kappa: float) -> np.ndarray:
    """``(x + lam - kappa)^2 - lam^2`` on every node."""
    x = grid.x_nodes.reshape((-1,) + (1,) * len(grid.p_shape))
    layer = (x + lam - kappa) ** 2 - lam**2
    return np.broadcast_to(layer, grid.layer_shape).copy()


def _posterior_part(V: np.ndarray, p_terms: list) -> np.ndarray:
    out = np.zeros_like(V)
    for axis, up, down, _diag in p_terms:
        out += up * (shift(V, axis, 1) - V) + down * (shift(V, axis, -1) - V)
    return out


def _step(
    model: RegimeModel, grid: GridSpec, controls: np.ndarray, V_next: np.ndarray, n: int, p_terms: list
) -> tuple[np.ndarray, np.ndarray, int]:
    kern = x_kernel(model, grid, grid.time(n), controls)
    d_up = shift(V_next, 0, 1) - V_next
    d_down = shift(V_next, 0, -1) - V_next
    cand = kern.up * d_up + kern.down * d_down
    idx = np.argmin(cand, axis=0)
    best = np.take_along_axis(cand, idx[None], axis=0)[0]
    V_n = V_next + best + _posterior_part(V_next, p_terms)
    if not np.all(np.isfinite(V_n)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(V_n))[0])
        raise SolverError(f"solver: non-finite value at time index n={n}, node {bad}")
    # edge nodes whose chosen control pushes mass off the x grid
    up = np.take_along_axis(kern.up, idx[None], axis=0)[0]
    down = np.take_along_axis(kern.down, idx[None], axis=0)[0]
    hits = int(np.count_nonzero(up[-1] > 0) + np.count_nonzero(down[0] > 0))
    return V_n, idx, hits


def backward_step(
    model: RegimeModel,
    grid: GridSpec,
    cfg: SolverConfig,
    V_next: np.ndarray,
    n: int,
    p_terms: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One minimisation layer; returns ``(V_n, argmin control index)``.

    Ties go to the first control in ``cfg.controls``, i.e. the smallest.
    """
    if p_terms is None:
        p_terms = p_layer_terms(model, grid)
    V_n, idx, _ = _step(model, grid, np.asarray(cfg.controls, dtype=float), V_next, n, p_terms)
    return V_n, idx


def _start_node(grid: GridSpec, cfg: SolverConfig, model: RegimeModel) -> tuple[int, ...]:
    return grid.node(cfg.x0, cfg.initial_posterior(model))


def solve(
    model: RegimeModel,
    grid: GridSpec,
    cfg: SolverConfig,
    keep_values: bool = True,
    check: bool = True,
) -> SolveResult:
    """Full backward sweep from the terminal layer to ``n = 0``."""
    if check and not cfg.force:
        report = check_cfl(model, grid, cfg.controls)
        if not report.passed:
            raise SolverError(
                f"solver: CFL check failed (max coefficient {report.max_coefficient:.6g} at {report.worst_node}); "
                "use force to override"
            )
    if not grid.x_min < cfg.kappa < grid.x_max:
        logger.warning("kappa=%g lies outside the x grid (%g, %g)", cfg.kappa, grid.x_min, grid.x_max)
    N = grid.n_steps
    controls = np.asarray(cfg.controls, dtype=float)
    p_terms = p_layer_terms(model, grid)
    V = terminal_values(grid, cfg.lam, cfg.kappa)
    floor = -cfg.lam**2 - BOUND_TOL
    layers = np.empty((N + 1,) + grid.layer_shape) if keep_values else None
    if layers is not None:
        layers[N] = V
    index = np.empty((N,) + grid.layer_shape, dtype=np.intp)
    hits = 0
    for n in range(N - 1, -1, -1):
        V, idx, step_hits = _step(model, grid, controls, V, n, p_terms)
        index[n] = idx
        hits += step_hits
        low = float(V.min())
        if low < floor and not cfg.force:
            bad = tuple(int(i) for i in np.unravel_index(int(np.argmin(V)), V.shape))
            raise SolverError(f"solver: value {low!r} below -lambda^2 at n={n}, node {bad}")
        if layers is not None:
            layers[n] = V
    start = _start_node(grid, cfg, model)
    values = ValueGrid(layers, cfg.lam, cfg.kappa, grid, model.fingerprint()) if layers is not None else None
    return SolveResult(values, PolicyGrid(index, controls), float(V[start]), start, hits, V)


def evaluate_policy(model: RegimeModel, grid: GridSpec, policy: PolicyGrid, terminal: np.ndarray) -> np.ndarray:
    """Chain expectation of a terminal payoff under a fixed feedback policy."""
    p_terms = p_layer_terms(model, grid)
    V = np.array(terminal, dtype=float)
    for n in range(grid.n_steps - 1, -1, -1):
        kern = x_kernel(model, grid, grid.time(n), policy.controls)
        idx = policy.index[n][None]
        up = np.take_along_axis(kern.up, idx, axis=0)[0]
        down = np.take_along_axis(kern.down, idx, axis=0)[0]
        V = V + up * (shift(V, 0, 1) - V) + down * (shift(V, 0, -1) - V) + _posterior_part(V, p_terms)
    return V


def chain_moments(
    model: RegimeModel, grid: GridSpec, policy: PolicyGrid, start: tuple[int, ...]
) -> tuple[float, float]:
    """Mean and variance of the chain's terminal state from ``start``."""
    x = grid.x_nodes.reshape((-1,) + (1,) * len(grid.p_shape))
    first = evaluate_policy(model, grid, policy, np.broadcast_to(x, grid.layer_shape))
    second = evaluate_policy(model, grid, policy, np.broadcast_to(x * x, grid.layer_shape))
    mean = float(first[start])
    return mean, float(second[start]) - mean * mean


def riskless_mean(model: RegimeModel, grid: GridSpec, x0: float, p0: Any) -> float:
    """Chain mean of ``x(T)`` with every risky allocation switched off."""
    policy = PolicyGrid.constant(grid, np.zeros(model.d))
    mean, _ = chain_moments(model, grid, policy, grid.node(x0, p0))
    return mean


def dual_value(model: RegimeModel, grid: GridSpec, cfg: SolverConfig) -> float:
    return solve(model, grid, cfg, keep_values=False, check=False).value_at_start


def dual_scan(
    model: RegimeModel, grid: GridSpec, cfg: SolverConfig, lambdas: Sequence[float]
) -> np.ndarray:
    """``d(lam)`` on a list of multipliers (same kappa and controls)."""
    out = []
    for lam in lambdas:
        out.append(dual_value(model, grid, _with(cfg, lam=float(lam))))
    return np.array(out)


def _with(cfg: SolverConfig, **kw: Any) -> SolverConfig:
    fields = dict(cfg.__dict__)
    fields.update(kw)
    return SolverConfig(**fields)


def golden_section_max(
    f: Callable[[float], float], lo: float, hi: float, tol: float
) -> tuple[float, float, int]:
    """Maximise a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x), evals)``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    evals = 2
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
        evals += 1
    if fc >= fd:
        return c, fc, evals
    return d, fd, evals


def _search(
    f: Callable[[float], float], lo: float, hi: float, tol: float, method: str
) -> tuple[float, float, int]:
    if method == "golden":
        return golden_section_max(f, lo, hi, tol)
    if method == "nelder-mead":
        calls = [0]

        def neg(z: np.ndarray) -> float:
            calls[0] += 1
            return -f(float(z[0]))

        res = minimize(
            neg,
            x0=[0.5 * (lo + hi)],
            method="Nelder-Mead",
            bounds=[(lo, hi)],
            options={"xatol": tol, "fatol": 1e-12, "initial_simplex": [[lo + 0.25 * (hi - lo)], [lo + 0.75 * (hi - lo)]]},
        )
        return float(res.x[0]), float(-res.fun), calls[0]
    raise ValueError(f"unknown lambda search method {method!r}")


def optimize_lambda(
    model: RegimeModel,
    grid: GridSpec,
    kappa: float,
    controls: np.ndarray,
    lambda_bracket: tuple[float, float] = (-10.0, 10.0),
    x0: float = 1.0,
    p0: Sequence[float] | None = None,
    method: str = "golden",
    tol: float = 1e-4,
    n_paths: int = 0,
    seed: int = 0,
    force: bool = False,
) -> tuple[float, FrontierPoint]:
    """Maximise the dual over the multiplier and summarise the optimum.

    The bracket is widened once (tripled about its centre) when the
    maximiser sits on an edge; a second edge hit raises
    :class:`LambdaSearchError`.  With ``n_paths > 0`` the extracted policy is
    also simulated in closed loop and the Monte Carlo variance becomes the
    reported frontier variance.
    """
    base = SolverConfig(0.0, kappa, np.asarray(controls, dtype=float), x0, None if p0 is None else tuple(p0), force)
    if not force:
        report = check_cfl(model, grid, base.controls)
        if not report.passed:
            raise SolverError(f"solver: CFL check failed (max coefficient {report.max_coefficient:.6g})")

    def d(lam: float) -> float:
        return dual_value(model, grid, _with(base, lam=lam))

    lo, hi = lambda_bracket
    total = 0
    for attempt in range(2):
        lam, value, evals = _search(d, lo, hi, tol, method)
        total += evals
        edge = 2.0 * tol
        if lo + edge < lam < hi - edge:
            break
        # a flat dual has every multiplier as a maximiser
        centre = 0.5 * (lo + hi)
        mid = d(centre)
        total += 1
        if mid >= value - 1e-12 * max(1.0, abs(value)):
            lam, value = centre, mid
            break
        if attempt == 0:
            half = 1.5 * (hi - lo)
            logger.info("kappa=%g: maximiser %g on bracket edge, widening to [%g, %g]", kappa, lam, centre - half, centre + half)
            lo, hi = centre - half, centre + half
    else:
        raise LambdaSearchError(
            f"dual is monotone on the widened bracket [{lo:g}, {hi:g}] for kappa={kappa:g} "
            f"(maximiser {lam:g}); the target mean is likely unattainable"
        )
    cfg = _with(base, lam=lam)
    result = solve(model, grid, cfg, keep_values=False, check=False)
    c_mean, c_var = chain_moments(model, grid, result.policy, result.start_node)
    point = FrontierPoint(
        kappa=kappa,
        lambda_star=lam,
        dual_value=result.value_at_start,
        chain_mean=c_mean,
        chain_variance=c_var,
        n_evaluations=total,
    )
    variance = c_var
    if n_paths > 0:
        from .simulate import mc_estimate

        report = mc_estimate(model, grid, result.policy, lam, kappa, x0, cfg.initial_posterior(model), n_paths, seed)
        point.mc_mean = report.mean
        point.mc_variance = report.variance
        point.mc_residual = report.residual
        variance = report.variance
    point.variance = variance
    point.std_dev = math.sqrt(max(variance, 0.0))
    return lam, point


def _frontier_task(args: tuple) -> FrontierPoint:
    model, grid, kappa, kwargs = args
    try:
        return optimize_lambda(model, grid, kappa, **kwargs)[1]
    except SolverError as exc:
        logger.warning("frontier point kappa=%g failed: %s", kappa, exc)
        return FrontierPoint(kappa=kappa, status=f"error: {exc}")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def efficient_frontier(
    model: RegimeModel,
    grid: GridSpec,
    kappa_list: Sequence[float],
    controls: np.ndarray,
    workers: int | None = None,
    **kwargs: Any,
) -> list[FrontierPoint]:
    """One independently optimised point per target mean; failures are recorded."""
    workers = worker_count() if workers is None else workers
    tasks = [(model, grid, float(k), dict(kwargs, controls=controls)) for k in kappa_list]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_frontier_task, tasks))
    return [_frontier_task(t) for t in tasks]
