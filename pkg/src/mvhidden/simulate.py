"""Closed-loop Monte Carlo under the true hidden regime.

Random streams
--------------
Every path owns two Philox-4x64 streams keyed by ``(seed << 64) | path``:
stream 0 (counter word 3 = 0) samples the regime path, stream 1
(counter word 3 = 1) supplies the Gaussian increments, ``d`` for ``w1``
followed by one for ``w2`` per time step.  A path is therefore reproducible
from ``(seed, path index)`` alone, independently of batching.

The state is advanced by Euler-Maruyama with the coefficients of the regime
in force at the start of each step; the controller only sees the Wonham
posterior driven by the simulated observations.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .chain import GridSpec
from .model import RegimeModel
from .solver import PolicyGrid, worker_count
from .wonham import FilterConfig, step_arrays

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054
CLIP_WARN_FRACTION = 0.01
BATCH = 512


def path_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    """Counter-based generator for one ``(seed, path, stream)`` triple."""
    if seed < 0 or index < 0:
        raise ValueError("seed and path index must be nonnegative")
    key = ((seed & (2**64 - 1)) << 64) | (index & (2**64 - 1))
    return np.random.Generator(np.random.Philox(key=key, counter=stream << 192))


@dataclass
class RegimePath:
    """Piecewise-constant regime path; ``states`` are 1-based."""

    jump_times: np.ndarray
    states: np.ndarray
    horizon: tuple[float, float]

    def at(self, times: Any) -> np.ndarray:
        k = np.searchsorted(self.jump_times, np.asarray(times, dtype=float), side="right")
        return self.states[k - 1]

    def occupancy(self, state: int) -> float:
        ends = np.append(self.jump_times[1:], self.horizon[1])
        held = ends - self.jump_times
        return float(held[self.states == state].sum() / (self.horizon[1] - self.horizon[0]))


def _sample_regimes(model: RegimeModel, horizon: tuple[float, float], rng: np.random.Generator, p0: np.ndarray) -> RegimePath:
    s, T = horizon
    state = int(rng.choice(model.m, p=p0))
    times = [s]
    states = [state]
    t = s
    while True:
        rate = -model.Q[state, state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= T:
            break
        jump = np.clip(model.Q[state], 0.0, None)
        jump[state] = 0.0
        state = int(rng.choice(model.m, p=jump / jump.sum()))
        times.append(t)
        states.append(state)
    return RegimePath(np.array(times), np.array(states) + 1, (s, T))


def sample_ctmc_path(
    model: RegimeModel,
    horizon: tuple[float, float] | None = None,
    seed: int = 0,
    p0: Sequence[float] | None = None,
    index: int = 0,
) -> RegimePath:
    """Exact jump-time sample of the hidden chain.

    Holding times in state ``i`` are exponential with rate ``-q_ii``; the
    next state is ``j`` with probability ``q_ij / -q_ii``.  The initial
    state is drawn from ``p0`` (uniform by default).
    """
    horizon = (model.s, model.T) if horizon is None else horizon
    p0 = np.full(model.m, 1.0 / model.m) if p0 is None else np.asarray(p0, dtype=float)
    return _sample_regimes(model, horizon, path_rng(seed, index, 0), p0)


@dataclass
class SimPath:
    times: np.ndarray
    alpha: np.ndarray
    y: np.ndarray
    p: np.ndarray
    x: np.ndarray
    u: np.ndarray
    seed: int
    index: int = 0
    clipped: bool = False


@dataclass
class McReport:
    n_paths: int
    seed: int
    mean: float
    variance: float
    mean_ci_half_width: float
    variance_ci_half_width: float
    residual: float
    objective: float
    objective_se: float
    clipped_fraction: float
    lam: float
    kappa: float
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class _Moments:
    """Running count with mean and centred sum of squares; merged with Chan's update."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: np.ndarray) -> "_Moments":
        if len(values) == 0:
            return cls()
        mean = float(np.mean(values))
        return cls(len(values), mean, float(np.sum((values - mean) ** 2)))

    def merge(self, other: "_Moments") -> "_Moments":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return _Moments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


def _batch(
    model: RegimeModel,
    grid: GridSpec,
    policy: PolicyGrid,
    x0: float,
    p0: np.ndarray,
    seed: int,
    indices: Sequence[int],
    fcfg: FilterConfig,
    record: bool = False,
) -> dict[str, np.ndarray]:
    N, h2, d = grid.n_steps, grid.h2, model.d
    B = len(indices)
    times = grid.s + h2 * np.arange(N + 1)
    alpha = np.empty((B, N), dtype=np.intp)
    noise = np.empty((B, N, d + 1))
    for b, idx in enumerate(indices):
        path = _sample_regimes(model, (model.s, model.T), path_rng(seed, idx, 0), p0)
        alpha[b] = path.at(times[:-1]) - 1
        noise[b] = path_rng(seed, idx, 1).standard_normal((N, d + 1))
    sqrt_h2 = math.sqrt(h2)
    x = np.full(B, float(x0))
    p = np.broadcast_to(p0, (B, model.m)).copy()
    with np.errstate(divide="ignore"):
        v = np.log(p)
    v = np.where(np.isneginf(v), -2.0 * fcfg.M, v)
    y = np.zeros(B)
    clipped = np.zeros(B, dtype=bool)
    if record:
        xs, ys, ps, us = [x.copy()], [y.copy()], [p.copy()], []
    for n in range(N):
        t = times[n]
        a = alpha[:, n]
        node = (n, grid.x_index(x)) + grid.p_index(p)
        u = policy.controls[policy.index[node]]
        excess = model.excess_drift(t)[:, a].T
        vol = np.moveaxis(model.volatility(t)[:, :, a], -1, 0)
        row = np.einsum("bl,blj->bj", u, vol)
        dw1 = sqrt_h2 * noise[:, n, :d]
        dx = (model.rate(t)[a] * x + np.sum(excess * u, axis=-1)) * h2 + np.sum(row * dw1, axis=-1)
        dy = model.g[a] * h2 + model.sigma0 * sqrt_h2 * noise[:, n, d]
        eps = (dy - (p @ model.g) * h2) / (model.sigma0 * sqrt_h2)
        p, v = step_arrays(model, fcfg, p, v, eps, penalized=True)
        x = x + dx
        y = y + dy
        out = (x < grid.x_min) | (x > grid.x_max)
        if np.any(out):
            clipped |= out
            x = np.clip(x, grid.x_min, grid.x_max)
        if record:
            xs.append(x.copy())
            ys.append(y.copy())
            ps.append(p.copy())
            us.append(u.copy())
    result = {"x_T": x, "clipped": clipped}
    if record:
        result.update(
            times=times,
            alpha=alpha + 1,
            x=np.stack(xs, 1),
            y=np.stack(ys, 1),
            p=np.stack(ps, 1),
            u=np.stack(us, 1),
        )
    return result


def simulate_closed_loop(
    model: RegimeModel,
    grid: GridSpec,
    policy: PolicyGrid,
    lam: float,
    kappa: float,
    x0: float,
    p0: Sequence[float],
    seed: int,
    index: int = 0,
    filter_cfg: FilterConfig | None = None,
) -> SimPath:
    """One closed-loop path with nearest-node policy lookup.

    ``lam`` and ``kappa`` do not affect the dynamics; they are accepted so
    a path can be tied to the solve that produced ``policy``.
    """
    fcfg = filter_cfg or FilterConfig(h2=grid.h2)
    r = _batch(model, grid, policy, x0, np.asarray(p0, dtype=float), seed, [index], fcfg, record=True)
    return SimPath(
        times=r["times"],
        alpha=r["alpha"][0],
        y=r["y"][0],
        p=r["p"][0],
        x=r["x"][0],
        u=r["u"][0],
        seed=seed,
        index=index,
        clipped=bool(r["clipped"][0]),
    )


def _mc_chunk(args: tuple) -> tuple[_Moments, _Moments, int]:
    model, grid, policy, lam, kappa, x0, p0, seed, indices, fcfg = args
    r = _batch(model, grid, policy, x0, p0, seed, indices, fcfg)
    xT = r["x_T"]
    obj = (xT + lam - kappa) ** 2 - lam**2
    return _Moments.of(xT), _Moments.of(obj), int(np.count_nonzero(r["clipped"]))


def mc_estimate(
    model: RegimeModel,
    grid: GridSpec,
    policy: PolicyGrid,
    lam: float,
    kappa: float,
    x0: float,
    p0: Sequence[float],
    n_paths: int,
    seed: int,
    filter_cfg: FilterConfig | None = None,
    workers: int | None = None,
) -> McReport:
    """Terminal-state statistics over ``n_paths`` independent closed-loop paths.

    Confidence half-widths are at 95%; the variance interval uses the
    Gaussian approximation ``s^2 sqrt(2 / (n - 1))``.
    """
    if n_paths < 2:
        raise ValueError("mc_estimate needs at least 2 paths")
    fcfg = filter_cfg or FilterConfig(h2=grid.h2)
    p0 = np.asarray(p0, dtype=float)
    chunks = [range(i, min(i + BATCH, n_paths)) for i in range(0, n_paths, BATCH)]
    tasks = [(model, grid, policy, lam, kappa, x0, p0, seed, c, fcfg) for c in chunks]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_mc_chunk, tasks))
    else:
        parts = [_mc_chunk(t) for t in tasks]
    xs, objs, n_clip = _Moments(), _Moments(), 0
    for mx, mo, c in parts:
        xs = xs.merge(mx)
        objs = objs.merge(mo)
        n_clip += c
    var = xs.variance
    warnings = []
    frac = n_clip / n_paths
    if frac > CLIP_WARN_FRACTION:
        msg = f"{100 * frac:.2f}% of paths hit the x boundary [{grid.x_min}, {grid.x_max}] and were clipped"
        warnings.append(msg)
        logger.warning(msg)
    return McReport(
        n_paths=n_paths,
        seed=seed,
        mean=xs.mean,
        variance=var,
        mean_ci_half_width=Z95 * math.sqrt(var / n_paths),
        variance_ci_half_width=Z95 * var * math.sqrt(2.0 / (n_paths - 1)),
        residual=abs(xs.mean - kappa),
        objective=objs.mean,
        objective_se=math.sqrt(objs.variance / n_paths),
        clipped_fraction=frac,
        lam=lam,
        kappa=kappa,
        warnings=warnings,
    )
