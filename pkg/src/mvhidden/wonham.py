"""Wonham filter for the hidden regime, stepped in log coordinates.

The posterior ``p`` is propagated through ``v = log p``::

    v_i <- v_i + h2 * [ (Q' p)_i / p_i - (g_i - abar)^2 / (2 sigma0^2) ]
               + sqrt(h2) * (g_i - abar) / sigma0 * eps

with ``abar = g . p``.  The penalised variant replaces the bracketed drift
by ``-M`` for coordinates below ``exp(-M)``, which keeps the update finite
when a posterior coordinate collapses to zero.

The vectorised kernels accept posteriors with arbitrary leading batch axes;
:class:`FilterState` is the single-path value type.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import expm

from .model import ModelError, RegimeModel


class FilterError(ArithmeticError):
    """Raised when a filter step meets a zero posterior or produces NaN."""


@dataclass(frozen=True)
class FilterConfig:
    h2: float = 1e-3
    M: float = 20.0
    renormalize_each_step: bool = True
    noise: str = "gaussian"

    def __post_init__(self) -> None:
        if not self.h2 > 0:
            raise ValueError(f"h2 must be positive, got {self.h2}")
        if not self.M > 0:
            raise ValueError(f"M must be positive, got {self.M}")
        if self.noise not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown noise kind {self.noise!r}")


@dataclass(frozen=True)
class FilterState:
    """Posterior ``p``, its logarithm ``v`` and the current time."""

    p: np.ndarray
    v: np.ndarray
    t: float = 0.0

    @classmethod
    def from_p(cls, p: Any, t: float = 0.0) -> "FilterState":
        p = np.asarray(p, dtype=float)
        with np.errstate(divide="ignore"):
            v = np.log(p)
        return cls(p, v, t)

    def normalize(self) -> "FilterState":
        total = float(np.sum(self.p))
        p = self.p / total
        return FilterState(p, self.v - math.log(total), self.t)


def alpha_bar(model: RegimeModel, p: Any) -> Any:
    """Filtered observation drift ``sum_i g_i p_i``."""
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != model.m:
        raise ModelError(f"posterior has length {p.shape[-1]}, model has m={model.m}")
    return p @ model.g


def _increment(model: RegimeModel, cfg: FilterConfig, p: np.ndarray, eps: Any, penalized: bool) -> np.ndarray:
    g = model.g
    abar = p @ g
    gap = g - abar[..., None]
    inflow = p @ model.Q  # (Q' p)_i = sum_j q_ji p_j
    noise = math.sqrt(cfg.h2) / model.sigma0 * gap * np.asarray(eps, dtype=float)[..., None]
    if not penalized:
        rate = inflow / p - gap**2 / (2.0 * model.sigma0**2)
        return cfg.h2 * rate + noise
    alive = p >= math.exp(-cfg.M)
    safe = np.where(alive, p, 1.0)
    rate = np.where(alive, inflow / safe - gap**2 / (2.0 * model.sigma0**2), -cfg.M)
    return cfg.h2 * rate + noise


def _finish(v: np.ndarray, renormalize: bool) -> tuple[np.ndarray, np.ndarray]:
    p = np.exp(v)
    if renormalize:
        total = p.sum(axis=-1, keepdims=True)
        p = p / total
        v = v - np.log(total)
    return p, v


def step_arrays(
    model: RegimeModel, cfg: FilterConfig, p: np.ndarray, v: np.ndarray, eps: Any, penalized: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Batched filter step on ``(p, v)`` arrays of shape (..., m)."""
    v_new = v + _increment(model, cfg, p, eps, penalized)
    return _finish(v_new, cfg.renormalize_each_step)


def filter_step(model: RegimeModel, cfg: FilterConfig, state: FilterState, eps: float) -> FilterState:
    """One step of the log-coordinate scheme; requires every ``p_i > 0``."""
    if np.any(~(state.p > 0)):
        raise FilterError(f"nonpositive posterior {state.p} at t={state.t}; use filter_step_penalized")
    if not math.isfinite(eps):
        raise FilterError(f"non-finite noise increment {eps} at t={state.t}")
    v = state.v + _increment(model, cfg, state.p, eps, penalized=False)
    p, v = _finish(v, cfg.renormalize_each_step)
    if not np.all(np.isfinite(v)):
        raise FilterError(f"filter produced NaN/Inf at t={state.t + cfg.h2}")
    return FilterState(p, v, state.t + cfg.h2)


def filter_step_penalized(model: RegimeModel, cfg: FilterConfig, state: FilterState, eps: float) -> FilterState:
    """Filter step with the ``-M`` barrier for coordinates below ``exp(-M)``."""
    if not math.isfinite(eps):
        raise FilterError(f"non-finite noise increment {eps} at t={state.t}")
    v = state.v
    if np.any(np.isneginf(v)):
        # an exact zero has no log; start it at the barrier
        v = np.where(np.isneginf(v), -2.0 * cfg.M, v)
    v = v + _increment(model, cfg, state.p, eps, penalized=True)
    p, v = _finish(v, cfg.renormalize_each_step)
    if np.any(np.isnan(p)) or np.any(np.isnan(v)):
        raise FilterError(f"filter produced NaN at t={state.t + cfg.h2}")
    return FilterState(p, v, state.t + cfg.h2)


def innovation_increments(model: RegimeModel, observations: Any, p_path: Any, h2: float) -> np.ndarray:
    """Normalised innovations ``(dy_n - abar_n h2) / (sigma0 sqrt(h2))``.

    ``observations`` holds ``y`` on the time grid (length N + 1) and
    ``p_path`` the posterior at the same times, shape (N + 1, m) or (N, m).
    """
    y = np.asarray(observations, dtype=float)
    p_path = np.asarray(p_path, dtype=float)
    n = y.shape[0] - 1
    if p_path.shape[0] not in (n, n + 1):
        raise ModelError(f"observation path has {n} increments but posterior path has {p_path.shape[0]} rows")
    abar = alpha_bar(model, p_path[:n])
    return (np.diff(y) - abar * h2) / (model.sigma0 * math.sqrt(h2))


def draw_noise(cfg: FilterConfig, rng: np.random.Generator, size: Any) -> np.ndarray:
    if cfg.noise == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=size)
    return rng.standard_normal(size)


def run_filter(
    model: RegimeModel,
    cfg: FilterConfig,
    p0: Any,
    eps: Any,
    penalized: bool = True,
) -> list[FilterState]:
    """Filter trajectory driven by the given noise sequence, including ``p0``."""
    state = FilterState.from_p(p0, t=model.s)
    step = filter_step_penalized if penalized else filter_step
    path = [state]
    for e in np.asarray(eps, dtype=float):
        state = step(model, cfg, state, float(e))
        path.append(state)
    return path


def filter_observations(
    model: RegimeModel, cfg: FilterConfig, p0: Any, y: Any, penalized: bool = True
) -> np.ndarray:
    """Posterior path (N + 1, m) computed from an observation path ``y``."""
    y = np.asarray(y, dtype=float)
    state = FilterState.from_p(p0, t=model.s)
    out = np.empty((y.shape[0], model.m))
    out[0] = state.p
    scale = model.sigma0 * math.sqrt(cfg.h2)
    step = filter_step_penalized if penalized else filter_step
    for n in range(y.shape[0] - 1):
        eps = (y[n + 1] - y[n] - float(state.p @ model.g) * cfg.h2) / scale
        state = step(model, cfg, state, eps)
        out[n + 1] = state.p
    return out


def forward_distribution(model: RegimeModel, p0: Any, times: Any) -> np.ndarray:
    """Unconditional law ``exp(Q' t) p0`` at each time, shape (len(times), m)."""
    p0 = np.asarray(p0, dtype=float)
    return np.array([p0 @ expm(model.Q * (t - model.s)) for t in np.asarray(times, dtype=float)])


def write_filter_csv(path: str | Path, states: list[FilterState]) -> None:
    """Write a trajectory with columns ``t, p_1..p_m, v_1..v_m``."""
    m = len(states[0].p)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"p_{i + 1}" for i in range(m)] + [f"v_{i + 1}" for i in range(m)])
        for s in states:
            w.writerow([repr(float(s.t))] + [repr(float(x)) for x in s.p] + [repr(float(x)) for x in s.v])

