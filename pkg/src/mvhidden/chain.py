"""Markov chain approximation of the observable (x, p) diffusion.

The x-coordinate moves on ``x_min + k h1`` with the upwind weights::

    stay = 1 - |b| h2 / h1 - a h2 / h1^2
    up   = (a h2 + 2 h1 h2 b+) / (2 h1^2)
    down = (a h2 + 2 h1 h2 b-) / (2 h1^2)

where ``b`` is the filtered drift and ``a = sigma sigma'``.  Each posterior
coordinate ``p_i`` is differenced independently on a step-``h1`` grid over
[0, 1] with weights that sum to zero (``up_i + down_i + diag_i = 0``).

Outward x-moves at the grid ends are folded into ``stay`` (reflection) and
p-moves off [0, 1] are folded into the diagonal; both are implemented by
edge-padding the value layer, see :func:`shift`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .model import RegimeModel, _as_control, filtered_coefficients

_GRID_TOL = 1e-9


class GridError(ValueError):
    """Raised when grid parameters violate the lattice invariants."""


def _is_multiple(length: float, step: float) -> bool:
    k = length / step
    return abs(k - round(k)) <= _GRID_TOL * max(1.0, abs(k))


def grid_problems(model: RegimeModel, h1: float, h2: float, x_min: float, x_max: float, p_mode: str) -> list[str]:
    problems = []
    if not h1 > 0:
        problems.append(f"h1 must be positive, got {h1}")
    if not h2 > 0:
        problems.append(f"h2 must be positive, got {h2}")
    if not x_min < x_max:
        problems.append(f"x range requires x_min < x_max, got [{x_min}, {x_max}]")
    if problems:
        return problems
    if not _is_multiple(model.T - model.s, h2):
        problems.append(f"(T - s) / h2 = {(model.T - model.s) / h2:g} is not an integer")
    if not _is_multiple(x_max - x_min, h1):
        problems.append(f"(x_max - x_min) / h1 = {(x_max - x_min) / h1:g} is not an integer")
    if p_mode not in ("auto", "single", "reduced", "full"):
        problems.append(f"unknown p_mode {p_mode!r}")
    elif _resolve_mode(model, p_mode) != "single" and not _is_multiple(1.0, h1):
        problems.append(f"1 / h1 = {1 / h1:g} is not an integer (posterior grid)")
    if p_mode == "reduced" and model.m != 2:
        problems.append("reduced p_mode requires m = 2")
    if p_mode == "single" and model.m != 1:
        problems.append("single p_mode requires m = 1")
    return problems


def _resolve_mode(model: RegimeModel, p_mode: str) -> str:
    if p_mode != "auto":
        return p_mode
    return {1: "single", 2: "reduced"}.get(model.m, "full")


@dataclass(frozen=True)
class GridSpec:
    """Joint (x, p) lattice.

    Layers are arrays of shape ``(n_x, *p_shape)``.  ``p_mode`` selects the
    posterior geometry: ``single`` (m = 1, p fixed at 1), ``reduced``
    (m = 2, one axis for ``p_1`` with ``p_2 = 1 - p_1``) or ``full`` (one
    axis per coordinate, simplex not enforced).
    """

    h1: float
    h2: float
    x_min: float
    x_max: float
    n_steps: int
    s: float
    p_mode: str
    m: int
    x_nodes: np.ndarray = field(repr=False, compare=False)
    p_axis: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def build(
        cls,
        model: RegimeModel,
        h1: float,
        h2: float,
        x_min: float,
        x_max: float,
        p_mode: str = "auto",
    ) -> "GridSpec":
        problems = grid_problems(model, h1, h2, x_min, x_max, p_mode)
        if problems:
            raise GridError("; ".join(problems))
        mode = _resolve_mode(model, p_mode)
        n_x = int(round((x_max - x_min) / h1)) + 1
        x_nodes = x_min + h1 * np.arange(n_x)
        if mode == "single":
            p_axis = np.array([1.0])
        else:
            p_axis = h1 * np.arange(int(round(1.0 / h1)) + 1)
        n_steps = int(round((model.T - model.s) / h2))
        return cls(h1, h2, x_min, x_max, n_steps, model.s, mode, model.m, x_nodes, p_axis)

    @property
    def n_x(self) -> int:
        return len(self.x_nodes)

    @property
    def p_shape(self) -> tuple[int, ...]:
        if self.p_mode == "single":
            return ()
        if self.p_mode == "reduced":
            return (len(self.p_axis),)
        return (len(self.p_axis),) * self.m

    @property
    def layer_shape(self) -> tuple[int, ...]:
        return (self.n_x,) + self.p_shape

    def time(self, n: int) -> float:
        return self.s + n * self.h2

    def p_coords(self) -> np.ndarray:
        """Coefficient posterior at every p-node, shape ``(*p_shape, m)``."""
        if self.p_mode == "single":
            return np.ones((1,))
        if self.p_mode == "reduced":
            return np.stack([self.p_axis, 1.0 - self.p_axis], axis=-1)
        mesh = np.meshgrid(*([self.p_axis] * self.m), indexing="ij")
        return np.stack(mesh, axis=-1)

    def moving_coordinates(self) -> list[tuple[int, int]]:
        """``(regime coordinate, layer axis)`` pairs differenced by the scheme."""
        if self.p_mode == "single":
            return []
        if self.p_mode == "reduced":
            return [(0, 1)]
        return [(i, 1 + i) for i in range(self.m)]

    def x_index(self, x: Any) -> Any:
        """Nearest x-node index, clamped to the grid."""
        k = np.rint((np.asarray(x, dtype=float) - self.x_min) / self.h1)
        return np.clip(k, 0, self.n_x - 1).astype(np.intp)

    def p_index(self, p: Any) -> tuple[Any, ...]:
        """Nearest p-node index tuple for posteriors of shape (..., m)."""
        p = np.asarray(p, dtype=float)
        if self.p_mode == "single":
            return ()
        top = len(self.p_axis) - 1
        if self.p_mode == "reduced":
            return (np.clip(np.rint(p[..., 0] / self.h1), 0, top).astype(np.intp),)
        return tuple(np.clip(np.rint(p[..., i] / self.h1), 0, top).astype(np.intp) for i in range(self.m))

    def node(self, x: float, p: Any) -> tuple[int, ...]:
        return (int(self.x_index(x)),) + tuple(int(k) for k in self.p_index(p))

    def describe(self) -> dict[str, Any]:
        return {
            "h1": self.h1,
            "h2": self.h2,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "n_steps": self.n_steps,
            "p_mode": self.p_mode,
        }


def shift(layer: np.ndarray, axis: int, direction: int) -> np.ndarray:
    """``out[k] = layer[k + direction]`` along ``axis`` with edge clamping."""
    n = layer.shape[axis]
    idx = np.clip(np.arange(n) + direction, 0, n - 1)
    return np.take(layer, idx, axis=axis)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------


@dataclass
class XKernel:
    """x-transition weights for every (control, x-node, p-node)."""

    b: np.ndarray
    a: np.ndarray
    stay: np.ndarray
    up: np.ndarray
    down: np.ndarray


def _weights(b: Any, a: Any, h1: float, h2: float) -> tuple[Any, Any, Any]:
    b = np.asarray(b, dtype=float)
    a = np.asarray(a, dtype=float)
    b_pos = np.maximum(b, 0.0)
    b_neg = np.maximum(-b, 0.0)
    two_h1sq = 2.0 * h1 * h1
    up = (a * h2 + 2.0 * h1 * h2 * b_pos) / two_h1sq
    down = (a * h2 + 2.0 * h1 * h2 * b_neg) / two_h1sq
    stay = 1.0 - np.abs(b) * h2 / h1 - h2 * a / (h1 * h1)
    return stay, up, down


def x_kernel(model: RegimeModel, grid: GridSpec, t: float, controls: np.ndarray) -> XKernel:
    """Vectorised x-weights, arrays of shape ``(K, n_x, *p_shape)``."""
    controls = np.asarray(controls, dtype=float).reshape(-1, model.d)
    r_hat, B_hat, sigma_hat = filtered_coefficients(model, t, grid.p_coords())
    # (K, *p_shape)
    Bu = np.einsum("kl,...l->k...", controls, B_hat)
    rows = np.einsum("kl,...lj->k...j", controls, sigma_hat)
    a = np.sum(rows * rows, axis=-1)
    x = grid.x_nodes.reshape((1, -1) + (1,) * len(grid.p_shape))
    b = np.asarray(r_hat)[None, None, ...] * x + Bu[:, None, ...]
    a = np.broadcast_to(a[:, None, ...], b.shape)
    stay, up, down = _weights(b, a, grid.h1, grid.h2)
    return XKernel(b, a, stay, up, down)


def _node_coefficients(model: RegimeModel, t: float, x: float, p: Any, u: Any) -> tuple[float, float]:
    """Drift ``b`` and variance rate ``a`` at one node, one coefficient pass."""
    r_hat, B_hat, sigma_hat = filtered_coefficients(model, t, p)
    u = _as_control(model, u)
    row = u @ sigma_hat
    return float(r_hat * x + B_hat @ u), float(row @ row)


def x_transition_probs(
    model: RegimeModel, grid: GridSpec, t: float, x: float, p: Any, u: Any
) -> tuple[float, float, float]:
    """``(stay, up, down)`` at a single node under control ``u``."""
    b, a = _node_coefficients(model, t, x, p, u)
    stay, up, down = _weights(b, a, grid.h1, grid.h2)
    return float(stay), float(up), float(down)


def p_terms_arrays(model: RegimeModel, p: np.ndarray, h1: float, h2: float) -> tuple[np.ndarray, ...]:
    """Per-coordinate ``(up, down, diag)`` for posteriors of shape (..., m)."""
    p = np.asarray(p, dtype=float)
    abar = p @ model.g
    c = (p * (model.g - abar[..., None])) ** 2 / model.sigma0**2
    q = p @ model.Q
    two_h1sq = 2.0 * h1 * h1
    up = (c * h2 + 2.0 * h1 * np.maximum(q, 0.0) * h2) / two_h1sq
    down = (c * h2 + 2.0 * h1 * np.maximum(-q, 0.0) * h2) / two_h1sq
    diag = -c * h2 / (h1 * h1) - h2 * np.abs(q) / h1
    return up, down, diag


def p_transition_terms(model: RegimeModel, grid: GridSpec, t: float, p: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operator weights on ``p_i +- h1`` and on the node itself, each (m,).

    The weights do not depend on ``t`` (the generator and observation map
    are time-homogeneous); ``t`` is accepted for signature symmetry.
    """
    return p_terms_arrays(model, np.asarray(p, dtype=float), grid.h1, grid.h2)


def p_layer_terms(model: RegimeModel, grid: GridSpec) -> list[tuple[int, np.ndarray, np.ndarray, np.ndarray]]:
    """``(axis, up, down, diag)`` over the p-nodes for each moving coordinate."""
    if grid.p_mode == "single":
        return []
    up, down, diag = p_terms_arrays(model, grid.p_coords(), grid.h1, grid.h2)
    return [(axis, up[..., i], down[..., i], diag[..., i]) for i, axis in grid.moving_coordinates()]


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass
class CflReport:
    passed: bool
    max_coefficient: float
    worst_node: dict[str, Any]
    n_violations: int
    violations: list[dict[str, Any]]
    max_p_diag: float
    min_center_weight: float
    h1: float
    h2: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "max_coefficient": self.max_coefficient,
            "worst_node": self.worst_node,
            "n_violations": self.n_violations,
            "violations": self.violations,
            "max_p_diag": self.max_p_diag,
            "min_center_weight": self.min_center_weight,
            "h1": self.h1,
            "h2": self.h2,
        }

    def text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        lines = [
            f"CFL {verdict}: max |b|h2/h1 + a h2/h1^2 = {self.max_coefficient:.6g} (limit 1)",
            f"  worst node: {self.worst_node}",
            f"  violating (n, x, p, u) nodes: {self.n_violations}",
            f"  max |diag_i| (posterior directions): {self.max_p_diag:.6g}",
            f"  min combined centre weight: {self.min_center_weight:.6g}",
        ]
        return "\n".join(lines)


def _node_record(grid: GridSpec, controls: np.ndarray, n: int, idx: tuple[int, ...], value: float) -> dict[str, Any]:
    k, ix, *ip = (int(i) for i in idx)
    coords = grid.p_coords()
    p = coords[tuple(ip)] if ip else coords
    return {
        "n": n,
        "t": grid.time(n),
        "x": float(grid.x_nodes[ix]),
        "p": [float(v) for v in np.atleast_1d(p)],
        "u": [float(v) for v in controls[k]],
        "coefficient": value,
    }


def check_cfl(model: RegimeModel, grid: GridSpec, controls: Any, max_listed: int = 50) -> CflReport:
    """Scan every (time, node, control) triple for a nonnegative stay weight."""
    controls = np.asarray(controls, dtype=float).reshape(-1, model.d)
    p_terms = p_layer_terms(model, grid)
    diag_sum = sum((d for _, _, _, d in p_terms), np.zeros(grid.p_shape))
    max_p_diag = max((float(np.max(np.abs(d))) for _, _, _, d in p_terms), default=0.0)
    best = -math.inf
    worst: dict[str, Any] = {}
    n_bad = 0
    listed: list[dict[str, Any]] = []
    min_center = math.inf
    for n in range(grid.n_steps):
        t = grid.time(n)
        kern = x_kernel(model, grid, t, controls)
        coeff = grid.h2 * (np.abs(kern.b) / grid.h1 + kern.a / (grid.h1 * grid.h1))
        flat = int(np.argmax(coeff))
        top = float(coeff.flat[flat])
        if top > best:
            best = top
            worst = _node_record(grid, controls, n, np.unravel_index(flat, coeff.shape), top)
        bad = np.argwhere(coeff > 1.0)
        n_bad += len(bad)
        for idx in bad[: max(0, max_listed - len(listed))]:
            listed.append(_node_record(grid, controls, n, tuple(idx), float(coeff[tuple(idx)])))
        min_center = min(min_center, float(np.min(kern.stay + diag_sum)))
    return CflReport(
        passed=n_bad == 0,
        max_coefficient=best,
        worst_node=worst,
        n_violations=n_bad,
        violations=listed,
        max_p_diag=max_p_diag,
        min_center_weight=min_center,
        h1=grid.h1,
        h2=grid.h2,
    )


@dataclass(frozen=True)
class ConsistencyStats:
    mean: float
    variance: float
    mean_target: float
    variance_target: float


def local_consistency_stats(model: RegimeModel, grid: GridSpec, t: float, x: float, p: Any, u: Any) -> ConsistencyStats:
    """Conditional mean and variance of one chain step against ``b h2``, ``a h2``."""
    b, a = _node_coefficients(model, t, x, p, u)
    _, up, down = _weights(b, a, grid.h1, grid.h2)
    up, down = float(up), float(down)
    mean = grid.h1 * (up - down)
    variance = grid.h1 * grid.h1 * (up + down) - mean * mean
    return ConsistencyStats(mean, variance, b * grid.h2, a * grid.h2)
