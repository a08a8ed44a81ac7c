"""Regime-switching flow model and its filter-averaged coefficients.

A model couples a hidden continuous-time Markov chain (generator ``Q``) with
a riskless node growing at rate ``r(t, i)`` and ``d`` risky nodes with drift
``b_l(t, i)`` and volatility rows ``sigma_bar_l(t, i)``.  The chain is seen
only through ``dy = g(alpha) dt + sigma0 dw2``.

Every time-dependent coefficient is affine in time per regime,
``c(t, i) = c0[i] + c1[i] * t``.  Coefficient arrays are stored with the
regime index last so that averaging against a posterior ``p`` is a single
contraction over the trailing axis.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12


class ModelError(ValueError):
    """Raised for malformed model documents or inconsistent dimensions."""


@dataclass(frozen=True)
class RegimeModel:
    """Hidden-regime model with affine-in-time coefficients.

    Attributes
    ----------
    Q : (m, m) generator of the hidden chain.
    g : (m,) observation drift per regime.
    sigma0 : observation noise intensity.
    r0, r1 : (m,) riskless rate ``r(t, i) = r0[i] + r1[i] t``.
    b0, b1 : (d, m) risky-node drifts.
    s0, s1 : (d, d, m) volatility, ``[l, j, i]`` is node ``l``, Brownian ``j``.
    s, T : horizon.
    """

    Q: np.ndarray
    g: np.ndarray
    sigma0: float
    r0: np.ndarray
    r1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s: float = 0.0
    T: float = 1.0
    name: str = field(default="", compare=False)

    @property
    def m(self) -> int:
        return int(self.Q.shape[0])

    @property
    def d(self) -> int:
        return int(self.b0.shape[0])

    def rate(self, t: float) -> np.ndarray:
        """Riskless rate per regime at time ``t``, shape (m,)."""
        return self.r0 + self.r1 * t

    def node_drift(self, t: float) -> np.ndarray:
        """Risky drifts per node and regime at ``t``, shape (d, m)."""
        return self.b0 + self.b1 * t

    def volatility(self, t: float) -> np.ndarray:
        """Volatility tensor at ``t``, shape (d, d, m)."""
        return self.s0 + self.s1 * t

    def excess_drift(self, t: float) -> np.ndarray:
        """``b_l(t, i) - r(t, i)``, shape (d, m)."""
        return self.node_drift(t) - self.rate(t)[None, :]

    def to_dict(self) -> dict[str, Any]:
        def pairs(c0: np.ndarray, c1: np.ndarray) -> Any:
            if c0.ndim == 1:
                return [{"c0": float(a), "c1": float(b)} for a, b in zip(c0, c1)]
            return [pairs(a, b) for a, b in zip(c0, c1)]

        return {
            "m": self.m,
            "d": self.d,
            "Q": self.Q.tolist(),
            "g": self.g.tolist(),
            "sigma0": float(self.sigma0),
            "r": pairs(self.r0, self.r1),
            "b": pairs(self.b0, self.b1),
            "sigma_bar": pairs(self.s0, self.s1),
            "horizon": {"s": float(self.s), "T": float(self.T)},
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_model(
    Q: Any,
    g: Any,
    sigma0: float,
    r: Any,
    b: Any,
    sigma_bar: Any,
    horizon: tuple[float, float] = (0.0, 1.0),
    name: str = "",
) -> RegimeModel:
    """Build a model from ``(c0, c1)`` coefficient arrays.

    ``r`` is ``(r0, r1)`` with shape (m,) each, ``b`` is ``(b0, b1)`` with
    shape (d, m) and ``sigma_bar`` is ``(s0, s1)`` with shape (d, d, m).
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    r0, r1 = (np.atleast_1d(np.asarray(c, dtype=float)) for c in r)
    b0, b1 = (np.atleast_2d(np.asarray(c, dtype=float)) for c in b)
    s0, s1 = (np.asarray(c, dtype=float) for c in sigma_bar)
    m = Q.shape[0]
    d = b0.shape[0]
    if s0.ndim == 1:
        s0 = s0.reshape(1, 1, -1)
        s1 = s1.reshape(1, 1, -1)
    expected = {
        "Q": ((m, m), Q.shape),
        "g": ((m,), g.shape),
        "r.c0": ((m,), r0.shape),
        "r.c1": ((m,), r1.shape),
        "b.c0": ((d, m), b0.shape),
        "b.c1": ((d, m), b1.shape),
        "sigma_bar.c0": ((d, d, m), s0.shape),
        "sigma_bar.c1": ((d, d, m), s1.shape),
    }
    bad = [f"{k}: expected shape {want}, got {got}" for k, (want, got) in expected.items() if want != got]
    if bad:
        raise ModelError("dimension mismatch: " + "; ".join(bad))
    s, T = (float(v) for v in horizon)
    return RegimeModel(Q, g, float(sigma0), r0, r1, b0, b1, s0, s1, s, T, name)


def example_71(T: float = 0.75) -> RegimeModel:
    """Two-regime, one-risky-node network of the worked example.

    ``r(t, i) = t + i``, ``b(t, i) = 1 + t - i``, ``sigma(t, i) = i``,
    ``g = (2, 3)``, ``sigma0 = 1`` and a symmetric switching rate of 0.5.
    The horizon is not fixed by the example; with ``T = 0.75`` every target
    in [1, 5.5] is attainable on x in [0, 6] and the riskless terminal mean
    (about 3.9) splits the range into both frontier branches.
    """
    regimes = np.array([1.0, 2.0])
    return make_model(
        Q=[[-0.5, 0.5], [0.5, -0.5]],
        g=[2.0, 3.0],
        sigma0=1.0,
        r=(regimes, np.ones(2)),
        b=((1.0 - regimes)[None, :], np.ones((1, 2))),
        sigma_bar=(regimes.reshape(1, 1, 2), np.zeros((1, 1, 2))),
        horizon=(0.0, T),
        name="example71",
    )


def validate_model(model: RegimeModel) -> list[str]:
    """Return every violated model invariant; empty means valid."""
    problems: list[str] = []
    Q = model.Q
    if model.m < 1:
        problems.append("m must be >= 1")
    if model.d < 1:
        problems.append("d must be >= 1")
    if Q.shape != (model.m, model.m):
        problems.append(f"Q must be square, got {Q.shape}")
        return problems
    if not np.all(np.isfinite(Q)):
        problems.append("Q has non-finite entries")
    for i, row in enumerate(Q):
        total = float(np.sum(row))
        if abs(total) > ROW_SUM_TOL:
            problems.append(f"Q row {i} sums to {total:g}, expected 0")
        off = np.delete(row, i)
        if np.any(off < 0):
            problems.append(f"Q row {i} has negative off-diagonal entries")
    if not (model.sigma0 > 0 and math.isfinite(model.sigma0)):
        problems.append(f"sigma0 must be positive, got {model.sigma0}")
    if not model.s < model.T:
        problems.append(f"horizon requires s < T, got s={model.s}, T={model.T}")
    # affine in t, so the endpoints bound the minimum
    for t in (model.s, model.T):
        low = model.rate(t)
        for i in np.flatnonzero(low < 0):
            problems.append(f"r(t={t:g}, regime {i + 1}) = {low[i]:g} is negative")
    return problems


def _as_posterior(model: RegimeModel, p: Any) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != model.m:
        raise ModelError(f"posterior has length {p.shape[-1]}, model has m={model.m}")
    return p


def _as_control(model: RegimeModel, u: Any) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape[-1] != model.d:
        raise ModelError(f"control has length {u.shape[-1]}, model has d={model.d}")
    return u


def filtered_coefficients(model: RegimeModel, t: float, p: Any) -> tuple[Any, np.ndarray, np.ndarray]:
    """Posterior-weighted coefficients ``(r_hat, B_hat, sigma_hat)``.

    ``p`` may carry leading batch axes.  It is used as given, without
    renormalisation.  Shapes: ``r_hat`` (...), ``B_hat`` (..., d),
    ``sigma_hat`` (..., d, d).
    """
    p = _as_posterior(model, p)
    r_hat = p @ model.rate(t)
    B_hat = p @ model.excess_drift(t).T
    sigma_hat = np.einsum("...i,lji->...lj", p, model.volatility(t))
    return r_hat, B_hat, sigma_hat


def drift(model: RegimeModel, t: float, x: float, p: Any, u: Any) -> float:
    """Drift ``r_hat x + B_hat . u`` of the observable state."""
    u = _as_control(model, u)
    r_hat, B_hat, _ = filtered_coefficients(model, t, p)
    return float(r_hat * x + B_hat @ u)


def diffusion(model: RegimeModel, t: float, x: float, p: Any, u: Any) -> tuple[np.ndarray, float]:
    """Diffusion row ``sigma_j = sum_l u_l sigma_hat_lj`` and ``a = |sigma|^2``.

    The state ``x`` does not enter; it is accepted for signature symmetry
    with :func:`drift`.
    """
    u = _as_control(model, u)
    _, _, sigma_hat = filtered_coefficients(model, t, p)
    row = u @ sigma_hat
    return row, float(row @ row)


def control_set(u_min: float | Sequence[float], u_max: float | Sequence[float], n: int, d: int = 1) -> np.ndarray:
    """Uniform tensor grid of admissible controls, shape (K, d).

    Rows are in lexicographic ascending order, so the first row attaining a
    minimum is also the smallest control.
    """
    if n < 1:
        raise ModelError("control grid needs at least one point")
    lo = np.broadcast_to(np.asarray(u_min, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(u_max, dtype=float), (d,))
    if np.any(hi < lo):
        raise ModelError("control bounds require u_min <= u_max")
    axes = [np.linspace(a, b, n) if n > 1 else np.array([a]) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


# ---------------------------------------------------------------------------
# JSON documents
# ---------------------------------------------------------------------------


def _affine(node: Any, where: str) -> tuple[float, float]:
    if isinstance(node, (int, float)):
        return float(node), 0.0
    if not isinstance(node, dict) or "c0" not in node:
        raise ModelError(f"{where}: expected {{'c0': .., 'c1': ..}}, got {node!r}")
    try:
        return float(node["c0"]), float(node.get("c1", 0.0))
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{where}: {exc}") from None


def _affine_array(node: Any, shape: tuple[int, ...], where: str) -> tuple[np.ndarray, np.ndarray]:
    c0 = np.empty(shape)
    c1 = np.empty(shape)

    def fill(obj: Any, idx: tuple[int, ...], depth: int) -> None:
        if depth == len(shape):
            c0[idx], c1[idx] = _affine(obj, where + "".join(f"[{k}]" for k in idx))
            return
        if not isinstance(obj, list) or len(obj) != shape[depth]:
            loc = where + "".join(f"[{k}]" for k in idx)
            raise ModelError(f"{loc}: expected a list of length {shape[depth]}")
        for k, item in enumerate(obj):
            fill(item, idx + (k,), depth + 1)

    fill(node, (), 0)
    return c0, c1


def model_from_dict(doc: dict[str, Any], name: str = "") -> RegimeModel:
    """Parse the JSON model schema (see README) into a :class:`RegimeModel`."""
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    missing = [k for k in ("m", "d", "Q", "g", "sigma0", "r", "b", "sigma_bar") if k not in doc]
    if missing:
        raise ModelError(f"missing keys: {', '.join(missing)}")
    try:
        m, d = int(doc["m"]), int(doc["d"])
    except (TypeError, ValueError):
        raise ModelError("m and d must be integers") from None
    if m < 1 or d < 1:
        raise ModelError("m and d must be >= 1")
    try:
        Q = np.asarray(doc["Q"], dtype=float)
        g = np.asarray(doc["g"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"Q/g: {exc}") from None
    if Q.shape != (m, m):
        raise ModelError(f"Q: expected shape ({m}, {m}), got {Q.shape}")
    if g.shape != (m,):
        raise ModelError(f"g: expected length {m}, got shape {g.shape}")
    r = _affine_array(doc["r"], (m,), "r")
    b = _affine_array(doc["b"], (d, m), "b")
    sb = _affine_array(doc["sigma_bar"], (d, d, m), "sigma_bar")
    horizon = doc.get("horizon", {"s": 0.0, "T": 1.0})
    try:
        hz = (float(horizon.get("s", 0.0)), float(horizon["T"]))
    except (AttributeError, KeyError, TypeError, ValueError):
        raise ModelError("horizon: expected {'s': .., 'T': ..}") from None
    return make_model(Q, g, float(doc["sigma0"]), r, b, sb, hz, name=name or str(doc.get("name", "")))


def load_model(path: str | Path) -> RegimeModel:
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from None
    try:
        return model_from_dict(doc, name=path.stem)
    except ModelError as exc:
        raise ModelError(f"{path}: {exc}") from None
