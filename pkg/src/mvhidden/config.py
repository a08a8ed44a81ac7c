"""Run configuration: JSON file, command-line overrides and validation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .chain import GridSpec, grid_problems
from .model import ModelError, RegimeModel, control_set, load_model, validate_model

BUNDLED = {"example71": "example71.json"}


class ConfigError(ValueError):
    """Carries every validation failure found in a configuration."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class RunConfig:
    model: str | None = None
    h1: float = 0.25
    h2: float = 0.001
    x_min: float = 0.0
    x_max: float = 6.0
    p_mode: str = "auto"
    u_min: float = -2.0
    u_max: float = 2.0
    n_controls: int = 41
    lam: float | None = None
    lambda_bracket: tuple[float, float] = (-10.0, 10.0)
    kappa: float | None = None
    kappa_range: tuple[float, float, float] | None = None
    x0: float = 1.0
    p0: list[float] | None = None
    method: str = "golden"
    tol: float = 1e-4
    paths: int = 10000
    seed: int = 0
    out: str = "out"
    force: bool = False
    base_dir: str = field(default=".", repr=False)

    def model_path(self) -> Path | None:
        if self.model is None:
            return None
        path = Path(self.model)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def kappas(self) -> list[float]:
        if self.kappa_range is None:
            return [] if self.kappa is None else [float(self.kappa)]
        start, stop, step = self.kappa_range
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 12) for k in range(n)]

    def hashable(self) -> dict[str, Any]:
        d = asdict(self)
        for key in ("out", "base_dir", "model"):
            d.pop(key)
        return d


_SECTIONS = {
    "grid": {"h1": "h1", "h2": "h2", "x_min": "x_min", "x_max": "x_max", "p_mode": "p_mode"},
    "controls": {"u_min": "u_min", "u_max": "u_max", "n": "n_controls"},
    "solver": {
        "lambda": "lam",
        "lambda_bracket": "lambda_bracket",
        "kappa": "kappa",
        "kappa_range": "kappa_range",
        "x0": "x0",
        "p0": "p0",
        "method": "method",
        "tol": "tol",
    },
    "simulation": {"paths": "paths", "seed": "seed"},
}


def resolve_config_path(name: str) -> Path:
    """A filesystem path, or the name of a bundled configuration."""
    if name in BUNDLED:
        return Path(str(resources.files("mvhidden") / "data" / BUNDLED[name]))
    return Path(name)


def load_config(path: str | Path) -> RunConfig:
    path = resolve_config_path(str(path))
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    cfg = RunConfig(base_dir=str(path.parent))
    problems = []
    for key, value in doc.items():
        if key in _SECTIONS:
            for sub, sub_value in value.items():
                attr = _SECTIONS[key].get(sub)
                if attr is None:
                    problems.append(f"{path}: unknown key {key}.{sub}")
                else:
                    setattr(cfg, attr, sub_value)
        elif key in ("model", "out"):
            setattr(cfg, key, value)
        else:
            problems.append(f"{path}: unknown key {key}")
    if problems:
        raise ConfigError(problems)
    for attr in ("lambda_bracket", "kappa_range"):
        if getattr(cfg, attr) is not None:
            setattr(cfg, attr, tuple(getattr(cfg, attr)))
    return cfg


def validate(cfg: RunConfig, command: str) -> tuple[RegimeModel | None, list[str]]:
    """Check every field; returns the parsed model (if readable) and all problems."""
    problems: list[str] = []
    model = None
    path = cfg.model_path()
    if path is None:
        problems.append("no model given (use --model or a config file)")
    elif not path.is_file():
        problems.append(f"model file not found: {path}")
    else:
        try:
            model = load_model(path)
            problems += [f"model: {p}" for p in validate_model(model)]
        except ModelError as exc:
            problems.append(str(exc))
    if model is not None:
        problems += [f"grid: {p}" for p in grid_problems(model, cfg.h1, cfg.h2, cfg.x_min, cfg.x_max, cfg.p_mode)]
        if cfg.p0 is not None and len(cfg.p0) != model.m:
            problems.append(f"p0 has length {len(cfg.p0)}, model has m={model.m}")
    if cfg.p0 is not None and (any(v < 0 for v in cfg.p0) or abs(sum(cfg.p0) - 1.0) > 1e-9):
        problems.append(f"p0 must be a probability vector, got {cfg.p0}")
    if cfg.n_controls < 1:
        problems.append("controls.n must be >= 1")
    if cfg.u_min > cfg.u_max:
        problems.append(f"controls require u_min <= u_max, got [{cfg.u_min}, {cfg.u_max}]")
    lo, hi = cfg.lambda_bracket
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        problems.append(f"lambda_bracket must be finite with lo < hi, got {cfg.lambda_bracket}")
    if cfg.method not in ("golden", "nelder-mead"):
        problems.append(f"unknown lambda search method {cfg.method!r}")
    if not cfg.tol > 0:
        problems.append("tol must be positive")
    if cfg.seed < 0:
        problems.append("seed must be nonnegative")
    if not cfg.x_min <= cfg.x0 <= cfg.x_max:
        problems.append(f"x0={cfg.x0} lies outside [{cfg.x_min}, {cfg.x_max}]")
    if command in ("solve", "simulate") and cfg.kappa is None:
        problems.append(f"{command} needs --kappa")
    if command == "frontier" and cfg.kappa_range is None and cfg.kappa is None:
        problems.append("frontier needs --kappa-range (or --kappa)")
    if cfg.kappa_range is not None:
        start, stop, step = cfg.kappa_range
        if not (step > 0 and stop >= start):
            problems.append(f"kappa_range needs start <= stop and step > 0, got {cfg.kappa_range}")
    for k in cfg.kappas() if command != "check" else []:
        if not cfg.x_min < k < cfg.x_max:
            problems.append(f"kappa={k} must lie strictly inside ({cfg.x_min}, {cfg.x_max})")
    if command in ("simulate", "frontier") and cfg.paths != 0 and cfg.paths < 2:
        problems.append("paths must be 0 or >= 2")
    return model, problems


def build(cfg: RunConfig, model: RegimeModel) -> tuple[GridSpec, np.ndarray, np.ndarray]:
    grid = GridSpec.build(model, cfg.h1, cfg.h2, cfg.x_min, cfg.x_max, cfg.p_mode)
    controls = control_set(cfg.u_min, cfg.u_max, cfg.n_controls, model.d)
    p0 = np.full(model.m, 1.0 / model.m) if cfg.p0 is None else np.asarray(cfg.p0, dtype=float)
    return grid, controls, p0


def config_hash(cfg: RunConfig, model: RegimeModel) -> str:
    blob = json.dumps({"config": cfg.hashable(), "model": model.to_dict()}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()

