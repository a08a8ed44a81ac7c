"""Command-line driver: ``check``, ``solve``, ``frontier`` and ``simulate``.

Every artefact is written atomically (temporary file in the target
directory, then rename).  CSV files carry a header row, ``.`` decimals and
``repr`` floats, so reruns with the same configuration are byte-identical;
the only volatile field is ``generated_at`` in the JSON summaries.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .chain import GridError, GridSpec, check_cfl
from .config import ConfigError, RunConfig, build, config_hash, load_config, validate
from .model import ModelError, RegimeModel
from .simulate import McReport, mc_estimate, simulate_closed_loop
from .solver import (
    PolicyGrid,
    SolverConfig,
    SolverError,
    chain_moments,
    efficient_frontier,
    optimize_lambda,
    solve,
)

logger = logging.getLogger("mvhidden")

FRONTIER_COLUMNS = [
    "kappa",
    "std_dev",
    "lambda_star",
    "dual_value",
    "variance",
    "mc_mean",
    "mc_variance",
    "mc_residual",
    "chain_mean",
    "chain_variance",
    "n_evaluations",
    "status",
]


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_json(path: Path, doc: dict[str, Any]) -> None:
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _summary(cfg: RunConfig, model: RegimeModel, command: str, **body: Any) -> dict[str, Any]:
    doc = {
        "command": command,
        "code_version": __version__,
        "config_hash": config_hash(cfg, model),
        "model": model.to_dict(),
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    doc.update(body)
    return doc


# ---------------------------------------------------------------------------
# value / policy CSV
# ---------------------------------------------------------------------------


def value_rows(grid: GridSpec, V: np.ndarray, policy: PolicyGrid) -> Iterable[list[Any]]:
    coords = np.asarray(grid.p_coords()).reshape(-1, grid.m) if grid.p_shape else np.ones((1, 1))
    n_p = coords.shape[0]
    d = policy.controls.shape[1]
    for n in range(grid.n_steps + 1):
        layer = V[n].reshape(grid.n_x, n_p)
        if n < grid.n_steps:
            u = policy.controls[policy.index[n].reshape(grid.n_x, n_p)]
        t = grid.time(n)
        for ix, x in enumerate(grid.x_nodes):
            for ip in range(n_p):
                controls = list(u[ix, ip]) if n < grid.n_steps else [""] * d
                yield [n, t, float(x), *coords[ip], layer[ix, ip], *controls]


def value_header(grid: GridSpec, d: int) -> list[str]:
    return ["n", "t", "x"] + [f"p_{i + 1}" for i in range(grid.m)] + ["V"] + [f"u_{l + 1}" for l in range(d)]


def read_policy(path: Path, grid: GridSpec, controls: np.ndarray) -> PolicyGrid:
    """Rebuild a :class:`PolicyGrid` from a ``solve`` value/policy CSV."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    data = np.genfromtxt(path, delimiter=",", skip_header=1, filling_values=np.nan)
    data = np.atleast_2d(data)
    col = {name: k for k, name in enumerate(header)}
    p_cols = [col[f"p_{i + 1}"] for i in range(grid.m)]
    u_cols = [c for name, c in col.items() if name.startswith("u_")]
    rows = data[data[:, col["n"]] < grid.n_steps]
    index = np.zeros((grid.n_steps,) + grid.layer_shape, dtype=np.intp)
    n = rows[:, col["n"]].astype(np.intp)
    ix = grid.x_index(rows[:, col["x"]])
    ip = grid.p_index(rows[:, p_cols])
    u = rows[:, u_cols]
    k = np.argmin(np.sum((u[:, None, :] - controls[None, :, :]) ** 2, axis=-1), axis=1)
    index[(n, ix) + ip] = k
    return PolicyGrid(index, controls)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_check(cfg: RunConfig, model: RegimeModel) -> int:
    grid, controls, _ = build(cfg, model)
    report = check_cfl(model, grid, controls)
    out = Path(cfg.out)
    write_json(out / "cfl.json", _summary(cfg, model, "check", grid=grid.describe(), report=report.to_dict()))
    print(report.text())
    return 0 if report.passed else 1


def cmd_solve(cfg: RunConfig, model: RegimeModel) -> int:
    grid, controls, p0 = build(cfg, model)
    lam = cfg.lam
    search = None
    if lam is None:
        lam, point = optimize_lambda(
            model, grid, cfg.kappa, controls, tuple(cfg.lambda_bracket), cfg.x0, p0, cfg.method, cfg.tol, force=cfg.force
        )
        search = point.as_row()
    scfg = SolverConfig(lam, cfg.kappa, controls, cfg.x0, tuple(p0), cfg.force)
    result = solve(model, grid, scfg)
    c_mean, c_var = chain_moments(model, grid, result.policy, result.start_node)
    out = Path(cfg.out)
    atomic_write(out / "values.csv", csv_text(value_header(grid, model.d), value_rows(grid, result.values.V, result.policy)))
    write_json(
        out / "summary.json",
        _summary(
            cfg,
            model,
            "solve",
            grid=grid.describe(),
            controls=controls,
            lam=lam,
            kappa=cfg.kappa,
            x0=cfg.x0,
            p0=p0,
            value_at_start=result.value_at_start,
            start_node=list(result.start_node),
            chain_mean=c_mean,
            chain_variance=c_var,
            boundary_hits=result.boundary_hits,
            lambda_search=search,
        ),
    )
    print(f"V(s, x0, p0) = {result.value_at_start!r} at lambda = {lam!r}; chain E x(T) = {c_mean!r}")
    return 0


def cmd_frontier(cfg: RunConfig, model: RegimeModel) -> int:
    grid, controls, p0 = build(cfg, model)
    points = efficient_frontier(
        model,
        grid,
        cfg.kappas(),
        controls,
        lambda_bracket=tuple(cfg.lambda_bracket),
        x0=cfg.x0,
        p0=p0,
        method=cfg.method,
        tol=cfg.tol,
        n_paths=cfg.paths,
        seed=cfg.seed,
        force=cfg.force,
    )
    out = Path(cfg.out)
    rows = ([p.as_row()[c] for c in FRONTIER_COLUMNS] for p in points)
    atomic_write(out / "frontier.csv", csv_text(FRONTIER_COLUMNS, rows))
    failed = [p.kappa for p in points if p.status != "ok"]
    write_json(out / "frontier.json", _summary(cfg, model, "frontier", grid=grid.describe(), failed_kappas=failed))
    for p in points:
        print(f"kappa={p.kappa:<6g} std_dev={p.std_dev:.6g} lambda*={p.lambda_star:.6g} {p.status}")
    return 0


def cmd_simulate(cfg: RunConfig, model: RegimeModel, policy_path: Path, sample: int) -> int:
    summary_path = policy_path.parent / "summary.json"
    lam = cfg.lam
    if summary_path.is_file():
        solved = json.loads(summary_path.read_text())
        grid_doc = solved["grid"]
        cfg.h1, cfg.h2, cfg.x_min, cfg.x_max, cfg.p_mode = (
            grid_doc["h1"],
            grid_doc["h2"],
            grid_doc["x_min"],
            grid_doc["x_max"],
            grid_doc["p_mode"],
        )
        lam = solved["lam"] if lam is None else lam
        controls = np.asarray(solved["controls"], dtype=float)
    else:
        controls = None
    if lam is None:
        raise ConfigError([f"simulate needs --lambda (no summary.json beside {policy_path})"])
    grid, default_controls, p0 = build(cfg, model)
    controls = default_controls if controls is None else controls
    policy = read_policy(policy_path, grid, controls)
    report = mc_estimate(model, grid, policy, lam, cfg.kappa, cfg.x0, p0, cfg.paths, cfg.seed)
    out = Path(cfg.out)
    write_json(out / "mc_report.json", _summary(cfg, model, "simulate", report=report.to_dict()))
    if sample > 0:
        atomic_write(out / "paths_sample.csv", csv_text(*_path_sample(model, grid, policy, cfg, lam, p0, sample)))
    _print_report(report)
    return 0


def _path_sample(model, grid, policy, cfg, lam, p0, count):
    header = ["path", "t", "alpha", "y"] + [f"p_{i + 1}" for i in range(model.m)] + ["x"] + [f"u_{l + 1}" for l in range(model.d)]
    rows = []
    for k in range(count):
        path = simulate_closed_loop(model, grid, policy, lam, cfg.kappa, cfg.x0, p0, cfg.seed, index=k)
        for n, t in enumerate(path.times):
            u = path.u[n] if n < len(path.u) else [""] * model.d
            rows.append([k, t, int(path.alpha[n]) if n < len(path.alpha) else "", path.y[n], *path.p[n], path.x[n], *u])
    return header, rows


def _print_report(r: McReport) -> None:
    print(
        f"paths={r.n_paths} mean={r.mean:.6g} +- {r.mean_ci_half_width:.3g} "
        f"variance={r.variance:.6g} +- {r.variance_ci_half_width:.3g} residual={r.residual:.4g} "
        f"objective={r.objective:.6g} (se {r.objective_se:.3g})"
    )
    for w in r.warnings:
        print(f"warning: {w}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _pair(text: str) -> tuple[float, float]:
    parts = [float(v) for v in text.replace(":", ",").split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected LO,HI")
    return parts[0], parts[1]


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.replace(":", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected START,STOP,STEP")
    return parts[0], parts[1], parts[2]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvhidden", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mvhidden {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON, or 'example71' for the bundled one")
    common.add_argument("--model", help="model JSON file")
    common.add_argument("--grid-h1", dest="h1", type=float)
    common.add_argument("--grid-h2", dest="h2", type=float)
    common.add_argument("--x-min", dest="x_min", type=float)
    common.add_argument("--x-max", dest="x_max", type=float)
    common.add_argument("--p-mode", dest="p_mode", choices=["auto", "single", "reduced", "full"])
    common.add_argument("--u-min", dest="u_min", type=float)
    common.add_argument("--u-max", dest="u_max", type=float)
    common.add_argument("--n-controls", dest="n_controls", type=int)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--lambda-bracket", dest="lambda_bracket", type=_pair, metavar="LO,HI")
    common.add_argument("--kappa", type=float)
    common.add_argument("--kappa-range", dest="kappa_range", type=_triple, metavar="START,STOP,STEP")
    common.add_argument("--x0", type=float)
    common.add_argument("--p0", type=_floats, metavar="P1,...,PM")
    common.add_argument("--method", choices=["golden", "nelder-mead"])
    common.add_argument("--paths", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--force", action="store_true", default=None, help="run even if the CFL check fails")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("check", parents=[common], help="CFL / consistency report")
    sub.add_parser("solve", parents=[common], help="value and policy grids")
    sub.add_parser("frontier", parents=[common], help="efficient frontier sweep")
    sim = sub.add_parser("simulate", parents=[common], help="closed-loop Monte Carlo of a solved policy")
    sim.add_argument("--policy", required=True, help="values.csv written by solve")
    sim.add_argument("--sample-paths", dest="sample", type=int, default=0, help="write this many paths to CSV")
    return parser


_OVERRIDES = (
    "model", "h1", "h2", "x_min", "x_max", "p_mode", "u_min", "u_max", "n_controls", "lam",
    "lambda_bracket", "kappa", "kappa_range", "x0", "p0", "method", "paths", "seed", "out", "force",
)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for name in _OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            if name == "model":
                value = str(Path(value).resolve())
            setattr(cfg, name, value)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        model, problems = validate(cfg, args.command)
        if args.command == "simulate" and not Path(args.policy).is_file():
            problems.append(f"policy file not found: {args.policy}")
        if problems:
            raise ConfigError(problems)
        if args.command == "check":
            return cmd_check(cfg, model)
        if args.command == "solve":
            return cmd_solve(cfg, model)
        if args.command == "frontier":
            return cmd_frontier(cfg, model)
        return cmd_simulate(cfg, model, Path(args.policy), args.sample)
    except (ConfigError, ModelError, GridError, SolverError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
