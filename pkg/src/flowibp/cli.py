"""Config-driven experiment runner.

A config file is a TOML document of flat tables, one table per experiment:

    [gaussian-oracle]
    experiment = "bismut_gradient"
    manifold = "euclidean:1"
    system = "euclidean-bm:1"
    functional = "coord:0@1.0"
    T = 1.0
    n_paths = 100000
    seed = 7
    expected = 1.0

``flowibp run CONFIG [--jobs N] [--out PATH] [--format csv|json]`` executes
the experiments and writes one report row each; ``flowibp list`` prints the
experiment registry.  Exit codes: 0 all pass, 1 statistical failure,
2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import estimators
from .errors import FlowIbpError
from .flow import TimeGrid
from .functionals import (make_cm_process, make_functional, make_vector_field,
                          make_weight)
from .geometry import make_manifold
from .systems import default_direction, default_start, make_system

GRADIENT_EXPERIMENTS = {
    "bismut_gradient": "semigroup gradient, full-interval integral weight",
    "thalmaier_gradient": "semigroup gradient, window-restricted integral",
    "weighted_gradient": "semigroup gradient, weight-function variant",
    "crn_fd_gradient": "finite-difference oracle on common random numbers",
}

IDENTITY_EXPERIMENTS = {
    "gradient_consistency": "paired comparison of a gradient estimator against the full-interval one",
    "rate_averaging": "rate-vs-average exchange identity integrated against f(x_T)",
    "function_ibp": "one-time integration by parts E[f dV] = E[df(D(h_T - h_0))]",
    "pathspace_ibp": "cylindrical path-space integration by parts",
    "damped_ibp": "integration by parts through the damped transport",
    "girsanov_invariance": "perturbed-flow law vs density-reweighted base law",
    "girsanov_derivative": "variation derivative identity with FD cross-check",
    "free_ibp": "free path-space identity with uniformly sampled start points",
    "free_damped_ibp": "free path-space identity through the damped transport",
}

EXPERIMENTS = {**GRADIENT_EXPERIMENTS, **IDENTITY_EXPERIMENTS}

CSV_COLUMNS = ["experiment", "manifold", "system", "functional", "h", "T",
               "n", "m", "seed", "lhs", "lhs_se", "rhs", "rhs_se", "diff",
               "diff_se", "z", "status", "wall_ms"]

_FLOAT_KEYS = {"T", "tau", "t", "r", "width", "eps", "z_threshold",
               "expected", "se_mult", "tol_abs", "tol_rel", "debug_rhs_scale"}
_INT_KEYS = {"n_paths", "n_base_points", "steps_per_unit", "seed"}
_STR_KEYS = {"experiment", "manifold", "system", "functional", "h", "hfield",
             "weight", "pair", "output", "format"}


@dataclass
class Diagnostic:
    kind: str          # "parse" | "unknown-name" | "range"
    table: str
    line: int
    message: str

    def __str__(self) -> str:
        where = f"[{self.table}] " if self.table else ""
        return f"line {self.line}: {where}{self.kind}: {self.message}"


@dataclass
class ExperimentConfig:
    name: str
    line: int
    experiment: str
    system: str
    manifold: str = ""
    functional: str = ""
    h: str = ""
    hfield: str = ""
    weight: str = ""
    pair: str = ""
    T: float = 1.0
    tau: float = math.nan
    t: float = math.nan
    r: float = math.nan
    width: float = math.nan
    eps: float = math.nan
    n_paths: int = 0
    n_base_points: int = 0
    steps_per_unit: int = 512
    seed: int | None = None
    z_threshold: float = 4.0
    expected: float = math.nan
    se_mult: float = 3.0
    tol_abs: float = 0.0
    tol_rel: float = 0.0
    debug_rhs_scale: float = 1.0
    output: str = ""
    format: str = ""


@dataclass
class ReportRow:
    experiment: str
    manifold: str
    system: str
    functional: str
    h: str
    T: float
    n: int
    m: int
    seed: int
    lhs: float
    lhs_se: float
    rhs: float | None
    rhs_se: float | None
    diff: float | None
    diff_se: float | None
    z: float | None
    status: str
    wall_ms: float
    extras: dict = field(default_factory=dict)


def default_seed() -> int:
    env = os.environ.get("FLOWIBP_SEED")
    return int(env) if env else 0


# ---------------------------------------------------------------------------
# parsing and validation
# ---------------------------------------------------------------------------


def _table_lines(text: str) -> dict:
    lines = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        match = re.match(r"\s*\[(.+?)\]\s*(#.*)?$", raw)
        if match:
            lines.setdefault(match.group(1).strip().strip('"'), i)
    return lines


def parse_config(text: str) -> tuple:
    """Parse and validate a config document.

    Returns (configs, diagnostics); any diagnostic makes the document
    invalid (grid-snapping notes are emitted as warnings separately).
    """
    diags: list[Diagnostic] = []
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        diags.append(Diagnostic("parse", "", int(m.group(1)) if m else 0, str(exc)))
        return [], diags
    lines = _table_lines(text)
    configs = []
    for name, table in doc.items():
        line = lines.get(name, 0)
        if not isinstance(table, dict):
            diags.append(Diagnostic("parse", name, line,
                                    "top-level keys must be experiment tables"))
            continue
        cfg, table_diags = _validate_table(name, line, table)
        diags.extend(table_diags)
        if cfg is not None and not table_diags:
            configs.append(cfg)
    return configs, diags


def _validate_table(name: str, line: int, table: dict):
    diags: list[Diagnostic] = []

    def err(kind, message):
        diags.append(Diagnostic(kind, name, line, message))

    kwargs = {}
    for key, value in table.items():
        if key in _FLOAT_KEYS:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                err("range", f"{key} must be a number, got {value!r}")
                continue
            kwargs[key] = float(value)
        elif key in _INT_KEYS:
            if not isinstance(value, int) or isinstance(value, bool):
                err("range", f"{key} must be an integer, got {value!r}")
                continue
            kwargs[key] = int(value)
        elif key in _STR_KEYS:
            if not isinstance(value, str):
                err("range", f"{key} must be a string, got {value!r}")
                continue
            kwargs[key] = value
        else:
            err("unknown-name", f"unknown key {key!r}")
    if diags:
        return None, diags

    experiment = kwargs.get("experiment", "")
    if experiment not in EXPERIMENTS:
        err("unknown-name", f"unknown experiment {experiment!r}")
        return None, diags
    if "system" not in kwargs:
        err("unknown-name", "missing required key 'system'")
        return None, diags
    cfg = ExperimentConfig(name=name, line=line, **kwargs)

    try:
        system = make_system(cfg.system)
    except ValueError as exc:
        err("unknown-name", str(exc))
        return None, diags
    if cfg.manifold:
        try:
            mf = make_manifold(cfg.manifold)
        except ValueError as exc:
            err("unknown-name", str(exc))
            return None, diags
        if mf != system.manifold:
            err("range", f"manifold {cfg.manifold!r} does not match system "
                         f"{cfg.system!r}")
    if cfg.T <= 0:
        err("range", f"T must be positive, got {cfg.T}")
    if cfg.steps_per_unit < 1:
        err("range", "steps_per_unit must be >= 1")
    if cfg.n_paths < 2:
        err("range", "n_paths must be >= 2")
    if diags:
        return None, diags
    if experiment in ("free_ibp", "free_damped_ibp"):
        if cfg.n_base_points < 1:
            err("range", "free path-space experiments need n_base_points >= 1")
        if not cfg.hfield:
            err("unknown-name", "free path-space experiments need 'hfield'")
        elif not _known(make_vector_field, cfg.hfield):
            err("unknown-name", f"unknown vector field {cfg.hfield!r}")
    if not cfg.functional:
        err("unknown-name", "missing required key 'functional'")
    elif not _known(make_functional, cfg.functional):
        err("unknown-name", f"unknown functional {cfg.functional!r}")
    elif any(not 0.0 < t <= cfg.T + 1e-12
             for t in make_functional(cfg.functional).times):
        err("range", f"functional times must lie in (0, T], got "
                     f"{make_functional(cfg.functional).times}")
    grid = TimeGrid.regular(cfg.T, cfg.steps_per_unit)
    if cfg.h:
        if not _known(lambda s: make_cm_process(s, system, grid), cfg.h):
            err("unknown-name", f"unknown h-process {cfg.h!r}")
    if cfg.weight and not _known(lambda s: make_weight(s, grid), cfg.weight):
        err("unknown-name", f"unknown weight {cfg.weight!r}")
    if experiment == "thalmaier_gradient":
        if math.isnan(cfg.r) or math.isnan(cfg.width):
            err("range", "thalmaier_gradient needs 'r' and 'width'")
        elif not (cfg.r >= 0 and cfg.width > 0 and cfg.r + cfg.width <= cfg.T + 1e-12):
            err("range", f"bad window [{cfg.r}, {cfg.r + cfg.width}]")
    if experiment == "weighted_gradient" and not cfg.weight:
        err("unknown-name", "weighted_gradient needs 'weight'")
    if experiment == "gradient_consistency":
        if cfg.pair not in ("thalmaier", "weighted", "crn_fd"):
            err("unknown-name", f"pair must be thalmaier|weighted|crn_fd, got {cfg.pair!r}")
    if experiment == "rate_averaging" and math.isnan(cfg.t):
        err("range", "rate_averaging needs 't'")
    if not math.isnan(cfg.t) and not 0 < cfg.t <= cfg.T + 1e-12:
        err("range", f"t = {cfg.t} outside (0, T]")
    if experiment == "girsanov_invariance" and math.isnan(cfg.tau):
        err("range", "girsanov_invariance needs 'tau'")
    if not math.isnan(cfg.tau) and abs(cfg.tau) > 0.5:
        err("range", f"|tau| = {abs(cfg.tau)} > 0.5")
    if not math.isnan(cfg.eps) and not 1e-4 <= cfg.eps <= 1e-1:
        err("range", f"eps = {cfg.eps} outside [1e-4, 1e-1]")
    if cfg.format and cfg.format not in ("csv", "json"):
        err("range", f"format must be csv or json, got {cfg.format!r}")
    if diags:
        return None, diags
    return cfg, diags


def _known(factory, spec: str) -> bool:
    try:
        factory(spec)
        return True
    except ValueError:
        return False


def snap_warnings(cfg: ExperimentConfig) -> list:
    """Times that had to be snapped onto grid nodes by more than 1e-12."""
    grid = TimeGrid.regular(cfg.T, cfg.steps_per_unit)
    wanted = []
    if cfg.functional:
        wanted.extend(make_functional(cfg.functional).times)
    for t in (cfg.t, cfg.r):
        if not math.isnan(t):
            wanted.append(t)
    if not math.isnan(cfg.r) and not math.isnan(cfg.width):
        wanted.append(cfg.r + cfg.width)
    notes = []
    for t in wanted:
        idx, delta = grid.snap_index(t)
        if delta > 1e-12:
            notes.append(f"[{cfg.name}] time {t} snapped to grid node "
                         f"{float(grid.times[idx])!r} (off by {delta:.2e})")
    return notes


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _snapped(grid: TimeGrid, t: float) -> float:
    idx, _ = grid.snap_index(t)
    return float(grid.times[idx])


def _snap_functional(spec: str, grid: TimeGrid):
    """Rebuild a functional string with its times snapped onto the grid."""
    F = make_functional(spec)
    head = spec.split("@", 1)[0]
    times = ",".join(repr(_snapped(grid, t)) for t in F.times)
    return make_functional(f"{head}@{times}")


def run_experiment(cfg: ExperimentConfig) -> ReportRow:
    """Execute a single validated experiment config."""
    system = make_system(cfg.system)
    grid = TimeGrid.regular(cfg.T, cfg.steps_per_unit)
    x0 = default_start(system.manifold)
    v0 = default_direction(system.manifold)
    seed = cfg.seed if cfg.seed is not None else default_seed()
    F = _snap_functional(cfg.functional, grid) if cfg.functional else None
    h = make_cm_process(cfg.h, system, grid) if cfg.h else None
    exp = cfg.experiment
    t0 = time.perf_counter()

    old_scale = estimators.DEBUG_RHS_SCALE
    estimators.DEBUG_RHS_SCALE = cfg.debug_rhs_scale
    try:
        if exp in GRADIENT_EXPERIMENTS:
            result = _run_gradient(cfg, system, grid, x0, v0, F, seed)
        else:
            result = _run_identity(cfg, system, grid, x0, v0, F, h, seed)
    finally:
        estimators.DEBUG_RHS_SCALE = old_scale
    wall_ms = (time.perf_counter() - t0) * 1e3

    n = cfg.n_paths * cfg.n_base_points if exp.startswith("free_") else cfg.n_paths
    return ReportRow(
        experiment=exp, manifold=system.manifold.kind, system=cfg.system,
        functional=cfg.functional, h=cfg.h or cfg.hfield or cfg.weight,
        T=cfg.T, n=n, m=grid.steps, seed=seed,
        status="", wall_ms=wall_ms, **result)


def _run_gradient(cfg, system, grid, x0, v0, F, seed) -> dict:
    exp = cfg.experiment
    if exp == "bismut_gradient":
        est = estimators.bismut_gradient(system, x0, v0, F, cfg.n_paths, grid, seed)
    elif exp == "thalmaier_gradient":
        est = estimators.thalmaier_gradient(system, x0, v0, F,
                                            _snapped(grid, cfg.r),
                                            _snapped(grid, cfg.r + cfg.width) - _snapped(grid, cfg.r),
                                            cfg.n_paths, grid, seed)
    elif exp == "weighted_gradient":
        weights, quad = make_weight(cfg.weight, grid)
        est = estimators.weighted_gradient(system, x0, v0, F, weights, quad,
                                           cfg.n_paths, grid, seed)
    else:
        eps = 0.01 if math.isnan(cfg.eps) else cfg.eps
        est = estimators.crn_fd_gradient(system, x0, v0, F, eps, cfg.n_paths,
                                         grid, seed)
    has_expected = not math.isnan(cfg.expected)
    diff = est.value - cfg.expected if has_expected else None
    return dict(
        lhs=est.value, lhs_se=est.std_error,
        rhs=cfg.expected if has_expected else None, rhs_se=None,
        diff=diff, diff_se=est.std_error if has_expected else None,
        z=abs(diff) / est.std_error if has_expected and est.std_error > 0 else None,
        extras={"expected": cfg.expected, "se_mult": cfg.se_mult,
                "tol_abs": cfg.tol_abs, "tol_rel": cfg.tol_rel}
        if has_expected else {})


def _run_identity(cfg, system, grid, x0, v0, F, h, seed) -> dict:
    exp = cfg.experiment
    T = grid.horizon
    if exp == "gradient_consistency":
        params = {}
        if cfg.pair == "thalmaier":
            r = _snapped(grid, cfg.r if not math.isnan(cfg.r) else T / 2)
            w = (_snapped(grid, r + (cfg.width if not math.isnan(cfg.width) else T / 2))
                 - r)
            params = {"r": r, "width": w}
        elif cfg.pair == "weighted":
            weights, quad = make_weight(cfg.weight or "linear", grid)
            params = {"weights": weights, "quad": quad}
        else:
            params = {"eps": 0.01 if math.isnan(cfg.eps) else cfg.eps}
        report = estimators.gradient_pair(system, x0, v0, F, cfg.pair,
                                          "bismut", cfg.n_paths, grid, seed,
                                          params_a=params)
    elif exp == "rate_averaging":
        hh = h or make_cm_process("h:quadratic", system, grid)
        report = estimators.rate_averaging_check(system, x0, F, hh,
                                                 _snapped(grid, cfg.t),
                                                 cfg.n_paths, grid, seed)
    elif exp == "function_ibp":
        hh = h or make_cm_process("h:linear", system, grid)
        report = estimators.function_ibp_check(system, x0, F, hh, cfg.n_paths,
                                               grid, seed)
    elif exp == "pathspace_ibp":
        hh = h or make_cm_process("h:linear", system, grid)
        report = estimators.pathspace_ibp(system, x0, F, hh, cfg.n_paths,
                                          grid, seed)
    elif exp == "damped_ibp":
        hh = h or make_cm_process("h:linear", system, grid)
        report = estimators.damped_ibp(system, x0, F, hh, cfg.n_paths, grid,
                                       seed)
    elif exp == "girsanov_invariance":
        hh = h or make_cm_process("h:linear", system, grid)
        report = estimators.girsanov_invariance(system, x0, F, hh, cfg.tau,
                                                cfg.n_paths, grid, seed)
    elif exp == "girsanov_derivative":
        hh = h or make_cm_process("h:linear", system, grid)
        eps = 0.02 if math.isnan(cfg.eps) else cfg.eps
        report = estimators.girsanov_derivative(system, x0, F, hh,
                                                cfg.n_paths, grid, seed,
                                                eps=eps)
    elif exp == "free_ibp":
        hf = make_vector_field(cfg.hfield)
        report = estimators.free_ibp(system, F, hf, cfg.n_paths,
                                     cfg.n_base_points, grid, seed)
    elif exp == "free_damped_ibp":
        hf = make_vector_field(cfg.hfield)
        report = estimators.free_damped_ibp(system, F, hf, cfg.n_paths,
                                            cfg.n_base_points, grid, seed)
    else:  # pragma: no cover
        raise ValueError(exp)
    return dict(lhs=report.lhs_mean, lhs_se=report.lhs_se,
                rhs=report.rhs_mean, rhs_se=report.rhs_se,
                diff=report.diff_mean, diff_se=report.diff_se, z=report.z,
                extras=report.extras)


def _status(cfg: ExperimentConfig, row: ReportRow) -> str:
    if cfg.experiment in GRADIENT_EXPERIMENTS:
        if row.diff is None:
            return "pass"
        tol = max(cfg.se_mult * row.lhs_se + cfg.tol_abs,
                  cfg.tol_rel * abs(row.rhs))
        return "pass" if abs(row.diff) <= tol else "fail"
    ok = abs(row.diff) <= cfg.z_threshold * row.diff_se + cfg.tol_abs
    if cfg.experiment == "girsanov_invariance":
        mart = row.extras.get("martingale_mean", 1.0)
        mart_se = row.extras.get("martingale_se", 0.0)
        ok = ok and abs(mart - 1.0) <= cfg.z_threshold * mart_se
    if cfg.experiment == "girsanov_derivative":
        fd = row.extras.get("fd")
        ok = ok and abs(fd.diff_mean) <= cfg.z_threshold * fd.diff_se
        ok = ok and (abs(row.extras["fd_vs_direct_mean"])
                     <= 3.0 * row.extras["fd_vs_direct_se"] + 1e-2)
    return "pass" if ok else "fail"


def run_suite(configs, jobs: int = 1, out: str | None = None,
              fmt: str | None = None, stream=None) -> int:
    """Run experiments sequentially, emit the report, return the exit code."""
    stream = stream if stream is not None else sys.stdout
    _set_threads(jobs)
    rows = []
    failed = False
    for cfg in configs:
        for note in snap_warnings(cfg):
            print(f"warning: {note}", file=sys.stderr)
        row = run_experiment(cfg)
        row.status = _status(cfg, row)
        failed = failed or row.status != "pass"
        print(f"{row.experiment:22s} {cfg.name:28s} {row.status:4s} "
              f"z={_fmt(row.z):>22s}  {row.wall_ms:9.0f} ms", file=sys.stderr)
        rows.append(row)
    out = out or next((c.output for c in configs if c.output), None)
    fmt = fmt or next((c.format for c in configs if c.format), None) or "csv"
    try:
        if out:
            with open(out, "w", encoding="utf-8") as fh:
                emit_report(rows, fmt, fh)
        else:
            emit_report(rows, fmt, stream)
    except OSError as exc:
        print(f"error: cannot write report: {exc}", file=sys.stderr)
        return 3
    return 1 if failed else 0


def _set_threads(jobs: int) -> None:
    import numba

    jobs = max(1, min(jobs, numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(jobs)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def emit_report(rows, fmt: str, fh) -> None:
    """Write the report rows as CSV or JSON with 17-significant-digit floats."""
    if fmt == "csv":
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(getattr(row, col)) for col in CSV_COLUMNS)
                     + "\n")
    elif fmt == "json":
        import json
        payload = [{col: getattr(row, col) for col in CSV_COLUMNS}
                   for row in rows]
        fh.write(json.dumps(payload, indent=2, allow_nan=True) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowibp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment config file")
    runp.add_argument("config")
    runp.add_argument("--jobs", type=int, default=1)
    runp.add_argument("--out", default=None)
    runp.add_argument("--format", choices=["csv", "json"], default=None)
    sub.add_parser("list", help="print the experiment registry")
    args = parser.parse_args(argv)

    if args.command == "list":
        for name, desc in EXPERIMENTS.items():
            print(f"{name:22s} {desc}")
        return 0

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 3
    configs, diags = parse_config(text)
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return 2
    if not configs:
        print("warning: empty config, nothing to run", file=sys.stderr)
    try:
        return run_suite(configs, jobs=args.jobs, out=args.out,
                         fmt=args.format)
    except FlowIbpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
