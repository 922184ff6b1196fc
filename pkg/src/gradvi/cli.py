"""Run orchestration: dispatch configs to solvers, serialize results, drive
parameter studies, and the command-line entry point.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 certificate
inconsistency.  Reruns with the same config and seed produce byte-identical
summaries apart from the timing block.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import applications, elliptic, evolution, qvi
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    bound_field_from_spec,
    build_grid,
    eval_field_expr,
    node_field_from_spec,
    parse_config,
    serialize_config,
    validate,
)
from .constraints import (
    BoundField,
    ConstantBound,
    NemytskiiBound,
    PenaltyParams,
    SeparatedNonlocal,
    gradient_energy_functional,
)
from .elliptic import SolverFailure, Tolerances
from .grid import Grid, cell_norms, field_norm, gradient
from .qvi import CertificateInconsistencyError

WORKERS_ENV = "GRADVI_WORKERS"


@dataclass
class ResultBundle:
    summary: dict
    manifest: list[str] = field(default_factory=list)
    status: int = 0


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_fields(
    fields: dict,
    grid: Grid,
    path: str | Path,
    times: np.ndarray | None = None,
) -> str:
    """Field CSV: header ``x[,y],u,lambda,g,grad_norm[,d,t]``, one row per
    node (long format with a trailing t column for time series); floats are
    printed with 17 significant digits.

    ``fields`` maps the fixed column names to node arrays (cell fields must
    be averaged to nodes by the caller); for time series ``u`` is a list of
    snapshots aligned with ``times``.
    """
    path = Path(path)
    coords = grid.node_coords()
    cols = ["x"] + (["y"] if grid.dim == 2 else [])
    cols += ["u", "lambda", "g", "grad_norm"]
    if "d" in fields:
        cols.append("d")
    if times is not None:
        cols.append("t")
    flat_coords = [c.ravel() for c in coords]

    def static_column(name):
        arr = fields.get(name)
        if arr is None:
            return np.zeros(grid.n_nodes)
        return np.asarray(arr, dtype=float).ravel()

    lam = static_column("lambda")
    gval = static_column("g")
    dval = static_column("d") if "d" in fields else None
    with path.open("w") as fh:
        fh.write(",".join(cols) + "\n")
        if times is None:
            u = static_column("u")
            gn = static_column("grad_norm")
            for i in range(grid.n_nodes):
                row = [_fmt(c[i]) for c in flat_coords]
                row += [_fmt(u[i]), _fmt(lam[i]), _fmt(gval[i]), _fmt(gn[i])]
                if dval is not None:
                    row.append(_fmt(dval[i]))
                fh.write(",".join(row) + "\n")
        else:
            snaps = fields["u"]
            for t, snap in zip(times, snaps):
                u = np.asarray(snap, dtype=float).ravel()
                gn = grid.cell_to_node(cell_norms(gradient(snap, grid))).ravel()
                for i in range(grid.n_nodes):
                    row = [_fmt(c[i]) for c in flat_coords]
                    row += [_fmt(u[i]), _fmt(lam[i]), _fmt(gval[i]), _fmt(gn[i])]
                    if dval is not None:
                        row.append(_fmt(dval[i]))
                    row.append(_fmt(t))
                    fh.write(",".join(row) + "\n")
    return str(path)


def read_fields(path: str | Path) -> dict:
    """Parse a field CSV back into flat float columns (round-trip exact)."""
    with Path(path).open() as fh:
        header = fh.readline().strip().split(",")
        cols = {name: [] for name in header}
        for line in fh:
            for name, val in zip(header, line.strip().split(",")):
                cols[name].append(float(val))
    return {name: np.array(vals) for name, vals in cols.items()}


def _solver_options(config: RunConfig):
    block = config.raw.get("solver", {}) or {}
    params = PenaltyParams()
    if "eps_schedule" in block:
        sched = tuple(float(e) for e in block["eps_schedule"])
        params = PenaltyParams(eps=sched[-1], schedule=sched)
    tols = Tolerances(
        newton=float(block.get("tol_newton", 1e-11)),
        feasibility=float(block.get("tol_feasibility", 1e-4)),
        max_newton=int(block.get("max_newton", 80)),
    )
    return params, tols, block


def _cellfield_to_node(grid, values):
    return grid.cell_to_node(np.asarray(values, dtype=float))


def _reference_error(config, grid, u):
    spec = config.raw["problem"].get("reference")
    if not spec:
        return None
    ref = np.broadcast_to(
        eval_field_expr(spec["expr"], grid.node_coords()), grid.shape
    )
    return float(np.max(np.abs(u - ref)))


def _build_elliptic(config: RunConfig):
    grid = build_grid(config)
    prob = config.raw["problem"]
    f = node_field_from_spec(prob["f"], grid)
    g = bound_field_from_spec(prob["g"], grid)
    return grid, elliptic.EllipticProblem(
        grid, float(prob["p"]), float(prob["delta"]), f, g
    )


def _run_elliptic(config: RunConfig, out: Path) -> ResultBundle:
    grid, problem = _build_elliptic(config)
    params, tols, block = _solver_options(config)
    t0 = time.perf_counter()
    if problem.delta > 0:
        sol = elliptic.solve_vi(problem, params=params, tols=tols,
                                seed=config.seed)
    else:
        sol = elliptic.solve_degenerate(problem, params=params, tols=tols)
    timing = {"solve_s": time.perf_counter() - t0}
    lam_node = _cellfield_to_node(grid, sol.lam) if sol.lam is not None else None
    s_node = _cellfield_to_node(grid, cell_norms(gradient(sol.u, grid)))
    active = float(
        np.mean(cell_norms(gradient(sol.u, grid)) >= problem.g.values - 1e-6)
    )
    summary = {
        "kind": "elliptic",
        "violation_max": sol.diagnostics.get("violation_max"),
        "complementarity_gap": sol.diagnostics.get("complementarity_gap"),
        "vi_residual_min": sol.diagnostics.get("vi_residual_min"),
        "objective": sol.diagnostics.get("objective"),
        "plastic_cell_fraction": active,
        "u_max": float(np.max(sol.u)),
        "flags": {k: bool(v) for k, v in sol.flags.items()},
    }
    if block.get("oracle"):
        oracle = elliptic.solve_vi_oracle(problem)
        summary["oracle_gap_sup"] = float(np.max(np.abs(sol.u - oracle.u)))
    err = _reference_error(config, grid, sol.u)
    if err is not None:
        summary["reference_sup_error"] = err
    summary["h_max"] = max(grid.h)
    manifest = []
    if (config.raw.get("output", {}) or {}).get("fields", True):
        path = write_fields(
            {
                "u": sol.u,
                "lambda": lam_node,
                "g": _cellfield_to_node(grid, problem.g.values),
                "grad_norm": s_node,
            },
            grid,
            out / "u.csv",
        )
        manifest.append(os.path.basename(path))
    status = 3 if sol.flags.get("newton_failed") or sol.flags.get(
        "feasibility_failed") else 0
    summary["timing"] = timing
    return ResultBundle(summary=summary, manifest=manifest, status=status)


def _run_verify(config: RunConfig, out: Path) -> ResultBundle:
    grid, problem = _build_elliptic(config)
    params, tols, _ = _solver_options(config)
    t0 = time.perf_counter()
    report = elliptic.equivalence_report(problem, params=params, tols=tols)
    timing = {"solve_s": time.perf_counter() - t0}
    summary = {
        "kind": "verify",
        "gap_vi_obstacle": report.gap_vi_obstacle,
        "complementarity_sup_vi": report.complementarity_vi.sup,
        "complementarity_inf_vi": report.complementarity_vi.inf,
        "complementarity_sup_obstacle": report.complementarity_obstacle.sup,
        "g_constant": report.g_constant,
        "laplacian_g2_nonpositive": report.laplacian_g2_nonpositive,
        "h_max": max(grid.h),
    }
    err = _reference_error(config, grid, report.u_vi.u)
    if err is not None:
        summary["reference_sup_error"] = err
    manifest = []
    if (config.raw.get("output", {}) or {}).get("fields", True):
        s_node = _cellfield_to_node(grid, cell_norms(gradient(report.u_vi.u, grid)))
        manifest.append(os.path.basename(write_fields(
            {
                "u": report.u_vi.u,
                "lambda": _cellfield_to_node(grid, report.u_vi.lam),
                "g": _cellfield_to_node(grid, problem.g.values),
                "grad_norm": s_node,
            },
            grid, out / "u_vi.csv",
        )))
        manifest.append(os.path.basename(write_fields(
            {
                "u": report.u_obstacle.u,
                "g": _cellfield_to_node(grid, problem.g.values),
                "grad_norm": _cellfield_to_node(
                    grid, cell_norms(gradient(report.u_obstacle.u, grid))
                ),
            },
            grid, out / "u_obstacle.csv",
        )))
    summary["timing"] = timing
    return ResultBundle(summary=summary, manifest=manifest, status=0)


def _constraint_from_spec(spec: dict, grid: Grid):
    variant = spec["variant"]
    if variant == "constant":
        return ConstantBound(float(spec["k"]))
    if variant == "nemytskii":
        expr = spec["expr"]
        nu = float(spec["nu"])

        def fn(*args):
            # names available to the bound expression: x (y in 2D), u, np
            coords, u = args[:-1], args[-1]
            from .config import _EVAL_NAMES

            names = dict(_EVAL_NAMES)
            names.update({"np": np, "x": coords[0], "u": u})
            if len(coords) > 1:
                names["y"] = coords[1]
            return eval(expr, {"__builtins__": {}}, names)

        return NemytskiiBound(fn, nu=nu)
    if variant == "separated-energy":
        gamma = gradient_energy_functional(float(spec["eta0"]), float(spec["delta0"]))
        phi = bound_field_from_spec(spec.get("phi", 1.0), grid)
        return SeparatedNonlocal(gamma, phi)
    raise ConfigError([f"unknown constraint variant {variant!r}"])


def _run_qvi(config: RunConfig, out: Path) -> ResultBundle:
    grid = build_grid(config)
    prob = config.raw["problem"]
    params, tols, block = _solver_options(config)
    f = node_field_from_spec(prob["f"], grid)
    G = _constraint_from_spec(prob["constraint"], grid)
    problem = qvi.QVIProblem(grid, float(prob["p"]), float(prob["delta"]), f, G)
    mode = prob.get("mode", "picard")
    t0 = time.perf_counter()
    summary = {"kind": "qvi", "mode": mode}
    status = 0
    if mode == "contraction":
        cert = qvi.contraction_certificate(problem)
        summary["certificate"] = {
            "left": cert.left, "right": cert.right, "ratio": cert.ratio,
            "verdict": cert.verdict, "R_f": cert.R_f, "C_p": cert.C_p,
            "c_p": cert.constants.c_p, "d_p": cert.constants.d_p,
            "notes": cert.notes,
        }
        try:
            sol, trace, _ = qvi.solve_qvi_contraction(
                problem, params=params, tols=tols,
                certificate=cert, override=bool(block.get("override", False)),
            )
        except CertificateInconsistencyError as exc:
            summary["error"] = str(exc)
            summary["timing"] = {"solve_s": time.perf_counter() - t0}
            return ResultBundle(summary=summary, status=4)
        summary["observed_q_max"] = sol.diagnostics.get("observed_q_max")
    else:
        sol, trace = qvi.solve_qvi_picard(problem, params=params, tols=tols)
    summary["self_consistency"] = trace.self_consistency
    summary["picard_converged"] = trace.converged
    summary["iterations"] = len(trace.diffs)
    summary["violation_vs_G"] = sol.diagnostics.get("violation_vs_G")
    if not trace.converged:
        status = 3
    manifest = []
    if (config.raw.get("output", {}) or {}).get("fields", True):
        g_fix = G(sol.u, grid)
        manifest.append(os.path.basename(write_fields(
            {
                "u": sol.u,
                "lambda": _cellfield_to_node(grid, sol.lam),
                "g": _cellfield_to_node(grid, g_fix.values),
                "grad_norm": _cellfield_to_node(
                    grid, cell_norms(gradient(sol.u, grid))
                ),
            },
            grid, out / "u.csv",
        )))
    summary["timing"] = {"solve_s": time.perf_counter() - t0}
    return ResultBundle(summary=summary, manifest=manifest, status=status)


def _timeseries_summary(ts, grid):
    return {
        "final_l2": field_norm(ts.final(), 2, grid),
        "final_sup": float(np.max(np.abs(ts.final()))),
        "monotonicity_violation": ts.monotonicity_violation(),
        "violation_max": max(
            (d.get("violation_max", d.get("self_consistency_violation", 0.0))
             for d in ts.diagnostics),
            default=0.0,
        ),
        "steps": len(ts.times) - 1,
    }


def _write_timeseries(ts, grid, problem_g_node, out, every: int) -> str:
    idx = list(range(0, len(ts.times), max(every, 1)))
    if idx[-1] != len(ts.times) - 1:
        idx.append(len(ts.times) - 1)
    times = np.array([ts.times[i] for i in idx])
    snaps = [ts.snapshots[i] for i in idx]
    return write_fields(
        {"u": snaps, "g": problem_g_node},
        grid,
        out / "trajectory.csv",
        times=times,
    )


def _run_parabolic(config: RunConfig, out: Path) -> ResultBundle:
    grid = build_grid(config)
    prob = config.raw["problem"]
    params, tols, _ = _solver_options(config)
    f = node_field_from_spec(prob["f"], grid, time_dependent=True)
    g = bound_field_from_spec(prob["g"], grid)
    u0 = node_field_from_spec(prob["u0"], grid)
    problem = evolution.ParabolicProblem(
        grid, float(prob["p"]), float(prob["delta"]), f, g, u0,
        float(prob["T"]), float(prob["tau"]),
    )
    t0 = time.perf_counter()
    try:
        ts = evolution.solve_parabolic_vi(problem, params=params, tols=tols)
    except SolverFailure as exc:
        return ResultBundle(summary={"kind": "parabolic", "error": str(exc)},
                            status=3)
    summary = {"kind": "parabolic", **_timeseries_summary(ts, grid)}
    summary["energy_inequality_slack"] = evolution.energy_inequality_slack(
        ts, problem
    )
    err = _reference_error(config, grid, ts.final())
    if err is not None:
        summary["reference_sup_error"] = err
    manifest = []
    outblock = config.raw.get("output", {}) or {}
    if outblock.get("fields", True):
        manifest.append(os.path.basename(_write_timeseries(
            ts, grid, _cellfield_to_node(grid, g.values), out,
            int(outblock.get("snapshot_every", 1)),
        )))
    summary["timing"] = {"solve_s": time.perf_counter() - t0}
    return ResultBundle(summary=summary, manifest=manifest, status=0)


def _run_transport(config: RunConfig, out: Path) -> ResultBundle:
    grid = build_grid(config)
    prob = config.raw["problem"]
    params, tols, _ = _solver_options(config)
    f = node_field_from_spec(prob["f"], grid, time_dependent=True)
    g = bound_field_from_spec(prob["g"], grid)
    u0 = node_field_from_spec(prob["u0"], grid)
    b_spec = prob["b"]
    if isinstance(b_spec, list):
        b = np.zeros(grid.shape + (grid.dim,))
        for ax, comp in enumerate(b_spec):
            b[..., ax] = node_field_from_spec(comp, grid)
    else:
        raise ConfigError(["problem.b: expected a list with one entry per axis"])
    c = node_field_from_spec(prob["c"], grid) if prob.get("c") is not None else None
    problem = evolution.TransportProblem(
        grid, float(prob["p"]), float(prob["delta"]), b, c, f, g, u0,
        float(prob["T"]), float(prob["tau"]),
    )
    t0 = time.perf_counter()
    try:
        ts = evolution.solve_transport_vi(problem, params=params, tols=tols)
    except (SolverFailure, ValueError) as exc:
        return ResultBundle(summary={"kind": "transport", "error": str(exc)},
                            status=3)
    summary = {"kind": "transport", **_timeseries_summary(ts, grid)}
    summary["ell"] = problem.ell
    manifest = []
    outblock = config.raw.get("output", {}) or {}
    if outblock.get("fields", True):
        manifest.append(os.path.basename(_write_timeseries(
            ts, grid, _cellfield_to_node(grid, g.values), out,
            int(outblock.get("snapshot_every", 1)),
        )))
    summary["timing"] = {"solve_s": time.perf_counter() - t0}
    return ResultBundle(summary=summary, manifest=manifest, status=0)


def _run_qvi_evolution(config: RunConfig, out: Path) -> ResultBundle:
    grid = build_grid(config)
    prob = config.raw["problem"]
    params, tols, block = _solver_options(config)
    f = node_field_from_spec(prob["f"], grid, time_dependent=True)
    u0 = node_field_from_spec(prob["u0"], grid)
    spec = prob["constraint"]
    t0 = time.perf_counter()
    summary = {"kind": "qvi-evolution"}
    manifest = []
    status = 0
    if spec["variant"] == "separated-energy":
        norm = spec.get("norm", "Vp")
        eta0, delta0 = float(spec["eta0"]), float(spec["delta0"])
        gamma = (
            evolution.gradient_energy_trajectory(eta0, delta0)
            if norm == "Vp"
            else evolution.l2_energy_trajectory(eta0, delta0)
        )
        phi = bound_field_from_spec(spec.get("phi", 1.0), grid)
        constraint = evolution.TrajectorySeparated(gamma, phi)
        problem = evolution.ParabolicProblem(
            grid, float(prob["p"]), float(prob["delta"]), f,
            BoundField(gamma.eta(0.0) * phi.values, nu=gamma.eta(0.0) * phi.nu),
            u0, float(prob["T"]), float(prob["tau"]),
        )
        which = prob.get("certificate", "strong-Rp" if norm == "Vp" else "weak-R*")
        cert = evolution.evolution_certificate(problem, constraint, which=which)
        summary["certificate"] = {
            "which": cert.which, "left": cert.left, "right": cert.right,
            "ratio": cert.ratio, "verdict": cert.verdict, "R": cert.R,
        }
        try:
            ts, trace = evolution.solve_parabolic_qvi_contraction(
                problem, constraint, certificate=cert, params=params,
                tols=tols, override=bool(block.get("override", False)),
            )
        except CertificateInconsistencyError as exc:
            summary["error"] = str(exc)
            summary["timing"] = {"solve_s": time.perf_counter() - t0}
            return ResultBundle(summary=summary, status=4)
        summary["observed_q_max"] = trace["observed_q_max"]
        summary["self_consistency_violation"] = trace["self_consistency_violation"]
        summary["outer_iterations"] = len(trace["diffs"])
        if not trace["converged"]:
            status = 3
        summary.update(_timeseries_summary(ts, grid))
        g_node = _cellfield_to_node(grid, constraint.phi.values)
    else:
        G = _constraint_from_spec(spec, grid)
        problem = evolution.ParabolicProblem(
            grid, float(prob["p"]), float(prob["delta"]), f, None, u0,
            float(prob["T"]), float(prob["tau"]), constraint=G,
        )
        mode = block.get("qvi_mode", "lagged")
        ts = evolution.solve_parabolic_qvi(problem, mode=mode, params=params,
                                           tols=tols)
        summary["mode"] = mode
        summary.update(_timeseries_summary(ts, grid))
        summary["self_consistency_violation"] = max(
            d["self_consistency_violation"] for d in ts.diagnostics
        )
        g_node = _cellfield_to_node(grid, G(ts.final(), grid).values)
    outblock = config.raw.get("output", {}) or {}
    if outblock.get("fields", True):
        manifest.append(os.path.basename(_write_timeseries(
            ts, grid, g_node, out, int(outblock.get("snapshot_every", 1)),
        )))
    summary["timing"] = {"solve_s": time.perf_counter() - t0}
    return ResultBundle(summary=summary, manifest=manifest, status=status)


def _run_sandpile(config: RunConfig, out: Path) -> ResultBundle:
    grid = build_grid(config)
    prob = config.raw["problem"]
    params, tols, _ = _solver_options(config)
    f = node_field_from_spec(prob["f"], grid, time_dependent=True)
    u0 = node_field_from_spec(prob["u0"], grid)
    b = None
    if prob.get("b") is not None:
        b = np.asarray([float(v) for v in prob["b"]], dtype=float)
    scenario = applications.SandpileScenario(
        grid=grid, k=float(prob["k"]), f=f, u0=u0,
        T=float(prob["T"]), tau=float(prob["tau"]),
        delta=float(prob.get("delta", 0.0)), b=b,
        threshold=prob.get("threshold"),
    )
    t0 = time.perf_counter()
    try:
        ts, report = applications.sandpile_simulate(scenario, params=params,
                                                    tols=tols)
    except SolverFailure as exc:
        return ResultBundle(summary={"kind": "sandpile", "error": str(exc)},
                            status=3)
    summary = {
        "kind": "sandpile",
        "stabilization_time": report.first_time,
        "stabilization_persistent": report.persistent,
        "threshold": report.threshold,
        "final_gap_to_cone": report.gap_history[-1],
        "monotonicity_violation": report.monotonicity_violation,
        "max_barrier_excess": report.max_barrier_excess,
        **_timeseries_summary(ts, grid),
    }
    manifest = []
    outblock = config.raw.get("output", {}) or {}
    if outblock.get("fields", True):
        from .geodesic import weighted_distance

        d = weighted_distance(BoundField.constant(grid, 1.0), grid).values
        idx = list(range(0, len(ts.times),
                         max(int(outblock.get("snapshot_every", 1)), 1)))
        if idx[-1] != len(ts.times) - 1:
            idx.append(len(ts.times) - 1)
        times = np.array([ts.times[i] for i in idx])
        snaps = [ts.snapshots[i] for i in idx]
        manifest.append(os.path.basename(write_fields(
            {
                "u": snaps,
                "g": np.full(grid.shape, scenario.k),
                "d": d,
            },
            grid, out / "trajectory.csv", times=times,
        )))
    summary["timing"] = {"solve_s": time.perf_counter() - t0}
    return ResultBundle(summary=summary, manifest=manifest, status=0)


_RUNNERS = {
    "elliptic": _run_elliptic,
    "verify": _run_verify,
    "qvi": _run_qvi,
    "parabolic": _run_parabolic,
    "transport": _run_transport,
    "qvi-evolution": _run_qvi_evolution,
    "sandpile": _run_sandpile,
}


def run(config: RunConfig, out_dir: str | Path) -> ResultBundle:
    """Dispatch a validated config and write summary + field files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.random.seed(config.seed % (2**32))
    if config.kind == "study":
        bundle = study(config, out)
    else:
        bundle = _RUNNERS[config.kind](config, out)
    bundle.summary["seed"] = config.seed
    bundle.summary["status"] = bundle.status
    bundle.summary["manifest"] = sorted(bundle.manifest)
    (out / "summary.json").write_text(
        json.dumps(bundle.summary, sort_keys=True, indent=1, default=float)
        + "\n"
    )
    bundle.manifest.append("summary.json")
    return bundle


def _set_path(data: dict, path: str, value):
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        node = node[int(key)] if isinstance(node, list) else node[key]
    if isinstance(node, list):
        node[int(keys[-1])] = value
    else:
        node[keys[-1]] = value


def study(config: RunConfig, out: Path) -> ResultBundle:
    """One sub-run per sweep value; aggregates summaries and fits a log-log
    slope between two summary scalars when requested.  Sub-run failures are
    recorded and the study continues."""
    sweep = config.raw["sweep"]
    values = sweep["values"]
    path = sweep["path"]
    workers = int(os.environ.get(WORKERS_ENV, "1"))

    def one(i_value):
        i, value = i_value
        sub_raw = copy.deepcopy(config.raw["base"])
        _set_path(sub_raw, path, value)
        errors = validate(sub_raw)
        subdir = out / f"run_{i:03d}"
        if errors:
            return i, value, None, "config: " + "; ".join(errors)
        sub = RunConfig(kind=sub_raw["kind"], raw=sub_raw)
        try:
            bundle = run(sub, subdir)
        except (SolverFailure, CertificateInconsistencyError) as exc:
            return i, value, None, str(exc)
        return i, value, bundle, None

    items = list(enumerate(values))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]
    rows = []
    manifest = []
    failed = 0
    for i, value, bundle, error in sorted(results):
        row = {"index": i, "value": value}
        if error is not None:
            row["error"] = error
            failed += 1
        else:
            row["summary"] = {
                k: v for k, v in bundle.summary.items() if k != "timing"
            }
            manifest.extend(f"run_{i:03d}/{m}" for m in bundle.manifest)
        rows.append(row)
    summary = {"kind": "study", "path": path, "rows": rows,
               "failed_runs": failed}
    fit = sweep.get("fit")
    if fit:
        xs, ys = [], []
        for row in rows:
            if "summary" not in row:
                continue
            x = row["summary"].get(fit["x"], row["value"] if fit["x"] == "value" else None)
            y = row["summary"].get(fit["y"])
            if x and y and x > 0 and y > 0:
                xs.append(np.log(float(x)))
                ys.append(np.log(float(y)))
        summary["fitted_slope"] = (
            float(np.polyfit(xs, ys, 1)[0]) if len(xs) >= 2 else None
        )
    return ResultBundle(summary=summary, manifest=manifest,
                        status=0 if failed == 0 else 3)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gradvi",
        description="Solvers for gradient-constrained variational and "
        "quasi-variational inequalities on 1D/2D grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in _RUNNERS:
        sp = sub.add_parser(kind)
        _add_common(sp)
    _add_common(sub.add_parser("study"))
    args = parser.parse_args(argv)
    try:
        text = Path(args.config).read_text()
        import yaml as _yaml

        data = _yaml.safe_load(text)
        if isinstance(data, dict) and "kind" not in data:
            data["kind"] = args.command
        if args.set:
            data = apply_overrides(data, args.set)
        if args.seed is not None:
            data.setdefault("solver", {})["seed"] = args.seed
        errors = validate(data)
        if errors:
            raise ConfigError(errors)
        config = RunConfig(kind=data["kind"], raw=data)
        if config.kind != args.command:
            raise ConfigError(
                [f"config kind {config.kind!r} does not match subcommand "
                 f"{args.command!r}"]
            )
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        bundle = run(config, args.out)
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except CertificateInconsistencyError as exc:
        print(f"certificate inconsistency: {exc}", file=sys.stderr)
        return 4
    print(json.dumps(
        {k: v for k, v in bundle.summary.items() if k not in ("rows",)},
        sort_keys=True, default=float)[:2000])
    return bundle.status


def _add_common(sp):
    sp.add_argument("--config", required=True, help="YAML config path")
    sp.add_argument("--out", default="out", help="output directory")
    sp.add_argument("--set", action="append", default=[],
                    metavar="KEY=VALUE", help="override config entries")
    sp.add_argument("--seed", type=int, default=None)


if __name__ == "__main__":
    sys.exit(main())
