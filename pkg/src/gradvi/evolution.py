"""Evolutionary solvers by the Rothe method.

Each implicit Euler step is a stationary gradient-constrained problem with a
1/tau mass term, solved by the penalized Newton core of
:mod:`gradvi.elliptic`.  Quiet steps are solved directly at the final
penalty strength; steps that fail there rerun the continuation schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .constraints import (
    BoundField,
    ConstraintOperator,
    PenaltyParams,
    evaluate_constraint,
    violation,
)
from .elliptic import (
    SolverFailure,
    Tolerances,
    _continuation_solve,
    _solve_penalized_equation,
    _smooth_noise,
)
from .grid import (
    DEFAULT_SEED,
    Grid,
    cell_norms,
    field_norm,
    gradient,
    inner_cells,
    inner_nodes,
    p_flux,
)
from .qvi import CertificateInconsistencyError


def _field_at(f, t: float, grid: Grid) -> np.ndarray:
    arr = f(t) if callable(f) else f
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 0:
        arr = np.full(grid.shape, float(arr))
    if arr.shape != grid.shape:
        raise ValueError("time-sampled field has wrong shape")
    return arr


def _bound_at(g, t: float) -> BoundField:
    return g(t) if callable(g) else g


@dataclass
class ParabolicProblem:
    """Data of the evolutionary gradient-constrained problem.

    ``f`` and ``g`` may be arrays/BoundFields (time-constant) or callables
    of t; ``constraint`` replaces ``g`` for the quasi-variational solvers.
    """

    grid: Grid
    p: float
    delta: float
    f: np.ndarray | Callable
    g: BoundField | Callable | None
    u0: np.ndarray
    T: float
    tau: float
    constraint: ConstraintOperator | None = None

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.u0.shape != self.grid.shape:
            raise ValueError("initial datum shape mismatch")
        if self.tau <= 0 or self.T <= 0:
            raise ValueError("need positive horizon and step")
        if self.p <= 1 or self.delta < 0:
            raise ValueError("need p > 1 and delta >= 0")
        g0 = self.initial_bound()
        mx, _ = violation(self.u0, g0, self.grid)
        # allowance covers the slack of penalized-solver outputs used as u0
        if mx > 1e-5 * max(1.0, g0.sup):
            raise ValueError("initial datum violates its gradient bound")

    def initial_bound(self) -> BoundField:
        if self.constraint is not None:
            return evaluate_constraint(
                self.constraint, self.u0, self.grid, allow_discontinuous=True
            )
        if self.g is None:
            raise ValueError("either g or constraint must be given")
        return _bound_at(self.g, 0.0)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.tau))


@dataclass
class TimeSeriesSolution:
    grid: Grid
    times: np.ndarray
    snapshots: list[np.ndarray]
    diagnostics: list[dict] = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def sup_l2_gap(self, other: "TimeSeriesSolution") -> float:
        return max(
            field_norm(a - b, 2, self.grid)
            for a, b in zip(self.snapshots, other.snapshots)
        )

    def l2qt_norm(self) -> float:
        tau = float(self.times[1] - self.times[0])
        return float(
            np.sqrt(
                sum(tau * field_norm(u, 2, self.grid) ** 2 for u in self.snapshots[1:])
            )
        )

    def vp_norm(self, p: float) -> float:
        tau = float(self.times[1] - self.times[0])
        total = sum(
            tau * field_norm(gradient(u, self.grid), p, self.grid) ** p
            for u in self.snapshots[1:]
        )
        return float(total ** (1.0 / p))

    def l2qt_gap(self, other: "TimeSeriesSolution") -> float:
        tau = float(self.times[1] - self.times[0])
        return float(
            np.sqrt(
                sum(
                    tau * field_norm(a - b, 2, self.grid) ** 2
                    for a, b in zip(self.snapshots[1:], other.snapshots[1:])
                )
            )
        )

    def vp_gap(self, other: "TimeSeriesSolution", p: float) -> float:
        tau = float(self.times[1] - self.times[0])
        total = sum(
            tau * field_norm(gradient(a - b, self.grid), p, self.grid) ** p
            for a, b in zip(self.snapshots[1:], other.snapshots[1:])
        )
        return float(total ** (1.0 / p))

    def monotonicity_violation(self) -> float:
        worst = 0.0
        for a, b in zip(self.snapshots, self.snapshots[1:]):
            worst = max(worst, float(np.max(a - b)))
        return worst


def _implicit_step(
    grid: Grid,
    p: float,
    delta: float,
    g: BoundField,
    rhs: np.ndarray,
    mass,
    conv,
    v_prev: np.ndarray,
    params: PenaltyParams,
    tols: Tolerances,
    try_direct: bool,
    cold: bool = False,
):
    """One penalized implicit step; direct final-eps attempt, schedule fallback."""
    eps_final = params.schedule[-1]
    if try_direct:
        v, info = _solve_penalized_equation(
            grid, p, delta, g.values, rhs, eps_final,
            mass=mass, conv=conv, v0=v_prev,
            tol=tols.newton, max_iter=14,
        )
        if info["converged"]:
            return v, [info], True
    v, trace, ok = _continuation_solve(
        grid, p, delta, g.values, rhs, params,
        mass=mass, conv=conv, v0=v_prev,
        tol=tols.newton, max_iter=tols.max_newton, cold=cold,
    )
    if not ok:
        raise SolverFailure("implicit step did not converge")
    return v, trace, False


def step_implicit(
    u_n: np.ndarray,
    t_next: float,
    problem: ParabolicProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    g_override: BoundField | None = None,
) -> np.ndarray:
    """Single implicit Euler step of the parabolic VI from u_n to t_next."""
    params = params or PenaltyParams()
    tols = tols or Tolerances()
    grid = problem.grid
    g = g_override if g_override is not None else _bound_at(problem.g, t_next)
    rhs = _field_at(problem.f, t_next, grid) + np.asarray(u_n) / problem.tau
    v, _, _ = _implicit_step(
        grid, problem.p, problem.delta, g, rhs, 1.0 / problem.tau, None,
        grid.restrict(u_n), params, tols, try_direct=False, cold=True,
    )
    return grid.embed(v)


def solve_parabolic_vi(
    problem: ParabolicProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    check_weak: int = 0,
    seed: int = DEFAULT_SEED,
) -> TimeSeriesSolution:
    """March the implicit Euler steps over the horizon."""
    if problem.constraint is not None:
        raise ValueError("use solve_parabolic_qvi for operator constraints")
    params = params or PenaltyParams()
    tols = tols or Tolerances()
    grid = problem.grid
    n = problem.n_steps
    times = np.array([k * problem.tau for k in range(n + 1)])
    snaps = [problem.u0.copy()]
    diags = []
    v = grid.restrict(problem.u0)
    direct_ok = False
    for k in range(1, n + 1):
        t = times[k]
        g = _bound_at(problem.g, t)
        rhs = _field_at(problem.f, t, grid) + snaps[-1] / problem.tau
        v, trace, direct_ok = _implicit_step(
            grid, problem.p, problem.delta, g, rhs, 1.0 / problem.tau, None,
            v, params, tols, try_direct=direct_ok, cold=(k == 1),
        )
        u = grid.embed(v)
        mx, frac = violation(u, g, grid)
        diags.append(
            {
                "t": float(t),
                "violation_max": mx,
                "violation_fraction": frac,
                "newton_stages": len(trace),
                "min_increment": float(np.min(u - snaps[-1])),
            }
        )
        snaps.append(u)
        direct_ok = direct_ok or sum(i["newton_iters"] for i in trace) <= 3
    ts = TimeSeriesSolution(grid=grid, times=times, snapshots=snaps,
                            diagnostics=diags)
    if check_weak > 0:
        ts.flags["weak_residual_min"] = weak_residual(ts, problem, check_weak,
                                                      seed=seed)
    return ts


def weak_residual(
    ts: TimeSeriesSolution,
    problem: ParabolicProblem,
    n_fields: int = 3,
    seed: int = DEFAULT_SEED,
) -> float:
    """Spot-check of the time-integrated weak inequality against sampled
    feasible test trajectories w(t); returns the minimum residual (should
    be >= -tolerance)."""
    grid = problem.grid
    rng = np.random.default_rng(seed)
    tau = problem.tau
    worst = np.inf
    for _ in range(n_fields):
        base = _smooth_noise(grid, rng)
        gmin = min(
            _bound_at(problem.g, t).values.min() for t in ts.times
        )
        s = cell_norms(gradient(base, grid))
        smax = float(np.max(s)) if s.size else 0.0
        if smax > 0:
            base *= gmin / smax * (1.0 - 1e-12)
        amp = 0.5 + 0.5 * np.cos(np.linspace(0.0, np.pi, ts.times.size))
        w_traj = [a * base for a in amp]
        total = 0.5 * field_norm(w_traj[0] - problem.u0, 2, grid) ** 2
        for k in range(1, ts.times.size):
            t = ts.times[k]
            w, u = w_traj[k], ts.snapshots[k]
            dwdt = (w_traj[k] - w_traj[k - 1]) / tau
            flux = p_flux(gradient(u, grid), problem.p)
            total += tau * (
                inner_nodes(dwdt, w - u, grid)
                + problem.delta * inner_cells(flux, gradient(w - u, grid), grid)
                - inner_nodes(_field_at(problem.f, t, grid), w - u, grid)
            )
        worst = min(worst, total)
    return float(worst)


def energy_inequality_slack(ts: TimeSeriesSolution, problem: ParabolicProblem) -> float:
    """Max over n of the discrete energy inequality defect
    1/2||u_n||^2 + delta sum tau ||grad u||_p^p - 1/2||u_0||^2 - sum tau <f,u>;
    nonpositive up to solver tolerance."""
    grid = problem.grid
    tau = problem.tau
    half0 = 0.5 * field_norm(problem.u0, 2, grid) ** 2
    acc_grad = 0.0
    acc_f = 0.0
    worst = -np.inf
    for k in range(1, ts.times.size):
        u = ts.snapshots[k]
        t = ts.times[k]
        acc_grad += tau * field_norm(gradient(u, grid), problem.p, grid) ** problem.p
        acc_f += tau * inner_nodes(_field_at(problem.f, t, grid), u, grid)
        lhs = 0.5 * field_norm(u, 2, grid) ** 2 + problem.delta * acc_grad
        worst = max(worst, lhs - half0 - acc_f)
    return float(worst)


# ---------------------------------------------------------------------------
# stability studies
# ---------------------------------------------------------------------------


@dataclass
class StabilityStudy:
    mode: str
    magnitudes: list[float]
    gaps_sup_l2: list[float]
    gaps_vp: list[float]
    slope_sup_l2: float
    a_p: float
    B_fit: float
    bound_consistent: list[bool]


def a_p_constant(p: float, T: float, d_p: float, c_g: float, q_measure: float) -> float:
    """(1 + T + T^2 e^T) / (2 d_p) * (c_g |Q_T|^(1/p))^((2-p)+)."""
    base = (1.0 + T + T * T * np.exp(T)) / (2.0 * d_p)
    expo = max(2.0 - p, 0.0)
    return float(base * (c_g * q_measure ** (1.0 / p)) ** expo)


def _perturbed_problem(problem: ParabolicProblem, mode: str, m: float) -> ParabolicProblem:
    from .elliptic import _bump

    grid = problem.grid
    if mode == "f":
        bump = _bump(grid, on_cells=False)
        f0 = problem.f
        fnew = (lambda t: _field_at(f0, t, grid) + m * bump) if callable(f0) \
            else np.asarray(f0, dtype=float) + m * bump
        return ParabolicProblem(grid, problem.p, problem.delta, fnew, problem.g,
                                problem.u0, problem.T, problem.tau)
    if mode == "g":
        bump = _bump(grid, on_cells=True)
        g0 = problem.g
        if callable(g0):
            gnew = lambda t: BoundField(g0(t).values + m * bump, nu=g0(t).nu)
        else:
            gnew = BoundField(g0.values + m * bump, nu=g0.nu)
        return ParabolicProblem(grid, problem.p, problem.delta, problem.f, gnew,
                                problem.u0, problem.T, problem.tau)
    if mode == "u0":
        bump = _bump(grid, on_cells=False)
        g0 = _bound_at(problem.g, 0.0)
        u0 = problem.u0 + m * bump
        s = cell_norms(gradient(u0, grid))
        ratio = float(np.max(s / g0.values)) if s.size else 0.0
        if ratio > 1.0:
            u0 = u0 / (ratio * (1.0 + 1e-12))
        return ParabolicProblem(grid, problem.p, problem.delta, problem.f,
                                problem.g, u0, problem.T, problem.tau)
    raise ValueError(f"unknown perturbation mode {mode!r}")


def stability_study(
    problem: ParabolicProblem,
    mode: str,
    magnitudes: list[float],
    d_p: float = 1.0,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
) -> StabilityStudy:
    """Continuous-dependence study for the evolutionary problem.

    Solves the base and perturbed problems, reports sup-in-time L2 gaps and
    V_p gaps, fits the log-log slope, and checks consistency against the
    stability bounds (the constant B is fitted from the largest perturbation
    since the theory does not make it explicit)."""
    mags = [float(m) for m in magnitudes]
    if len([m for m in mags if m > 0]) < 3:
        raise ValueError("need at least 3 positive magnitudes for slope fits")
    base = solve_parabolic_vi(problem, params=params, tols=tols)
    grid = problem.grid
    T = problem.T
    gaps_l2, gaps_vp = [], []
    pert_sizes = []
    for m in mags:
        pert = _perturbed_problem(problem, mode, m)
        sol = solve_parabolic_vi(pert, params=params, tols=tols)
        gaps_l2.append(base.sup_l2_gap(sol))
        gaps_vp.append(base.vp_gap(sol, problem.p))
        if mode == "f":
            df = sum(
                problem.tau
                * field_norm(
                    _field_at(pert.f, t, grid) - _field_at(problem.f, t, grid),
                    2, grid,
                ) ** 2
                for t in base.times[1:]
            )
            pert_sizes.append(df)  # ||f1-f2||^2_{L2(QT)}
        elif mode == "g":
            dg = max(
                float(np.max(np.abs(_bound_at(pert.g, t).values
                                    - _bound_at(problem.g, t).values)))
                for t in base.times
            )
            pert_sizes.append(dg)  # ||g1-g2||_{Linf(QT)}
        else:
            pert_sizes.append(field_norm(pert.u0 - problem.u0, 2, grid) ** 2)
    front = 1.0 + T * np.exp(T)
    g_now = _bound_at(problem.g, 0.0)
    nu = g_now.nu
    b_fit = 0.0
    bound_ok = []
    if mode == "g":
        b_fit = nu * gaps_l2[0] ** 2 / (front * pert_sizes[0]) if pert_sizes[0] > 0 else 0.0
        for gap, sz in zip(gaps_l2, pert_sizes):
            rhs = front * (b_fit / nu) * sz
            bound_ok.append(bool(gap**2 <= rhs * 1.0 + 1e-12))
    else:
        for gap, sz in zip(gaps_l2, pert_sizes):
            bound_ok.append(bool(gap**2 <= front * sz + 1e-12))
    pos = [(m, g) for m, g in zip(mags, gaps_l2) if m > 0 and g > 0]
    slope = (
        float(np.polyfit([np.log(m) for m, _ in pos], [np.log(g) for _, g in pos], 1)[0])
        if len(pos) >= 2
        else float("nan")
    )
    c_g = 2.0 * g_now.sup
    ap = a_p_constant(problem.p, T, d_p, c_g, grid.measure * T)
    return StabilityStudy(
        mode=mode, magnitudes=mags, gaps_sup_l2=gaps_l2, gaps_vp=gaps_vp,
        slope_sup_l2=slope, a_p=ap, B_fit=b_fit, bound_consistent=bound_ok,
    )


# ---------------------------------------------------------------------------
# transport (first-order) variant
# ---------------------------------------------------------------------------


@dataclass
class TransportProblem:
    """First-order problem u_t + b.grad u + c u (+ delta p-Laplacian) with the
    gradient constraint; ell = min(c - div b / 2) is recorded on creation."""

    grid: Grid
    p: float
    delta: float
    b: np.ndarray | Callable
    c: np.ndarray | Callable | None
    f: np.ndarray | Callable
    g: BoundField | Callable
    u0: np.ndarray
    T: float
    tau: float

    def __post_init__(self):
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.tau <= 0 or self.T <= 0:
            raise ValueError("need positive horizon and step")
        self.ell = self.ell_at(0.0)

    def b_at(self, t: float) -> np.ndarray:
        arr = self.b(t) if callable(self.b) else self.b
        arr = np.asarray(arr, dtype=float)
        if arr.shape == (self.grid.dim,):
            arr = np.broadcast_to(arr, self.grid.shape + (self.grid.dim,)).copy()
        if arr.shape != self.grid.shape + (self.grid.dim,):
            raise ValueError("drift field has wrong shape")
        return arr

    def c_at(self, t: float) -> np.ndarray:
        if self.c is None:
            return np.zeros(self.grid.shape)
        return _field_at(self.c, t, self.grid)

    def ell_at(self, t: float) -> float:
        grid = self.grid
        b = self.b_at(t)
        div = np.zeros(grid.shape)
        if grid.dim == 1:
            (h,) = grid.h
            div[1:-1] = (b[2:, 0] - b[:-2, 0]) / (2 * h)
        else:
            hx, hy = grid.h
            div[1:-1, 1:-1] = (b[2:, 1:-1, 0] - b[:-2, 1:-1, 0]) / (2 * hx) + (
                b[1:-1, 2:, 1] - b[1:-1, :-2, 1]
            ) / (2 * hy)
        expr = self.c_at(t) - 0.5 * div
        return float(np.min(expr.ravel()[grid.interior_flat]))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.tau))


def _upwind_matrix(grid: Grid, b: np.ndarray) -> sp.csr_matrix:
    """First-order upwind discretization of b . grad at interior nodes."""
    n = grid.n_nodes
    idx = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for ax in range(grid.dim):
        h = grid.h[ax]
        comp = b[..., ax]
        bp = np.maximum(comp, 0.0)
        bm = np.minimum(comp, 0.0)
        back = np.roll(idx, 1, axis=ax)
        fwd = np.roll(idx, -1, axis=ax)
        rows.extend([idx, idx, idx, idx])
        cols.extend([idx, back, idx, fwd])
        vals.extend([bp / h, -bp / h, -bm / h, bm / h])
    rows = np.concatenate([r.ravel() for r in rows])
    cols = np.concatenate([c.ravel() for c in cols])
    vals = np.concatenate([v.ravel() for v in vals])
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return mat[grid.interior_flat][:, grid.interior_flat].tocsr()


#: default continuation for the first-order (upwind) steps: the nonsymmetric
#: operator rules out the energy line search, and below eps = 1e-5 the
#: residual-merit Newton turns fragile; the resulting feasibility slack
#: eps*log(lambda) stays within the 1e-4 feasibility tolerance.
TRANSPORT_PENALTY = PenaltyParams(eps=1e-5, schedule=(1e-1, 1e-2, 1e-3, 1e-4, 1e-5))


def solve_transport_vi(
    problem: TransportProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
) -> TimeSeriesSolution:
    """Implicit upwind steps for the transport VI."""
    params = params or TRANSPORT_PENALTY
    tols = tols or Tolerances()
    grid = problem.grid
    if problem.ell + 1.0 / problem.tau <= 0:
        raise ValueError(
            "upwind step matrix loses the M-matrix property: "
            f"ell + 1/tau = {problem.ell + 1.0 / problem.tau:.3e} <= 0"
        )
    n = problem.n_steps
    times = np.array([k * problem.tau for k in range(n + 1)])
    snaps = [problem.u0.copy()]
    diags = []
    v = grid.restrict(problem.u0)
    direct_ok = False
    b_const = not callable(problem.b) and not callable(problem.c)
    conv = None
    for k in range(1, n + 1):
        t = times[k]
        if conv is None or not b_const:
            conv = _upwind_matrix(grid, problem.b_at(t)) + sp.diags(
                grid.restrict(problem.c_at(t))
            )
        g = _bound_at(problem.g, t)
        rhs = _field_at(problem.f, t, grid) + snaps[-1] / problem.tau
        v, trace, direct_ok = _implicit_step(
            grid, problem.p, problem.delta, g, rhs, 1.0 / problem.tau, conv,
            v, params, tols, try_direct=direct_ok, cold=(k == 1),
        )
        u = grid.embed(v)
        mx, frac = violation(u, g, grid)
        diags.append(
            {
                "t": float(t),
                "violation_max": mx,
                "violation_fraction": frac,
                "newton_stages": len(trace),
                "min_increment": float(np.min(u - snaps[-1])),
            }
        )
        snaps.append(u)
        direct_ok = direct_ok or sum(i["newton_iters"] for i in trace) <= 3
    return TimeSeriesSolution(grid=grid, times=times, snapshots=snaps,
                              diagnostics=diags)


def transport_stationary(
    problem: TransportProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    tol: float = 1e-9,
    max_rounds: int = 60,
) -> np.ndarray:
    """Stationary transport VI by pseudo-time continuation (1/tau -> 0).

    Well-posed for ell = min(c - div b / 2) > 0 only, which is required.
    """
    if problem.ell_at(problem.T) <= 0:
        raise ValueError(
            "stationary transport VI needs c - div b / 2 >= mu > 0 "
            f"(got min value {problem.ell_at(problem.T):.3e})"
        )
    params = params or TRANSPORT_PENALTY
    tols = tols or Tolerances()
    grid = problem.grid
    conv = _upwind_matrix(grid, problem.b_at(problem.T)) + sp.diags(
        grid.restrict(problem.c_at(problem.T))
    )
    g = _bound_at(problem.g, problem.T)
    f = _field_at(problem.f, problem.T, grid)
    u = problem.u0.copy()
    v = grid.restrict(u)
    tau = problem.tau
    for _ in range(max_rounds):
        rhs = f + u / tau
        v, _, _ = _implicit_step(
            grid, problem.p, problem.delta, g, rhs, 1.0 / tau, conv,
            v, params, tols, try_direct=True,
        )
        u_new = grid.embed(v)
        if np.max(np.abs(u_new - u)) <= tol * max(1.0, np.max(np.abs(u_new))):
            u = u_new
            break
        u = u_new
        tau = min(tau * 4.0, 1e8)
    return u


# ---------------------------------------------------------------------------
# quasi-variational evolution
# ---------------------------------------------------------------------------


def solve_parabolic_qvi(
    problem: ParabolicProblem,
    mode: str = "lagged",
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    inner_tol: float = 1e-8,
    max_inner: int = 30,
) -> TimeSeriesSolution:
    """Per-step penalty scheme with the bound G[u] evaluated at the previous
    time level (``lagged``) or fixed-point-iterated within the step
    (``picard``); self-consistency gaps are reported per step."""
    if problem.constraint is None:
        raise ValueError("problem has no constraint operator")
    if mode not in ("lagged", "picard"):
        raise ValueError("mode must be 'lagged' or 'picard'")
    params = params or PenaltyParams()
    tols = tols or Tolerances()
    grid = problem.grid
    G = problem.constraint
    n = problem.n_steps
    times = np.array([k * problem.tau for k in range(n + 1)])
    snaps = [problem.u0.copy()]
    diags = []
    v = grid.restrict(problem.u0)
    direct_ok = False
    lagged_fallbacks = 0
    for k in range(1, n + 1):
        t = times[k]
        rhs = _field_at(problem.f, t, grid) + snaps[-1] / problem.tau
        g = evaluate_constraint(G, snaps[-1], grid)
        v_new, trace, direct_ok = _implicit_step(
            grid, problem.p, problem.delta, g, rhs, 1.0 / problem.tau, None,
            v, params, tols, try_direct=direct_ok, cold=(k == 1),
        )
        u = grid.embed(v_new)
        inner_iters = 0
        if mode == "picard":
            converged = False
            for inner_iters in range(1, max_inner + 1):
                g = evaluate_constraint(G, u, grid)
                v_new, trace, direct_ok = _implicit_step(
                    grid, problem.p, problem.delta, g, rhs,
                    1.0 / problem.tau, None, v_new, params, tols,
                    try_direct=True,
                )
                u_next = grid.embed(v_new)
                if np.max(np.abs(u_next - u)) <= inner_tol:
                    u = u_next
                    converged = True
                    break
                u = u_next
            if not converged:
                lagged_fallbacks += 1
        v = v_new
        g_self = evaluate_constraint(G, u, grid)
        mx, frac = violation(u, g_self, grid)
        diags.append(
            {
                "t": float(t),
                "self_consistency_violation": mx,
                "violation_fraction": frac,
                "inner_iterations": inner_iters,
                "min_increment": float(np.min(u - snaps[-1])),
            }
        )
        snaps.append(u)
        direct_ok = direct_ok or sum(i["newton_iters"] for i in trace) <= 3
    ts = TimeSeriesSolution(grid=grid, times=times, snapshots=snaps,
                            diagnostics=diags)
    ts.flags["picard_fallbacks"] = lagged_fallbacks
    return ts


# ---------------------------------------------------------------------------
# evolutionary contraction certificates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryFunctional:
    """Scalar functional of a whole trajectory with declared constants in
    its norm setting: "L2QT" for the weak certificate, "Vp" for the strong
    one."""

    value: Callable
    eta: Callable[[float], float]
    bound_m: Callable[[float], float]
    lip_gamma: Callable[[float], float]
    norm: str
    label: str = "custom"


def l2_energy_trajectory(eta0: float, delta0: float) -> TrajectoryFunctional:
    """gamma(v) = eta0 + delta0 ||v||^2_{L2(QT)}; Gamma(R) = 2 delta0 R."""

    def value(ts: TimeSeriesSolution) -> float:
        return eta0 + delta0 * ts.l2qt_norm() ** 2

    return TrajectoryFunctional(
        value=value,
        eta=lambda R: eta0,
        bound_m=lambda R: eta0 + delta0 * R * R,
        lip_gamma=lambda R: 2.0 * delta0 * R,
        norm="L2QT",
        label=f"l2-energy(eta0={eta0}, delta0={delta0})",
    )


def gradient_energy_trajectory(eta0: float, delta0: float) -> TrajectoryFunctional:
    """gamma(v) = eta0 + delta0 * sum tau ||grad v||_2^2 (the total-dissipation
    scaling of the thick-fluid example); Gamma(R) = 2 delta0 R in V_2."""

    def value(ts: TimeSeriesSolution) -> float:
        return eta0 + delta0 * ts.vp_norm(2.0) ** 2

    return TrajectoryFunctional(
        value=value,
        eta=lambda R: eta0,
        bound_m=lambda R: eta0 + delta0 * R * R,
        lip_gamma=lambda R: 2.0 * delta0 * R,
        norm="Vp",
        label=f"gradient-energy(eta0={eta0}, delta0={delta0})",
    )


@dataclass
class TrajectorySeparated:
    """Whole-trajectory separated constraint G[v](x, t) = gamma(v) phi(x)."""

    gamma: TrajectoryFunctional
    phi: BoundField


@dataclass
class EvolutionCertificate:
    which: str
    p: float
    delta: float
    T: float
    f_l2qt: float
    u0_l2: float
    R: float
    rho: float | None
    phi_sup: float
    eta_at_R: float
    M_at_R: float
    gamma_lip_at_R: float
    left: float
    right: float
    verdict: bool

    @property
    def ratio(self) -> float:
        return self.left / self.right


def _data_norms(problem: ParabolicProblem) -> tuple[float, float]:
    grid = problem.grid
    n = problem.n_steps
    total = sum(
        problem.tau
        * field_norm(_field_at(problem.f, k * problem.tau, grid), 2, grid) ** 2
        for k in range(1, n + 1)
    )
    return float(np.sqrt(total)), field_norm(problem.u0, 2, grid)


def evolution_certificate(
    problem: ParabolicProblem,
    constraint: TrajectorySeparated,
    which: str = "strong-Rp",
) -> EvolutionCertificate:
    """Strict-inequality contraction test for the trajectory map.

    ``weak-R*``: R* = sqrt(T + T^2 e^T)(||f|| + ||u0||) and the condition
    2 R* Gamma(R*) < eta(R*), in the L2(QT) setting (any p > 1, delta >= 0).

    ``strong-Rp``: 1 < p <= 2 and delta > 0, with
    R_p = ((1 + T + T^2 e^T)/(2 delta) (||f||^2 + ||u0||^2))^(1/p) and
    rho = 2 R_p + (2-p)(2 M(R_p) ||phi||_inf)^(2-p) |Q_T|^((2-p)/p) R_p^(p-1),
    condition rho Gamma(R_p) < eta(R_p).
    """
    gamma = constraint.gamma
    T = problem.T
    f_l2, u0_l2 = _data_norms(problem)
    phi_sup = constraint.phi.sup
    if which == "weak-R*":
        if gamma.norm != "L2QT":
            raise ValueError("weak certificate needs gamma declared in L2(QT)")
        r_star = float(np.sqrt(T + T * T * np.exp(T)) * (f_l2 + u0_l2))
        eta_r = gamma.eta(r_star)
        gam_r = gamma.lip_gamma(r_star)
        left = 2.0 * r_star * gam_r
        return EvolutionCertificate(
            which=which, p=problem.p, delta=problem.delta, T=T,
            f_l2qt=f_l2, u0_l2=u0_l2, R=r_star, rho=None, phi_sup=phi_sup,
            eta_at_R=eta_r, M_at_R=gamma.bound_m(r_star),
            gamma_lip_at_R=gam_r, left=left, right=eta_r,
            verdict=bool(left < eta_r),
        )
    if which == "strong-Rp":
        if gamma.norm != "Vp":
            raise ValueError("strong certificate needs gamma declared in Vp")
        p = problem.p
        if not 1.0 < p <= 2.0 or problem.delta <= 0:
            raise ValueError("strong certificate covers 1 < p <= 2, delta > 0")
        front = 1.0 + T + T * T * np.exp(T)
        r_p = (front / (2.0 * problem.delta) * (f_l2**2 + u0_l2**2)) ** (1.0 / p)
        m_r = gamma.bound_m(r_p)
        q_t = problem.grid.measure * T
        rho = 2.0 * r_p + (2.0 - p) * (2.0 * m_r * phi_sup) ** (2.0 - p) * q_t ** (
            (2.0 - p) / p
        ) * r_p ** (p - 1.0)
        eta_r = gamma.eta(r_p)
        gam_r = gamma.lip_gamma(r_p)
        left = rho * gam_r
        return EvolutionCertificate(
            which=which, p=p, delta=problem.delta, T=T,
            f_l2qt=f_l2, u0_l2=u0_l2, R=r_p, rho=float(rho), phi_sup=phi_sup,
            eta_at_R=eta_r, M_at_R=m_r, gamma_lip_at_R=gam_r,
            left=float(left), right=float(eta_r), verdict=bool(left < eta_r),
        )
    raise ValueError("which must be 'weak-R*' or 'strong-Rp'")


def solve_parabolic_qvi_contraction(
    problem: ParabolicProblem,
    constraint: TrajectorySeparated,
    certificate: EvolutionCertificate | None = None,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    tol: float = 1e-8,
    max_outer: int = 80,
    override: bool = False,
    q_slack: float = 0.05,
) -> tuple[TimeSeriesSolution, dict]:
    """Banach iteration of the whole-trajectory map v -> S(f, G[v], u0)."""
    cert = certificate or evolution_certificate(
        problem, constraint,
        which="strong-Rp" if constraint.gamma.norm == "Vp" else "weak-R*",
    )
    if not cert.verdict and not override:
        raise ValueError("certificate does not hold; pass override=True")
    grid = problem.grid
    gamma = constraint.gamma

    def gap(a: TimeSeriesSolution, b: TimeSeriesSolution) -> float:
        if gamma.norm == "Vp":
            return a.vp_gap(b, problem.p)
        return a.l2qt_gap(b)

    n = problem.n_steps
    times = np.array([k * problem.tau for k in range(n + 1)])
    current = TimeSeriesSolution(
        grid=grid, times=times, snapshots=[problem.u0.copy() for _ in range(n + 1)]
    )
    diffs, q_factors = [], []
    ts = current
    for _ in range(max_outer):
        scale = float(gamma.value(current))
        g_now = BoundField(scale * constraint.phi.values, nu=scale * constraint.phi.nu)
        sub = ParabolicProblem(
            grid, problem.p, problem.delta, problem.f, g_now, problem.u0,
            problem.T, problem.tau,
        )
        ts = solve_parabolic_vi(sub, params=params, tols=tols)
        d = gap(ts, current)
        diffs.append(d)
        if len(diffs) >= 2 and diffs[-2] > 100.0 * tol:
            q_factors.append(diffs[-1] / diffs[-2])
        current = ts
        if d <= tol:
            break
    scale = float(gamma.value(current))
    g_fix = BoundField(scale * constraint.phi.values, nu=scale * constraint.phi.nu)
    self_viol = max(
        violation(u, g_fix, grid)[0] for u in current.snapshots
    )
    q_max = max(q_factors) if q_factors else 0.0
    if cert.verdict and q_max > 1.0:
        raise CertificateInconsistencyError(
            f"observed trajectory contraction factor {q_max:.4f} > 1 under a "
            f"holding certificate (ratio {cert.ratio:.4f})"
        )
    trace = {
        "diffs": diffs,
        "q_factors": q_factors,
        "observed_q_max": q_max,
        "certified_ratio": cert.ratio,
        "self_consistency_violation": self_viol,
        "converged": bool(diffs and diffs[-1] <= tol),
        "q_exceeds_certificate": bool(cert.verdict and q_max > cert.ratio + q_slack),
    }
    return current, trace
