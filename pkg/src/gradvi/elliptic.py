"""Stationary solvers for the gradient-constrained problems.

The workhorse is a damped Newton method on the penalized equation

    mass*u + conv(u) - div[(delta + k_eps(|grad u| - g)) |grad u|^(p-2) grad u] = rhs

with continuation down a decreasing eps schedule.  The same core drives the
implicit time steps in :mod:`gradvi.evolution` (mass = 1/tau) and the
transport variants (conv = upwind first-order terms).

An independent ADMM splitting on the equivalent convex program provides the
reference oracle, and a projected-gradient solver handles the double
obstacle reformulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constraints import BoundField, PenaltyParams, penalty, violation
from .grid import (
    DEFAULT_SEED,
    _JACOBIAN_FLOOR,
    Grid,
    cell_norms,
    field_norm,
    gradient,
    inner_cells,
    inner_nodes,
    p_flux,
)


class SolverFailure(RuntimeError):
    """Raised when a solve cannot produce a usable iterate."""


@dataclass
class Tolerances:
    newton: float = 1e-11
    feasibility: float = 1e-4
    vi_residual: float = 1e-6
    max_newton: int = 80


@dataclass
class EllipticProblem:
    grid: Grid
    p: float
    delta: float
    f: np.ndarray
    g: BoundField

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if self.f.shape != self.grid.shape:
            raise ValueError("forcing shape does not match grid")
        if self.p <= 1:
            raise ValueError("p must exceed 1")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.g.values.shape != self.grid.cell_shape:
            raise ValueError("bound shape does not match grid cells")

    def objective(self, u: np.ndarray) -> float:
        """(delta/p) int |grad u|^p - int f u (the discrete convex energy)."""
        s = cell_norms(gradient(u, self.grid))
        w = self.grid.cell_weight
        return float(
            (self.delta / self.p) * w * np.sum(s**self.p)
            - inner_nodes(self.f, u, self.grid)
        )


@dataclass
class EllipticSolution:
    u: np.ndarray
    lam: np.ndarray | None
    diagnostics: dict
    trace: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# penalized Newton core
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _block_pattern(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """COO pattern of the per-cell 2x2 Jacobian blocks (2D only)."""
    c = np.arange(grid.n_cells)
    rows = np.stack([2 * c, 2 * c, 2 * c + 1, 2 * c + 1], axis=1).ravel()
    cols = np.stack([2 * c, 2 * c + 1, 2 * c, 2 * c + 1], axis=1).ravel()
    return rows, cols


_WORK_CAP = 150.0  # solver-internal exponent clamp: keeps Jacobian entries
# (~exp(cap)/h^2) and their LU products inside float64; real wall
# multipliers live at exponents O(log lambda) << cap


def _flux_and_blocks(grid, p, delta, g_cells, eps, q, kink_band=0.0):
    """Penalized flux per cell plus the coefficients of its Jacobian.

    Uses a tighter exponent clamp than :func:`gradvi.constraints.penalty`
    so that line-search trial points never overflow; the continuation keeps
    accepted iterates far below the clamp.

    ``kink_band`` > 0 extends the right derivative of the penalty through a
    thin band below the kink: warm starts park wall cells a hair below it,
    where the exact (zero) slope would blind Newton to the wall.  The exact
    Jacobian is recovered with ``kink_band = 0``.
    """
    s = cell_norms(q)
    excess = s - g_cells
    arg = np.minimum(np.clip(excess, 0.0, 1.0 / eps) / eps, _WORK_CAP)
    k = np.expm1(arg)
    kp = np.where(
        (excess >= -kink_band) & (excess <= 1.0 / eps) & (arg < _WORK_CAP),
        np.exp(arg) / eps,
        0.0,
    )
    s_safe = np.where(s > 0, s, 1.0)
    coeff = (delta + k) * np.where(s > 0, s_safe ** (p - 2.0), 0.0)
    flux = coeff[..., None] * q
    sreg = np.sqrt(s * s + _JACOBIAN_FLOOR)
    a = (delta + k) * sreg ** (p - 2.0)
    da_ds = kp * sreg ** (p - 2.0) + (delta + k) * (p - 2.0) * sreg ** (p - 3.0)
    return flux, a, da_ds, sreg, s, k


def _penalty_potential_p2(s, g_cells, eps):
    """Closed-form antiderivative (in |q|) of k_eps(|q| - g) |q| for p = 2,
    consistent with the clamped penalty used in the residual."""
    amax = min(1.0 / (eps * eps), _WORK_CAP)
    s_end = g_cells + eps * amax
    s_mid = np.clip(s, g_cells, s_end)

    def f_anti(sigma):
        return eps * np.exp((sigma - g_cells) / eps) * (sigma - eps) - 0.5 * sigma**2

    out = f_anti(s_mid) - f_anti(g_cells)
    over = s > s_end
    if np.any(over):
        k_end = np.expm1(amax)
        se = np.broadcast_to(s_end, s.shape)
        out = out.copy()
        out[over] += 0.5 * k_end * (s[over] ** 2 - se[over] ** 2)
    return out


def _jacobian(grid, d_int, a, da_ds, sreg, q, mass_diag, conv):
    c = da_ds / sreg
    if grid.dim == 1:
        s2 = q[..., 0] ** 2
        diag = (a + c * s2).ravel()
        smat = sp.diags(diag)
    else:
        qx = q[..., 0].ravel()
        qy = q[..., 1].ravel()
        af = a.ravel()
        cf = c.ravel()
        data = np.stack(
            [af + cf * qx * qx, cf * qx * qy, cf * qx * qy, af + cf * qy * qy],
            axis=1,
        ).ravel()
        rows, cols = _block_pattern(grid)
        n = grid.n_cells * 2
        smat = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    jac = (d_int.T @ (smat @ d_int)).tocsc()
    if mass_diag is not None:
        jac = jac + sp.diags(mass_diag)
    if conv is not None:
        jac = jac + conv
    return jac.tocsc()


def _solve_penalized_equation(
    grid: Grid,
    p: float,
    delta: float,
    g_cells: np.ndarray,
    rhs: np.ndarray,
    eps: float,
    mass=0.0,
    conv: sp.spmatrix | None = None,
    v0: np.ndarray | None = None,
    tol: float = 1e-11,
    max_iter: int = 80,
):
    """Damped Newton on the penalized equation at fixed eps.

    All quantities are in equation scale (the h^d weights cancel between the
    node mass terms and D^T W_c): residual = mass*v + conv@v + D^T flux - rhs.

    Line search: for the potential case (no convection, p = 2) Armijo on the
    exact convex energy, which cannot stall while the residual is nonzero;
    otherwise Armijo on the residual norm with a trust cap on the penalty
    exponent growth.
    """
    d_int = grid.interior_gradient_matrix
    rhs_int = grid.restrict(rhs)
    mass_arr = np.asarray(mass, dtype=float)
    mass_diag = (
        None
        if np.all(mass_arr == 0.0)
        else (np.full(grid.n_interior, float(mass_arr)) if mass_arr.ndim == 0
              else grid.restrict(mass_arr))
    )
    v = np.zeros(grid.n_interior) if v0 is None else v0.copy()
    scale = 1.0 + float(np.max(np.abs(rhs_int))) if rhs_int.size else 1.0
    use_energy = conv is None and p == 2.0

    def residual(vec, band):
        q = (d_int @ vec).reshape(grid.cell_shape + (grid.dim,))
        flux, a, da_ds, sreg, s, k = _flux_and_blocks(
            grid, p, delta, g_cells, eps, q, kink_band=band
        )
        r = d_int.T @ flux.ravel() - rhs_int
        if mass_diag is not None:
            r = r + mass_diag * vec
        if conv is not None:
            r = r + conv @ vec
        return r, (q, a, da_ds, sreg, s, k)

    def energy(vec, s):
        val = float(np.sum(0.5 * delta * s * s + _penalty_potential_p2(s, g_cells, eps)))
        if mass_diag is not None:
            val += 0.5 * float(mass_diag @ (vec * vec))
        return val - float(rhs_int @ vec)

    def noise_floor(aux):
        # float64 roundoff of the exponential penalty, amplified through D^T;
        # the multiplier estimate is capped so degenerate trial states cannot
        # inflate the floor into a free pass
        _, _, _, _, s, k = aux
        smax = float(np.max(s)) if s.size else 0.0
        lam = min(delta + (float(np.max(k)) if k.size else 0.0), 1e6)
        return 256.0 * 2.3e-16 / eps * (2 * grid.dim / min(grid.h)) * lam * max(
            smax, 1.0
        ) ** (p - 1.0)

    def newton_phase(v, band, budget):
        r, aux = residual(v, band)
        rnorm = np.linalg.norm(r)
        converged = stalled = False
        iters = 0
        lu = None
        lu_age = 0
        slow = False
        # factor reuse pays off only while the wall stiffness (~exp(./eps))
        # moves slowly; at small eps stale factors derail the endgame
        max_age = 6 if eps >= 1e-3 else 0
        for iters in range(1, budget + 1):
            if np.max(np.abs(r)) <= tol * scale:
                converged = True
                break
            if lu is None or lu_age >= max_age or slow:
                q, a, da_ds, sreg, s_cur, _ = aux
                jac = _jacobian(grid, d_int, a, da_ds, sreg, q, mass_diag, conv)
                try:
                    lu = spla.splu(jac, permc_spec="MMD_AT_PLUS_A")
                except RuntimeError:
                    stalled = True
                    break
                lu_age = 0
            else:
                s_cur = aux[4]
            step = lu.solve(-r)
            accepted = False
            if use_energy:
                # full steps on plain residual decrease (local quadratic
                # phase, immune to float-level energy decrements) ...
                t = 1.0
                r_new, aux_new = residual(v + step, band)
                rn_try = np.linalg.norm(r_new)
                if np.isfinite(rn_try) and rn_try <= 0.9 * rnorm:
                    accepted = True
                else:
                    # ... Armijo on the exact convex energy otherwise
                    e0 = energy(v, s_cur)
                    slope = float(r @ step)
                    while t >= 1e-13:
                        r_new, aux_new = residual(v + t * step, band)
                        e_new = energy(v + t * step, aux_new[4])
                        if np.isfinite(e_new) and e_new <= e0 + 1e-4 * t * slope:
                            accepted = True
                            break
                        t *= 0.5
            else:
                t = 1.0
                while t >= 1e-9:
                    r_new, aux_new = residual(v + t * step, band)
                    rn = np.linalg.norm(r_new)
                    if np.isfinite(rn) and rn <= (1.0 - 1e-4 * t) * rnorm:
                        accepted = True
                        break
                    t *= 0.5
            if not accepted:
                if lu_age > 0:  # stale factor: rebuild once before giving up
                    lu = None
                    continue
                stalled = True
                break
            move = t * float(np.max(np.abs(step)))
            v = v + t * step
            r, aux = r_new, aux_new
            rn_acc = np.linalg.norm(r)
            slow = rn_acc > 0.5 * rnorm
            rnorm = rn_acc
            lu_age += 1
            if move <= 1e-12 * (1.0 + float(np.max(np.abs(v)))):
                stalled = True
                break
        return v, r, aux, converged, stalled, iters

    if use_energy:
        v, r, aux, converged, stalled, iters = newton_phase(v, 0.0, max_iter)
    else:
        # phase 1 sees the wall through a thin band below the kink (lets the
        # active set grow across it); phase 2 polishes with the exact slope.
        band = 1e-5 * (1.0 + np.asarray(g_cells))
        v, r, aux, converged, stalled, iters = newton_phase(v, band, max_iter)
        if not converged or stalled:
            v, r, aux, conv2, stalled, it2 = newton_phase(
                v, 0.0, min(20, max_iter)
            )
            converged = converged or conv2
            iters += it2
    res_inf = float(np.max(np.abs(r))) if r.size else 0.0
    if not converged:
        # a stall at the float noise floor of the exponential penalty (or
        # within 1e-4 relative residual, from active-set chatter at the kink)
        # is stationarity for practical purposes; genuine divergence leaves
        # an O(1) relative residual and stays flagged
        converged = res_inf <= tol * scale or (
            stalled
            and res_inf <= max(tol * scale, noise_floor(aux), 1e-4 * scale)
        )
    info = {
        "eps": eps,
        "newton_iters": iters,
        "residual_inf": res_inf,
        "converged": converged,
        "stalled": stalled,
    }
    return v, info


def _continuation_solve(
    grid,
    p,
    delta,
    g_cells,
    rhs,
    params: PenaltyParams,
    mass=0.0,
    conv=None,
    v0=None,
    tol=1e-11,
    max_iter=80,
    max_splits=8,
    cold=None,
):
    """Run the eps continuation; cold starts get gentle warm-up stages
    prepended and failing stages trigger one geometric-midpoint insertion."""
    stages = list(params.schedule)
    if cold is None:
        cold = v0 is None
    if cold and stages[0] < 1.0:
        warm = []
        e = 1.0
        while e > stages[0] * 1.9:
            warm.append(e)
            e /= np.sqrt(10.0)
        stages = warm + stages
    v = v0
    trace = []
    splits = 0
    prev_eps = None
    i = 0
    while i < len(stages):
        eps = stages[i]
        v_new, info = _solve_penalized_equation(
            grid, p, delta, g_cells, rhs, eps,
            mass=mass, conv=conv, v0=v, tol=tol, max_iter=max_iter,
        )
        if (
            not info["converged"]
            and splits < max_splits
            and prev_eps is not None
            and prev_eps / eps > 1.9
        ):
            stages.insert(i, float(np.sqrt(prev_eps * eps)))
            splits += 1
            continue  # retry through the midpoint, keeping the last iterate
        v = v_new
        trace.append(info)
        prev_eps = eps
        i += 1
    # the early stages are scaffolding; the final stage is the solved problem
    ok = bool(trace and trace[-1]["converged"])
    return v, trace, ok


def _smooth_noise(grid: Grid, rng, sweeps: int = 6) -> np.ndarray:
    u = np.zeros(grid.shape)
    u.ravel()[grid.interior_flat] = rng.standard_normal(grid.n_interior)
    lap = grid.dirichlet_laplacian
    diag = lap.diagonal()
    v = grid.restrict(u)
    for _ in range(sweeps):
        v = v - 0.6 * (lap @ v) / diag
    return grid.embed(v)


def feasible_test_fields(
    grid: Grid, g: BoundField, n: int, seed: int = DEFAULT_SEED
) -> list[np.ndarray]:
    """Seeded battery of fields in the discrete constraint set (plus zero)."""
    rng = np.random.default_rng(seed)
    fields = [np.zeros(grid.shape)]
    for _ in range(n):
        w = _smooth_noise(grid, rng)
        s = cell_norms(gradient(w, grid))
        ratio = np.max(s / g.values) if s.size else 0.0
        if ratio > 0:
            w = w / max(1.0, ratio * (1.0 + 1e-12))
        fields.append(w)
    return fields


def vi_residual(
    u: np.ndarray, problem: EllipticProblem, fields: list[np.ndarray]
) -> float:
    """min over test fields w of delta<L_p grad u, grad(w-u)> - <f, w-u>."""
    grid = problem.grid
    flux = p_flux(gradient(u, grid), problem.p)
    worst = np.inf
    for w in fields:
        dq = gradient(w - u, grid)
        r = problem.delta * inner_cells(flux, dq, grid) - inner_nodes(
            problem.f, w - u, grid
        )
        worst = min(worst, r)
    return float(worst)


def solve_vi(
    problem: EllipticProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    u_init: np.ndarray | None = None,
    check_vi: bool = True,
    n_test_fields: int = 8,
    seed: int = DEFAULT_SEED,
) -> EllipticSolution:
    """Penalized-Newton solve of the gradient-constrained VI (delta > 0)."""
    if problem.delta <= 0:
        raise ValueError("solve_vi needs delta > 0; use solve_degenerate")
    params = params or PenaltyParams()
    tols = tols or Tolerances()
    grid = problem.grid
    v0 = grid.restrict(u_init) if u_init is not None else None
    v, trace, ok = _continuation_solve(
        grid, problem.p, problem.delta, problem.g.values, problem.f, params,
        v0=v0, tol=tols.newton, max_iter=tols.max_newton,
    )
    u = grid.embed(v)
    eps_final = params.schedule[-1]
    lam, gap = recover_multiplier(u, problem, eps_final)
    viol, frac = violation(u, problem.g, grid)
    diagnostics = {
        "violation_max": viol,
        "violation_fraction": frac,
        "complementarity_gap": gap,
        "eps_final": eps_final,
        "objective": problem.objective(u),
    }
    flags = {
        "newton_failed": not ok,
        "feasibility_failed": viol > tols.feasibility,
    }
    if check_vi:
        fields = feasible_test_fields(grid, problem.g, n_test_fields, seed=seed)
        diagnostics["vi_residual_min"] = vi_residual(u, problem, fields)
        flags["vi_failed"] = diagnostics["vi_residual_min"] < -tols.vi_residual
    return EllipticSolution(u=u, lam=lam, diagnostics=diagnostics, trace=trace,
                            flags=flags)


def recover_multiplier(
    u: np.ndarray, problem: EllipticProblem, eps: float
) -> tuple[np.ndarray, float]:
    """Multiplier lam = delta + k_eps(|grad u| - g) per cell and the
    complementarity gap <lam - delta, (g - |grad u|)+>."""
    grid = problem.grid
    s = cell_norms(gradient(u, grid))
    lam = problem.delta + penalty(s - problem.g.values, eps)
    slack = np.maximum(problem.g.values - s, 0.0)
    gap = float(grid.cell_weight * np.sum((lam - problem.delta) * slack))
    return lam, gap


# ---------------------------------------------------------------------------
# ADMM oracle on the equivalent convex program
# ---------------------------------------------------------------------------


def _radial_prox(p, delta, rho, vnorm, gval):
    """argmin over s in [0, g] of (delta/p) s^p + (rho/2)(s - vnorm)^2."""
    if delta == 0.0:
        return np.minimum(vnorm, gval)
    if p == 2.0:
        s = rho * vnorm / (delta + rho)
    elif p == 3.0:
        s = (-rho + np.sqrt(rho * rho + 4.0 * delta * rho * vnorm)) / (2.0 * delta)
    elif p == 1.5:
        t = (-delta + np.sqrt(delta * delta + 4.0 * rho * rho * vnorm)) / (2.0 * rho)
        s = t * t
    else:
        lo = np.zeros_like(vnorm)
        hi = vnorm.copy()
        for _ in range(70):
            mid = 0.5 * (lo + hi)
            val = delta * mid ** (p - 1.0) + rho * (mid - vnorm)
            hi = np.where(val > 0, mid, hi)
            lo = np.where(val > 0, lo, mid)
        s = 0.5 * (lo + hi)
    return np.minimum(s, gval)


def solve_vi_oracle(
    problem: EllipticProblem,
    tol: float = 1e-11,
    max_iter: int = 200_000,
    rho: float | None = None,
) -> EllipticSolution:
    """Slow reference solve of the discrete convex program by ADMM splitting
    q = grad u with per-cell Euclidean-ball projection in the q update.

    Independent of the penalized Newton path; correct for every p > 1.
    """
    grid = problem.grid
    if problem.delta <= 0:
        raise ValueError("oracle needs delta > 0")
    d_int = grid.interior_gradient_matrix
    rho = rho if rho is not None else max(problem.delta, 1.0)
    lap = (d_int.T @ d_int).tocsc()
    lu = spla.splu(rho * lap)
    f_int = grid.restrict(problem.f)
    nshape = grid.cell_shape + (grid.dim,)
    q = np.zeros(nshape)
    w = np.zeros(nshape)
    v = np.zeros(grid.n_interior)
    gval = problem.g.values
    scale = max(1.0, float(np.max(gval)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = f_int + rho * (d_int.T @ (q - w).ravel())
        v = lu.solve(rhs)
        du = (d_int @ v).reshape(nshape)
        target = du + w
        tnorm = cell_norms(target)
        s = _radial_prox(problem.p, problem.delta, rho, tnorm, gval)
        q_old = q
        safe = np.where(tnorm > 0, tnorm, 1.0)
        q = (np.where(tnorm > 0, s / safe, 0.0))[..., None] * target
        w = w + du - q
        r_primal = float(np.max(np.abs(du - q)))
        r_dual = rho * float(np.max(np.abs(d_int.T @ (q - q_old).ravel())))
        if r_primal <= tol * scale and r_dual <= tol * max(
            1.0, float(np.max(np.abs(f_int))) if f_int.size else 1.0
        ):
            converged = True
            break
    u = grid.embed(v)
    # ball multiplier from the scaled dual variable y = rho * w
    s_u = cell_norms(gradient(u, grid))
    y = rho * w
    yq = -np.sum(y * gradient(u, grid), axis=-1)
    mu = np.maximum(yq - problem.delta * s_u ** (problem.p - 1.0), 0.0)
    lam = problem.delta + mu / np.maximum(s_u, 1e-30)
    viol, frac = violation(u, problem.g, grid)
    diagnostics = {
        "violation_max": viol,
        "violation_fraction": frac,
        "iterations": it,
        "primal_residual": r_primal,
        "dual_residual": r_dual,
        "objective": problem.objective(u),
    }
    return EllipticSolution(
        u=u, lam=lam, diagnostics=diagnostics,
        flags={"iteration_cap": not converged},
    )


# ---------------------------------------------------------------------------
# degenerate limit delta -> 0
# ---------------------------------------------------------------------------


def solve_degenerate(
    problem: EllipticProblem,
    deltas: tuple[float, ...] | None = None,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    stop_tol: float = 1e-6,
) -> EllipticSolution:
    """Vanishing-viscosity continuation selecting a solution of the
    degenerate problem (delta = 0).  The returned field is *a* solution;
    nonuniqueness is flagged, never hidden."""
    if deltas is None:
        deltas = tuple(10.0 ** (-0.5 * k) for k in range(0, 13))  # 1 .. 1e-6
    if any(b >= a for a, b in zip(deltas, deltas[1:])) or deltas[-1] <= 0:
        raise ValueError("delta schedule must be strictly decreasing and positive")
    tols = tols or Tolerances()
    u_prev = None
    sol = None
    history = []
    converged = False
    for dlt in deltas:
        sub = EllipticProblem(problem.grid, problem.p, dlt, problem.f, problem.g)
        sol = solve_vi(sub, params=params, tols=tols, u_init=u_prev,
                       check_vi=False)
        if u_prev is not None:
            diff = float(np.max(np.abs(sol.u - u_prev)))
            history.append((dlt, diff))
            if diff <= stop_tol:
                converged = True
                u_prev = sol.u
                break
        u_prev = sol.u
    viol, frac = violation(u_prev, problem.g, problem.grid)
    diagnostics = {
        "violation_max": viol,
        "violation_fraction": frac,
        "delta_history": history,
        "final_delta": history[-1][0] if history else deltas[0],
    }
    return EllipticSolution(
        u=u_prev, lam=sol.lam, diagnostics=diagnostics, trace=history,
        flags={"nonunique": True, "continuation_converged": converged},
    )


# ---------------------------------------------------------------------------
# double obstacle reformulation
# ---------------------------------------------------------------------------


def solve_double_obstacle(
    p: float,
    delta: float,
    f: np.ndarray,
    upper: np.ndarray,
    lower: np.ndarray,
    grid: Grid,
    tol: float = 1e-11,
    max_iter: int = 200_000,
) -> EllipticSolution:
    """Minimize (delta/p) int |grad u|^p - int f u subject to
    lower <= u <= upper nodewise (exact box projection).

    p = 2 uses FISTA with restart at the exact Lipschitz constant; other p
    fall back to Armijo projected gradient.
    """
    f = np.asarray(f, dtype=float)
    upper = np.asarray(upper, dtype=float)
    lower = np.asarray(lower, dtype=float)
    if np.any(lower > upper):
        raise ValueError("incompatible obstacles (lower > upper somewhere)")
    if delta <= 0 or p <= 1:
        raise ValueError("need delta > 0 and p > 1")
    d_int = grid.interior_gradient_matrix
    lo = grid.restrict(lower)
    hi = grid.restrict(upper)
    f_int = grid.restrict(f)
    v = np.clip(np.zeros(grid.n_interior), lo, hi)

    def grad_obj(vec):
        q = (d_int @ vec).reshape(grid.cell_shape + (grid.dim,))
        return delta * (d_int.T @ p_flux(q, p).ravel()) - f_int

    def obj(vec):
        q = (d_int @ vec).reshape(grid.cell_shape + (grid.dim,))
        s = cell_norms(q)
        return (delta / p) * grid.cell_weight * np.sum(s**p) - grid.cell_weight * float(
            f_int @ vec
        )

    scale = 1.0 + float(np.max(np.abs(f_int))) if f_int.size else 1.0
    converged = False
    it = 0
    if p == 2.0:
        lap = (d_int.T @ d_int).tocsr()
        x = np.ones(grid.n_interior)
        for _ in range(60):  # power iteration for the exact step size
            x = lap @ x
            x /= np.linalg.norm(x)
        lip = delta * float(x @ (lap @ x)) * 1.01
        y = v.copy()
        t_acc = 1.0
        for it in range(1, max_iter + 1):
            g_y = grad_obj(y)
            v_new = np.clip(y - g_y / lip, lo, hi)
            gm = np.max(np.abs(v_new - np.clip(v_new - grad_obj(v_new) / lip, lo, hi)))
            if gm * lip <= tol * scale:
                v = v_new
                converged = True
                break
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
            momentum = (t_acc - 1.0) / t_new
            if (v_new - v) @ (y - v_new) > 0:  # restart on non-monotone step
                t_new, momentum = 1.0, 0.0
            y = v_new + momentum * (v_new - v)
            v, t_acc = v_new, t_new
    else:
        step = 1.0
        j_cur = obj(v)
        for it in range(1, max_iter + 1):
            g_v = grad_obj(v)
            while step >= 1e-14:
                v_new = np.clip(v - step * g_v, lo, hi)
                j_new = obj(v_new)
                if j_new <= j_cur - 1e-4 / step * np.sum((v_new - v) ** 2):
                    break
                step *= 0.5
            move = np.max(np.abs(v_new - v)) if v_new.size else 0.0
            v, j_cur = v_new, j_new
            step = min(step * 2.0, 1e6)
            if move <= tol * max(1.0, np.max(np.abs(v))):
                converged = True
                break
    u = grid.embed(v)
    active_lower = np.abs(u - lower) <= 1e-9 * (1.0 + np.abs(lower))
    active_upper = np.abs(u - upper) <= 1e-9 * (1.0 + np.abs(upper))
    diagnostics = {
        "iterations": it,
        "active_lower_fraction": float(np.mean(active_lower)),
        "active_upper_fraction": float(np.mean(active_upper)),
        "active_lower": active_lower,
        "active_upper": active_upper,
    }
    return EllipticSolution(
        u=u, lam=None, diagnostics=diagnostics,
        flags={"iteration_cap": not converged},
    )


# ---------------------------------------------------------------------------
# complementarity residual and the equivalence report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplementarityResidual:
    field: np.ndarray
    sup: float
    inf: float


def complementarity_residual(
    u: np.ndarray, problem: EllipticProblem
) -> ComplementarityResidual:
    """Nodewise max(-delta Lap u - f, |grad u| - g) at interior nodes
    (p = 2 only, matching the Laplacian form of the equation)."""
    if problem.p != 2.0:
        raise ValueError("complementarity residual is defined for p = 2")
    grid = problem.grid
    v = grid.restrict(np.asarray(u, dtype=float))
    eq = problem.delta * (grid.dirichlet_laplacian @ v) - grid.restrict(problem.f)
    s_node = grid.cell_to_node(cell_norms(gradient(u, grid)))
    g_node = grid.cell_to_node(problem.g.values)
    con = grid.restrict(s_node - g_node)
    vals = np.maximum(eq, con)
    out = np.zeros(grid.shape)
    out.ravel()[grid.interior_flat] = vals
    return ComplementarityResidual(
        field=out, sup=float(np.max(vals)), inf=float(np.min(vals))
    )


@dataclass
class EquivalenceReport:
    u_vi: EllipticSolution
    u_obstacle: EllipticSolution
    gap_vi_obstacle: float
    complementarity_vi: ComplementarityResidual
    complementarity_obstacle: ComplementarityResidual
    g_constant: bool
    laplacian_g2_nonpositive: bool


def equivalence_report(
    problem: EllipticProblem,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    stencil: int = 16,
) -> EquivalenceReport:
    """Solve the gradient VI and the double obstacle reformulation, evaluate
    the complementarity residuals, and check the sufficient conditions for
    equivalence (constant g; Lap(g^2) <= 0)."""
    from .geodesic import obstacles

    if problem.p != 2.0 or problem.delta <= 0:
        raise ValueError("equivalence report is defined for p = 2, delta > 0")
    grid = problem.grid
    sol_vi = solve_vi(problem, params=params, tols=tols)
    upper, lower = obstacles(problem.g, grid, stencil=stencil)
    sol_ob = solve_double_obstacle(
        problem.p, problem.delta, problem.f, upper, lower, grid
    )
    gap = float(np.max(np.abs(sol_vi.u - sol_ob.u)))
    g = problem.g.values
    g_const = bool(np.ptp(g) <= 1e-12 * max(1.0, float(np.max(np.abs(g)))))
    g2_node = grid.cell_to_node(g) ** 2
    lap_g2 = -(grid.dirichlet_laplacian @ grid.restrict(g2_node))
    # boundary contributions of the Dirichlet stiffness are spurious for
    # fields that do not vanish there; test strictly interior nodes only
    mask = np.zeros(grid.shape, dtype=bool)
    inner = tuple(slice(2, -2) for _ in range(grid.dim))
    mask[inner] = True
    keep = mask.ravel()[grid.interior_flat]
    lap_ok = bool(
        np.all(lap_g2[keep] <= 1e-8 * max(1.0, float(np.max(np.abs(g2_node)))))
    )
    return EquivalenceReport(
        u_vi=sol_vi,
        u_obstacle=sol_ob,
        gap_vi_obstacle=gap,
        complementarity_vi=complementarity_residual(sol_vi.u, problem),
        complementarity_obstacle=complementarity_residual(sol_ob.u, problem),
        g_constant=g_const,
        laplacian_g2_nonpositive=lap_ok,
    )


# ---------------------------------------------------------------------------
# continuous dependence studies
# ---------------------------------------------------------------------------


@dataclass
class DependenceStudy:
    mode: str
    magnitudes: list[float]
    errors: list[float]
    fitted_slope: float


def _bump(grid: Grid, on_cells: bool) -> np.ndarray:
    """Deterministic smooth bump with unit sup norm, vanishing near the
    boundary, used as the perturbation direction."""
    coords = grid.cell_centers() if on_cells else grid.node_coords()
    out = np.ones(coords[0].shape)
    for ax, x in zip(grid.extents, coords):
        lo, hi = ax
        t = (x - lo) / (hi - lo)
        out = out * np.sin(np.pi * t) ** 2
    return out / np.max(out)


def dependence_study(
    problem: EllipticProblem,
    mode: str,
    magnitudes: list[float],
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
) -> DependenceStudy:
    """Solve the base and perturbed problems and fit the log-log slope of the
    X_p error against the perturbation magnitude.

    Modes: ``perturb-f`` (forcing), ``perturb-g`` and ``mosco`` (bound; the
    latter reports W^{1,p} convergence of u_n for g_n -> g)."""
    mags = [float(m) for m in magnitudes]
    positive = [m for m in mags if m > 0]
    if len(positive) < 3:
        raise ValueError("need at least 3 positive magnitudes")
    if any(b >= a for a, b in zip(positive, positive[1:])):
        raise ValueError("magnitudes must be strictly decreasing")
    base = solve_vi(problem, params=params, tols=tols, check_vi=False)
    grid = problem.grid
    errors = []
    for m in mags:
        if mode == "perturb-f":
            pert = EllipticProblem(
                grid, problem.p, problem.delta,
                problem.f + m * _bump(grid, on_cells=False), problem.g,
            )
        elif mode in ("perturb-g", "mosco"):
            gvals = problem.g.values + m * _bump(grid, on_cells=True)
            pert = EllipticProblem(
                grid, problem.p, problem.delta, problem.f,
                BoundField(gvals, nu=problem.g.nu),
            )
        else:
            raise ValueError(f"unknown study mode {mode!r}")
        sol = solve_vi(pert, params=params, tols=tols, check_vi=False)
        errors.append(field_norm(gradient(sol.u - base.u, grid), problem.p, grid))
    fit_x = [np.log(m) for m, e in zip(mags, errors) if m > 0 and e > 0]
    fit_y = [np.log(e) for m, e in zip(mags, errors) if m > 0 and e > 0]
    slope = float(np.polyfit(fit_x, fit_y, 1)[0]) if len(fit_x) >= 2 else float("nan")
    return DependenceStudy(mode=mode, magnitudes=mags, errors=errors,
                           fitted_slope=slope)
