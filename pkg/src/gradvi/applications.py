"""Worked scenarios: sandpile growth with finite-time stabilization and the
elastic-plastic torsion demo."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constraints import BoundField, PenaltyParams, SandpileGeps, violation
from .elliptic import EllipticProblem, EllipticSolution, Tolerances, solve_double_obstacle, solve_vi
from .evolution import (
    ParabolicProblem,
    TimeSeriesSolution,
    TransportProblem,
    solve_parabolic_qvi,
    solve_parabolic_vi,
    solve_transport_vi,
)
from .geodesic import obstacles, weighted_distance
from .grid import Grid, cell_norms, gradient


@dataclass
class SandpileScenario:
    """Growth of a granular pile with repose slope k under a source f >= 0.

    ``b`` adds a constant drift (transported variant); ``delta`` > 0 adds
    surface diffusion; ``constraint_eps`` switches the bound to the
    regularized support-aware operator for the quasi-variational
    experiments.
    """

    grid: Grid
    k: float
    f: np.ndarray | Callable
    u0: np.ndarray
    T: float
    tau: float
    delta: float = 0.0
    b: np.ndarray | None = None
    threshold: float | None = None  # default 2h
    constraint_eps: float | None = None

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("repose slope k must be positive")
        self.u0 = np.asarray(self.u0, dtype=float)
        slope0 = cell_norms(gradient(self.u0, self.grid))
        cap = np.maximum(self.k, slope0)  # u0 may follow a steeper support
        if slope0.size and np.max(slope0 - cap) > 1e-9:
            raise ValueError("initial pile violates the slope bound")

    @property
    def stabilization_threshold(self) -> float:
        return self.threshold if self.threshold is not None else 2.0 * max(self.grid.h)


@dataclass
class StabilizationReport:
    threshold: float
    first_time: float | None
    first_index: int | None
    persistent: bool
    gap_history: list[float]
    monotonicity_violation: float
    max_barrier_excess: float


def sandpile_simulate(
    scenario: SandpileScenario,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
) -> tuple[TimeSeriesSolution, StabilizationReport]:
    """Run the growth problem and detect finite-time stabilization against
    the cone k * d(., boundary)."""
    grid = scenario.grid
    if scenario.constraint_eps is not None:
        op = SandpileGeps(scenario.k, scenario.constraint_eps, scenario.u0)
        problem = ParabolicProblem(
            grid, 2.0, scenario.delta, scenario.f, None, scenario.u0,
            scenario.T, scenario.tau, constraint=op,
        )
        ts = solve_parabolic_qvi(problem, mode="lagged", params=params, tols=tols)
    elif scenario.b is not None:
        problem = TransportProblem(
            grid, 2.0, scenario.delta,
            np.broadcast_to(
                np.asarray(scenario.b, dtype=float), grid.shape + (grid.dim,)
            ).copy(),
            None, scenario.f, BoundField.constant(grid, scenario.k),
            scenario.u0, scenario.T, scenario.tau,
        )
        ts = solve_transport_vi(problem, params=params, tols=tols)
    else:
        problem = ParabolicProblem(
            grid, 2.0, scenario.delta, scenario.f,
            BoundField.constant(grid, scenario.k),
            scenario.u0, scenario.T, scenario.tau,
        )
        ts = solve_parabolic_vi(problem, params=params, tols=tols)
    cone = scenario.k * weighted_distance(
        BoundField.constant(grid, 1.0), grid
    ).values
    threshold = scenario.stabilization_threshold
    gaps = [float(np.max(np.abs(u - cone))) for u in ts.snapshots]
    first_index = None
    for i, g in enumerate(gaps):
        if g <= threshold:
            first_index = i
            break
    persistent = first_index is not None and all(
        g <= threshold for g in gaps[first_index:]
    )
    barrier_excess = max(float(np.max(u - cone)) for u in ts.snapshots)
    report = StabilizationReport(
        threshold=threshold,
        first_time=float(ts.times[first_index]) if first_index is not None else None,
        first_index=first_index,
        persistent=persistent,
        gap_history=gaps,
        monotonicity_violation=ts.monotonicity_violation(),
        max_barrier_excess=barrier_excess,
    )
    return ts, report


def sandpile_stationary(
    u0: np.ndarray,
    source_mask: np.ndarray,
    k: float,
    grid: Grid,
    stencil: int = 16,
) -> np.ndarray:
    """Stationary pile u0 v u_f with the cone formula
    u_f(x) = max over source nodes y of (k d(y) - k |x - y|)+.

    Stated for unit repose slope; the k scaling is the natural homogeneity.
    """
    u0 = np.asarray(u0, dtype=float)
    mask = np.asarray(source_mask, dtype=bool)
    if mask.shape != grid.shape:
        raise ValueError("source mask must be a node mask")
    if not mask.any():
        return u0.copy()
    d = weighted_distance(BoundField.constant(grid, 1.0), grid, stencil=stencil).values
    coords = grid.node_coords()
    pts = np.stack([c.ravel() for c in coords], axis=1)
    src = pts[mask.ravel()]
    d_src = d[mask]
    u_f = np.zeros(pts.shape[0])
    # desk scale: all-pairs distances between nodes and source nodes
    for chunk in range(0, src.shape[0], 256):
        sc = src[chunk:chunk + 256]
        dc = d_src.ravel()[chunk:chunk + 256]
        dist = np.sqrt(
            np.sum((pts[:, None, :] - sc[None, :, :]) ** 2, axis=2)
        )
        u_f = np.maximum(u_f, np.max(k * dc[None, :] - k * dist, axis=1))
    u_f = np.maximum(u_f, 0.0).reshape(grid.shape)
    return np.maximum(u0, u_f)


@dataclass
class TorsionReport:
    solution: EllipticSolution
    obstacle_solution: EllipticSolution
    plastic_by_gradient: np.ndarray  # node mask
    plastic_by_contact: np.ndarray  # node mask
    symmetric_difference_fraction: float
    obstacle_gap: float
    free_boundary_1d: float | None
    grad_tol: float
    contact_tol: float


def torsion_demo(
    beta: float,
    grid: Grid,
    delta: float = 1.0,
    params: PenaltyParams | None = None,
    tols: Tolerances | None = None,
    grad_tol: float | None = None,
    contact_tol: float | None = None,
) -> TorsionReport:
    """Elastic-plastic torsion: g = 1, f = beta, p = 2.

    The plastic set is extracted both from the gradient threshold
    (|grad u| >= 1 - tol) and from contact with the extremal obstacle (the
    paper's identity chain, stated for f < 0; for beta > 0 the symmetric
    solution -u contacts the upper obstacle instead, which is what is
    checked here).
    """
    if beta == 0:
        raise ValueError("beta must be nonzero")
    g = BoundField.constant(grid, 1.0)
    f = float(beta) * np.ones(grid.shape)
    problem = EllipticProblem(grid, 2.0, delta, f, g)
    sol = solve_vi(problem, params=params, tols=tols)
    upper, lower = obstacles(g, grid)
    sol_ob = solve_double_obstacle(2.0, delta, f, upper, lower, grid)
    h = max(grid.h)
    gtol = grad_tol if grad_tol is not None else 3.0 * h
    ctol = contact_tol if contact_tol is not None else 2.5 * h * h
    s_node = grid.cell_to_node(cell_norms(gradient(sol.u, grid)))
    plastic_grad = s_node >= 1.0 - gtol
    contact = upper if beta > 0 else lower
    plastic_contact = np.abs(sol.u - contact) <= ctol
    interior = ~grid.boundary_mask
    sym_diff = float(
        np.sum((plastic_grad ^ plastic_contact) & interior) / max(np.sum(interior), 1)
    )
    fb = None
    if grid.dim == 1:
        x = grid.axes[0]
        inside = plastic_grad & interior
        if inside.any():
            fb = float(np.min(np.abs(x[inside])))
    return TorsionReport(
        solution=sol,
        obstacle_solution=sol_ob,
        plastic_by_gradient=plastic_grad,
        plastic_by_contact=plastic_contact,
        symmetric_difference_fraction=sym_diff,
        obstacle_gap=float(np.max(np.abs(sol.u - sol_ob.u))),
        free_boundary_1d=fb,
        grad_tol=gtol,
        contact_tol=ctol,
    )
