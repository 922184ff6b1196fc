"""Gradient-bound fields, constraint operators, and the exponential penalty."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Grid, gradient, cell_norms, field_norm, inner_cells

_EXP_CAP = 700.0  # exponent clamp keeping exp() inside float64 range


@dataclass(frozen=True)
class BoundField:
    """Cellwise gradient bound g with certified lower bound nu > 0."""

    values: np.ndarray
    nu: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if not np.all(np.isfinite(vals)):
            raise ValueError("bound field must be finite")
        if not self.nu > 0:
            raise ValueError("lower-bound witness nu must be positive")
        if np.min(vals) < self.nu - 1e-15 * max(1.0, self.nu):
            raise ValueError("bound field drops below its witness nu")

    @property
    def sup(self) -> float:
        return float(np.max(self.values))

    @staticmethod
    def constant(grid: Grid, k: float) -> "BoundField":
        if k <= 0:
            raise ValueError("constant bound must be positive")
        return BoundField(np.full(grid.cell_shape, float(k)), nu=float(k))

    @staticmethod
    def from_values(values: np.ndarray, nu: float | None = None) -> "BoundField":
        values = np.asarray(values, dtype=float)
        if nu is None:
            nu = float(np.min(values))
        return BoundField(values, nu=nu)

    @staticmethod
    def from_function(grid: Grid, fn, nu: float | None = None) -> "BoundField":
        """Sample ``fn(*cell_center_coords)`` on the cell centers."""
        coords = grid.cell_centers()
        values = np.asarray(fn(*coords), dtype=float)
        values = np.broadcast_to(values, grid.cell_shape).copy()
        return BoundField.from_values(values, nu=nu)


@dataclass(frozen=True)
class PenaltyParams:
    """Penalty strength and the continuation schedule of decreasing eps."""

    eps: float = 1e-6
    schedule: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        sched = tuple(float(e) for e in self.schedule)
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("schedule must be strictly decreasing")
        object.__setattr__(self, "schedule", sched)

    def with_final(self, eps_final: float) -> "PenaltyParams":
        sched = tuple(e for e in self.schedule if e > eps_final) + (eps_final,)
        return PenaltyParams(eps=eps_final, schedule=sched)


def penalty(s, params: PenaltyParams | float):
    """Exponential penalty: 0 for s <= 0, exp(s/eps)-1 up to s = 1/eps, then
    capped at exp(1/eps^2)-1.  Continuous and nondecreasing.

    Exponents are clamped at 700 so the cap stays representable in float64;
    on the representable range the branches are exact.
    """
    eps = params.eps if isinstance(params, PenaltyParams) else float(params)
    s = np.asarray(s, dtype=float)
    arg = np.minimum(np.clip(s, 0.0, 1.0 / eps) / eps, _EXP_CAP)
    out = np.expm1(arg)
    return out if out.ndim else float(out)


def penalty_derivative(s, params: PenaltyParams | float):
    """A.e. derivative of :func:`penalty` with one-sided values at the kinks:
    right derivative at 0 (= 1/eps), left derivative at 1/eps."""
    eps = params.eps if isinstance(params, PenaltyParams) else float(params)
    s = np.asarray(s, dtype=float)
    inside = (s >= 0.0) & (s <= 1.0 / eps)
    arg = np.minimum(np.where(inside, s, 0.0) / eps, _EXP_CAP)
    out = np.where(inside, np.exp(arg) / eps, 0.0)
    return out if out.ndim else float(out)


def violation(
    u: np.ndarray, g: BoundField, grid: Grid, tol: float = 1e-10
) -> tuple[float, float]:
    """Max cell excess (|grad u| - g)+ and the fraction of cells beyond tol."""
    excess = cell_norms(gradient(u, grid)) - g.values
    mx = float(max(np.max(excess), 0.0)) if excess.size else 0.0
    frac = float(np.mean(excess > tol)) if excess.size else 0.0
    return mx, frac


def scale_to_feasible(
    u: np.ndarray,
    grid: Grid,
    nu: float,
    beta: float,
    g_target: BoundField | None = None,
) -> np.ndarray:
    """Shrink u by nu/(nu+beta); feasible for any bound >= nu afterwards.

    Requires |grad u| <= nu + beta cellwise (checked).
    """
    if nu <= 0 or beta < 0:
        raise ValueError("need nu > 0 and beta >= 0")
    s = cell_norms(gradient(u, grid))
    if s.size and np.max(s) > nu + beta + 1e-12 * (nu + beta):
        raise ValueError("input exceeds the nu + beta slope budget")
    scaled = (nu / (nu + beta)) * np.asarray(u, dtype=float)
    if g_target is not None:
        mx, _ = violation(scaled, g_target, grid)
        if mx > 1e-12 * max(1.0, g_target.sup):
            raise ValueError("scaled field still violates the target bound")
    return scaled


class ConstraintOperator:
    """Base of the catalog of maps u -> bound field G[u]."""

    #: positive lower bound guaranteed for every output
    nu: float
    #: discontinuous operators are admitted only in explicit experiments
    discontinuous: bool = False

    def evaluate(self, u: np.ndarray, grid: Grid) -> BoundField:
        raise NotImplementedError

    def __call__(self, u: np.ndarray, grid: Grid) -> BoundField:
        bound = self.evaluate(u, grid)
        if np.min(bound.values) < self.nu - 1e-12 * max(1.0, self.nu):
            raise ValueError("constraint operator produced a bound below nu")
        return bound


@dataclass
class ConstantBound(ConstraintOperator):
    """G[u] = k, independent of u."""

    k: float

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("constant bound must be positive")
        self.nu = float(self.k)

    def evaluate(self, u, grid):
        return BoundField.constant(grid, self.k)


@dataclass
class NemytskiiBound(ConstraintOperator):
    """G[u](x) = F(x, u(x)) with F >= nu; F is evaluated at cell centers
    against the corner-averaged u."""

    fn: Callable
    nu: float

    def evaluate(self, u, grid):
        coords = grid.cell_centers()
        uc = grid.node_to_cell(np.asarray(u, dtype=float))
        vals = np.broadcast_to(
            np.asarray(self.fn(*coords, uc), dtype=float), grid.cell_shape
        ).copy()
        return BoundField(vals, nu=self.nu)


@dataclass
class KernelBound(ConstraintOperator):
    """G[u](x) = F(x, integral of K(x, .) . grad u); K is a dense table over
    node x cell-component pairs, evaluated in one pass and averaged to cells."""

    fn: Callable  # (coords..., w) -> bound values at nodes
    kernel: np.ndarray  # (n_nodes, n_cells * dim)
    nu: float

    def evaluate(self, u, grid):
        k = np.asarray(self.kernel, dtype=float)
        if k.shape != (grid.n_nodes, grid.n_cells * grid.dim):
            raise ValueError("kernel table shape mismatch")
        q = gradient(np.asarray(u, dtype=float), grid).ravel()
        w = (k @ q) * grid.cell_weight
        coords = grid.node_coords()
        node_vals = np.broadcast_to(
            np.asarray(self.fn(*coords, w.reshape(grid.shape)), dtype=float),
            grid.shape,
        )
        return BoundField(grid.node_to_cell(node_vals), nu=self.nu)


@dataclass(frozen=True)
class NonlocalFunctional:
    """Scalar functional gamma with its declared certificate constants.

    ``eta``, ``bound_m`` and ``lip_gamma`` are the monotone functions
    eta(R) <= gamma <= M(R) and |gamma(u1) - gamma(u2)| <= Gamma(R) ||u1 - u2||
    on the ball of radius R in the declared norm ("Xp" here; evolution
    functionals live in gradvi.evolution).
    """

    value: Callable[[np.ndarray, Grid], float]
    eta: Callable[[float], float]
    bound_m: Callable[[float], float]
    lip_gamma: Callable[[float], float]
    norm: str = "Xp"
    label: str = "custom"


def gradient_energy_functional(eta0: float, delta0: float) -> NonlocalFunctional:
    """gamma(u) = eta0 + delta0 * ||grad u||_2^2 with its exact X_2 constants:
    eta(R) = eta0, M(R) = eta0 + delta0 R^2, Gamma(R) = 2 delta0 R (from the
    difference-of-squares bound).  Registered for p = 2.
    """
    if eta0 <= 0 or delta0 < 0:
        raise ValueError("need eta0 > 0 and delta0 >= 0")

    def value(u, grid):
        q = gradient(u, grid)
        return eta0 + delta0 * inner_cells(q, q, grid)

    return NonlocalFunctional(
        value=value,
        eta=lambda R: eta0,
        bound_m=lambda R: eta0 + delta0 * R * R,
        lip_gamma=lambda R: 2.0 * delta0 * R,
        norm="Xp",
        label=f"gradient-energy(eta0={eta0}, delta0={delta0})",
    )


@dataclass
class SeparatedNonlocal(ConstraintOperator):
    """G[u](x) = gamma(u) * phi(x) with a declared-Lipschitz gamma."""

    gamma: NonlocalFunctional
    phi: BoundField

    def __post_init__(self):
        # nu of the output: eta(R) is only known per-R; use gamma >= eta(0+)
        self.nu = float(self.gamma.eta(0.0) * self.phi.nu)

    def evaluate(self, u, grid):
        scale = float(self.gamma.value(np.asarray(u, dtype=float), grid))
        if scale <= 0:
            raise ValueError("gamma produced a nonpositive scale")
        return BoundField(scale * self.phi.values, nu=scale * self.phi.nu)


@dataclass
class SandpileG0(ConstraintOperator):
    """Discontinuous sandpile bound: k above the support, k v |grad u0| on or
    below it.  Only admitted in explicit application experiments."""

    k: float
    u0: np.ndarray  # support surface, node field

    discontinuous = True

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("repose slope k must be positive")
        self.nu = float(self.k)

    def evaluate(self, u, grid):
        u0 = np.asarray(self.u0, dtype=float)
        uc = grid.node_to_cell(np.asarray(u, dtype=float))
        u0c = grid.node_to_cell(u0)
        slope0 = cell_norms(gradient(u0, grid))
        vals = np.where(uc > u0c, self.k, np.maximum(self.k, slope0))
        return BoundField(vals, nu=self.nu)


@dataclass
class SandpileGeps(ConstraintOperator):
    """Continuous regularization of :class:`SandpileG0`: k above u_eps + eps,
    a linear interpolation on [u_eps, u_eps + eps), and k v |grad u_eps|
    strictly below the regularized support u_eps."""

    k: float
    eps: float
    u_eps: np.ndarray  # regularized support, node field

    def __post_init__(self):
        if self.k <= 0 or self.eps <= 0:
            raise ValueError("need k > 0 and eps > 0")
        self.nu = float(self.k)

    def evaluate(self, u, grid):
        ue = np.asarray(self.u_eps, dtype=float)
        uc = grid.node_to_cell(np.asarray(u, dtype=float))
        uec = grid.node_to_cell(ue)
        k_eps = np.maximum(self.k, cell_norms(gradient(ue, grid)))
        t = np.clip((uc - uec) / self.eps, 0.0, 1.0)
        mid = k_eps + (self.k - k_eps) * t
        vals = np.where(uc >= uec + self.eps, self.k, np.where(uc < uec, k_eps, mid))
        return BoundField(vals, nu=self.nu)


def evaluate_constraint(
    G: ConstraintOperator,
    u: np.ndarray,
    grid: Grid,
    allow_discontinuous: bool = False,
) -> BoundField:
    """Apply a constraint operator; discontinuous variants must be opted into
    (they are reserved for the explicit sandpile experiments)."""
    if G.discontinuous and not allow_discontinuous:
        raise ValueError(
            "discontinuous constraint operators are only admitted in "
            "application experiments"
        )
    return G(u, grid)


def perturbation_diagnostic(
    G: ConstraintOperator,
    u: np.ndarray,
    grid: Grid,
    p: float = 2.0,
    n_pairs: int = 8,
    magnitude: float = 1e-3,
    seed: int = 0,
) -> float:
    """Empirical Lipschitz ratio max ||G[u+du]-G[u]||_inf / ||du||_W1p over
    seeded perturbations.  Diagnostic only; no certified constant."""
    rng = np.random.default_rng(seed)
    base = evaluate_constraint(G, u, grid, allow_discontinuous=True).values
    worst = 0.0
    for _ in range(n_pairs):
        du = np.zeros(grid.shape)
        noise = rng.standard_normal(grid.n_interior)
        du.ravel()[grid.interior_flat] = noise
        du *= magnitude / max(np.max(np.abs(du)), 1e-30)
        pert = evaluate_constraint(G, u + du, grid, allow_discontinuous=True).values
        dnorm = field_norm(du, p, grid) + field_norm(gradient(du, grid), p, grid)
        if dnorm > 0:
            worst = max(worst, float(np.max(np.abs(pert - base))) / dnorm)
    return worst
