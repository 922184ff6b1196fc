"""Uniform tensor grids and the discrete differential calculus.

Conventions used throughout the package:

* node (scalar) fields are arrays of shape ``grid.shape``;
* cell (vector) fields are arrays of shape ``grid.cell_shape + (grid.dim,)``,
  one forward-difference vector per cell, anchored at the cell's lower-left
  node;
* all problems are posed with homogeneous Dirichlet values, so node fields
  vanish on the boundary layer and the summation-by-parts identity
  ``<grad u, q>_cells = -<u, div q>_nodes`` is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_SEED = 20240901

_JACOBIAN_FLOOR = 1e-14  # additive floor under |q|^2 inside flux Jacobians


@dataclass(frozen=True)
class Grid:
    """Uniform 1D interval or 2D rectangle grid.

    ``extents`` is one ``(lo, hi)`` pair per axis and ``shape`` the node
    count per axis (>= 3 so the interior is nonempty).
    """

    extents: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.extents) not in (1, 2) or len(self.extents) != len(self.shape):
            raise ValueError("grid must be 1D or 2D with matching extents/shape")
        for (lo, hi), n in zip(self.extents, self.shape):
            if not hi > lo:
                raise ValueError(f"empty extent ({lo}, {hi})")
            if n < 3:
                raise ValueError("need at least 3 nodes per axis")

    @staticmethod
    def interval(lo: float, hi: float, n: int) -> "Grid":
        return Grid(((float(lo), float(hi)),), (int(n),))

    @staticmethod
    def box(xext, yext, nx: int, ny: int) -> "Grid":
        return Grid(
            ((float(xext[0]), float(xext[1])), (float(yext[0]), float(yext[1]))),
            (int(nx), int(ny)),
        )

    @property
    def dim(self) -> int:
        return len(self.shape)

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n - 1) for (lo, hi), n in zip(self.extents, self.shape)
        )

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return tuple(n - 1 for n in self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cell_shape))

    @property
    def cell_weight(self) -> float:
        """Quadrature weight h1*...*hd of one cell (also used per node)."""
        return float(np.prod(self.h))

    @property
    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.extents]))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.linspace(lo, hi, n) for (lo, hi), n in zip(self.extents, self.shape)
        )

    def node_coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``grid.shape`` (meshgrid, ij indexing)."""
        if self.dim == 1:
            return (self.axes[0].copy(),)
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    def cell_centers(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays of shape ``grid.cell_shape`` at cell midpoints."""
        mids = tuple(0.5 * (ax[1:] + ax[:-1]) for ax in self.axes)
        if self.dim == 1:
            return (mids[0].copy(),)
        return tuple(np.meshgrid(*mids, indexing="ij"))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    @cached_property
    def interior_flat(self) -> np.ndarray:
        """Flat indices (C order) of interior nodes."""
        return np.flatnonzero(~self.boundary_mask.ravel())

    @property
    def n_interior(self) -> int:
        return self.interior_flat.size

    @cached_property
    def gradient_matrix(self) -> sp.csr_matrix:
        """Sparse forward-difference map, all nodes -> flattened cell components.

        Row ordering is ``cell_flat * dim + component``.
        """
        n = self.n_nodes
        rows, cols, vals = [], [], []
        node_idx = np.arange(n).reshape(self.shape)
        if self.dim == 1:
            (h,) = self.h
            nc = self.cell_shape[0]
            c = np.arange(nc)
            rows.extend([c, c])
            cols.extend([node_idx[1:], node_idx[:-1]])
            vals.extend([np.full(nc, 1.0 / h), np.full(nc, -1.0 / h)])
        else:
            hx, hy = self.h
            ncx, ncy = self.cell_shape
            cflat = np.arange(ncx * ncy).reshape(ncx, ncy)
            ll = node_idx[:-1, :-1]
            right = node_idx[1:, :-1]
            up = node_idx[:-1, 1:]
            rows.extend([2 * cflat, 2 * cflat, 2 * cflat + 1, 2 * cflat + 1])
            cols.extend([right, ll, up, ll])
            vals.extend(
                [
                    np.full((ncx, ncy), 1.0 / hx),
                    np.full((ncx, ncy), -1.0 / hx),
                    np.full((ncx, ncy), 1.0 / hy),
                    np.full((ncx, ncy), -1.0 / hy),
                ]
            )
        rows = np.concatenate([r.ravel() for r in rows])
        cols = np.concatenate([c.ravel() for c in cols])
        vals = np.concatenate([v.ravel() for v in vals])
        m = sp.coo_matrix(
            (vals, (rows, cols)), shape=(self.n_cells * self.dim, n)
        )
        return m.tocsr()

    @cached_property
    def interior_gradient_matrix(self) -> sp.csr_matrix:
        """Gradient restricted to interior DOFs (boundary values are zero)."""
        return self.gradient_matrix[:, self.interior_flat].tocsr()

    @cached_property
    def dirichlet_laplacian(self) -> sp.csr_matrix:
        """Scaled stiffness matrix D^T D on interior nodes (acts like -Lap_h)."""
        d = self.interior_gradient_matrix
        return (d.T @ d).tocsr()

    def embed(self, v: np.ndarray) -> np.ndarray:
        """Interior DOF vector -> full node field with zero boundary."""
        full = np.zeros(self.n_nodes)
        full[self.interior_flat] = v
        return full.reshape(self.shape)

    def restrict(self, u: np.ndarray) -> np.ndarray:
        """Full node field -> interior DOF vector."""
        return np.asarray(u).ravel()[self.interior_flat]

    def node_to_cell(self, u: np.ndarray) -> np.ndarray:
        """Average node values to cells (mean over the cell's corner nodes)."""
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise ValueError("node field shape mismatch")
        if self.dim == 1:
            return 0.5 * (u[1:] + u[:-1])
        return 0.25 * (u[:-1, :-1] + u[1:, :-1] + u[:-1, 1:] + u[1:, 1:])

    def cell_to_node(self, c: np.ndarray) -> np.ndarray:
        """Average cell values to nodes (mean over adjacent cells)."""
        c = np.asarray(c, dtype=float)
        if c.shape != self.cell_shape:
            raise ValueError("cell field shape mismatch")
        acc = np.zeros(self.shape)
        cnt = np.zeros(self.shape)
        if self.dim == 1:
            acc[1:] += c
            acc[:-1] += c
            cnt[1:] += 1
            cnt[:-1] += 1
        else:
            for sx in (slice(None, -1), slice(1, None)):
                for sy in (slice(None, -1), slice(1, None)):
                    acc[sx, sy] += c
                    cnt[sx, sy] += 1
        return acc / cnt


def gradient(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Forward-difference gradient, one d-vector per cell."""
    u = np.asarray(u, dtype=float)
    if u.shape != grid.shape:
        raise ValueError(f"field shape {u.shape} does not match grid {grid.shape}")
    if grid.dim == 1:
        (h,) = grid.h
        return ((u[1:] - u[:-1]) / h)[:, None]
    hx, hy = grid.h
    q = np.empty(grid.cell_shape + (2,))
    q[..., 0] = (u[1:, :-1] - u[:-1, :-1]) / hx
    q[..., 1] = (u[:-1, 1:] - u[:-1, :-1]) / hy
    return q


def divergence(q: np.ndarray, grid: Grid) -> np.ndarray:
    """Negative adjoint of :func:`gradient`; zero on boundary nodes.

    Satisfies ``<grad u, q>_cells + <u, div q>_nodes = 0`` exactly for any
    node field u vanishing on the boundary.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != grid.cell_shape + (grid.dim,):
        raise ValueError(f"cell field shape {q.shape} does not match grid")
    out = np.zeros(grid.shape)
    if grid.dim == 1:
        (h,) = grid.h
        out[1:-1] = (q[1:, 0] - q[:-1, 0]) / h
        return out
    hx, hy = grid.h
    out[1:-1, 1:-1] = (q[1:, 1:, 0] - q[:-1, 1:, 0]) / hx + (
        q[1:, 1:, 1] - q[1:, :-1, 1]
    ) / hy
    return out


def cell_norms(q: np.ndarray) -> np.ndarray:
    """Euclidean norm of the per-cell vectors."""
    return np.linalg.norm(q, axis=-1)


def p_flux(q: np.ndarray, p: float) -> np.ndarray:
    """|q|^(p-2) q per cell, with the value 0 at q = 0 for every p > 1."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    q = np.asarray(q, dtype=float)
    s = cell_norms(q)
    safe = np.where(s > 0, s, 1.0)
    return (np.where(s > 0, safe ** (p - 2.0), 0.0))[..., None] * q


def field_norm(field: np.ndarray, p: float, grid: Grid) -> float:
    """L^p norm via Riemann sums with cell weights; p = inf gives the max.

    Node fields are averaged to cells first (so constants integrate exactly
    to the domain measure); cell scalar and cell vector fields are summed
    directly, the latter through their Euclidean cell norms.
    """
    field = np.asarray(field, dtype=float)
    if field.shape == grid.shape:
        vals = grid.node_to_cell(field) if not np.isinf(p) else field
    elif field.shape == grid.cell_shape:
        vals = field
    elif field.shape == grid.cell_shape + (grid.dim,):
        vals = cell_norms(field)
    else:
        raise ValueError("field shape matches neither nodes nor cells")
    if np.isinf(p):
        return float(np.max(np.abs(vals))) if vals.size else 0.0
    if p < 1:
        raise ValueError("p must be >= 1")
    return float((grid.cell_weight * np.sum(np.abs(vals) ** p)) ** (1.0 / p))


def inner_nodes(u: np.ndarray, v: np.ndarray, grid: Grid) -> float:
    """Weighted node inner product h1*...*hd * sum(u v)."""
    return float(grid.cell_weight * np.sum(np.asarray(u) * np.asarray(v)))


def inner_cells(q: np.ndarray, r: np.ndarray, grid: Grid) -> float:
    """Weighted cell inner product over all components."""
    return float(grid.cell_weight * np.sum(np.asarray(q) * np.asarray(r)))


def poincare_constant(
    grid: Grid, p: float, seed: int = DEFAULT_SEED, n_random: int = 8
) -> float:
    """Discrete constant c_p with ||w||_p <= c_p ||grad w||_p on the grid.

    For p = 2 this is exact (on the grid): the reciprocal square root of the
    smallest eigenvalue of the discrete Dirichlet Laplacian, found by inverse
    iteration.  For p != 2 a Rayleigh-type lower estimate is returned, taking
    the best ratio over a fixed candidate family (p=2 eigenfunction, the
    boundary distance field, seeded smoothed noise).
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    lam, vec = _smallest_laplacian_eig(grid)
    if p == 2:
        return 1.0 / np.sqrt(lam)
    candidates = [grid.embed(vec)]
    from .geodesic import weighted_distance
    from .constraints import BoundField

    ones = BoundField(np.ones(grid.cell_shape), nu=1.0)
    candidates.append(weighted_distance(ones, grid).values)
    rng = np.random.default_rng(seed)
    lap = grid.dirichlet_laplacian
    diag = lap.diagonal()
    for _ in range(n_random):
        v = rng.standard_normal(grid.n_interior)
        for _ in range(10):  # damped Jacobi smoothing
            v = v - 0.6 * (lap @ v) / diag
        candidates.append(grid.embed(v))
    best = 0.0
    for w in candidates:
        denom = field_norm(gradient(w, grid), p, grid)
        if denom > 0:
            best = max(best, field_norm(w, p, grid) / denom)
    return best


def _smallest_laplacian_eig(grid: Grid) -> tuple[float, np.ndarray]:
    """Smallest eigenpair of D^T D / weight ~ -Lap_h by inverse iteration."""
    lap = grid.dirichlet_laplacian.tocsc()
    lu = spla.splu(lap)
    v = np.ones(grid.n_interior)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(200):
        w = lu.solve(v)
        w /= np.linalg.norm(w)
        lam_new = float(w @ (lap @ w))
        if abs(lam_new - lam) <= 1e-14 * max(lam_new, 1.0):
            lam = lam_new
            v = w
            break
        lam, v = lam_new, w
    return lam, v


def monotonicity_constant(
    p: float, samples: int, seed: int = DEFAULT_SEED, dim: int = 2
) -> float:
    """Sampled lower estimate of the strong monotonicity constant d_p.

    Exactly 1 for p = 2.  Otherwise the minimum over seeded random vector
    pairs (a, b) of ``(p_flux(a) - p_flux(b)) . (a - b)`` divided by
    ``|a - b|^p`` when p >= 2, or by ``(|a| + |b|)^(p-2) |a - b|^2`` when
    p < 2.  Degenerate pairs (a = b) are skipped.
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    if samples < 1:
        raise ValueError("need at least one sample")
    if p == 2:
        return 1.0
    rng = np.random.default_rng(seed)
    best = np.inf
    chunk = 200_000
    remaining = samples
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        scale_a = 10.0 ** rng.uniform(-2, 1, size=(n, 1))
        scale_b = 10.0 ** rng.uniform(-2, 1, size=(n, 1))
        a = rng.standard_normal((n, dim)) * scale_a
        b = rng.standard_normal((n, dim)) * scale_b
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        diff = a - b
        nd = np.linalg.norm(diff, axis=1)
        keep = nd > 1e-12
        if not np.any(keep):
            continue
        a, b, na, nb, diff, nd = (
            a[keep],
            b[keep],
            na[keep],
            nb[keep],
            diff[keep],
            nd[keep],
        )
        fa = np.where(na > 0, na ** (p - 2.0), 0.0)[:, None] * a
        fb = np.where(nb > 0, nb ** (p - 2.0), 0.0)[:, None] * b
        num = np.sum((fa - fb) * diff, axis=1)
        if p >= 2:
            ratio = num / nd**p
        else:
            ratio = num / ((na + nb) ** (p - 2.0) * nd**2)
        best = min(best, float(np.min(ratio)))
    return best


@dataclass(frozen=True)
class ConstantsReport:
    """Discrete constants consumed by the contraction certificates."""

    p: float
    c_p: float
    c_p_method: str
    d_p: float
    d_p_method: str
    omega_p: float

    def __post_init__(self):
        if self.c_p <= 0:
            raise ValueError("c_p must be positive")
        if not 0 < self.d_p <= 1:
            raise ValueError("d_p must lie in (0, 1]")


def constants_report(
    grid: Grid,
    p: float,
    samples: int = 200_000,
    seed: int = DEFAULT_SEED,
    d_p_override: float | None = None,
) -> ConstantsReport:
    """Bundle c_p, d_p and omega_p = |Omega|^((2-p)/(2p)) with method tags."""
    c_p = poincare_constant(grid, p, seed=seed)
    c_method = "inverse-iteration eigenvalue" if p == 2 else "rayleigh estimate"
    if d_p_override is not None:
        d_p, d_method = float(d_p_override), "user override"
    elif p == 2:
        d_p, d_method = 1.0, "exact (p=2)"
    else:
        d_p, d_method = monotonicity_constant(p, samples, seed=seed), "sampled"
    omega_p = grid.measure ** ((2.0 - p) / (2.0 * p))
    return ConstantsReport(
        p=p, c_p=c_p, c_p_method=c_method, d_p=d_p, d_p_method=d_method,
        omega_p=omega_p,
    )
