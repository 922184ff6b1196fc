"""Weighted distance to the boundary and the extremal obstacle pair.

The distance is exact Dijkstra on the grid graph (2-neighbor stencil in 1D;
4-, 8- or 16-neighbor in 2D), with edge weight = Euclidean edge length times
the trapezoid average of the node-interpolated weight at the two endpoints.
A virtual source tied to every boundary node at zero cost turns the
multi-source problem into a single sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _dijkstra

from .constraints import BoundField
from .grid import Grid

_STENCILS_2D = {
    4: [(1, 0), (0, 1)],
    8: [(1, 0), (0, 1), (1, 1), (1, -1)],
    16: [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (2, -1), (1, 2), (-1, 2)],
}


@dataclass(frozen=True)
class DistanceField:
    """Node distances to the boundary, zero exactly on boundary nodes."""

    values: np.ndarray
    stencil: int
    weight_sup: float

    def __post_init__(self):
        if np.min(self.values) < 0:
            raise ValueError("distances must be nonnegative")


def _node_weights(g: BoundField, grid: Grid) -> np.ndarray:
    w = grid.cell_to_node(g.values)
    if np.min(w) <= 0:
        raise ValueError("non-positive edge weights")
    return w


def weighted_distance(g: BoundField, grid: Grid, stencil: int = 16) -> DistanceField:
    """Shortest-path distance from every node to the boundary node set,
    weighted by the bound field g (interpolated to nodes)."""
    w = _node_weights(g, grid)
    n = grid.n_nodes
    rows, cols, vals = [], [], []

    if grid.dim == 1:
        offsets = [(1,)]
    else:
        if stencil not in _STENCILS_2D:
            raise ValueError("stencil must be one of 4, 8, 16")
        offsets = _STENCILS_2D[stencil]

    idx = np.arange(n).reshape(grid.shape)
    wflat = w
    for off in offsets:
        if grid.dim == 1:
            (dx,) = off
            length = abs(dx) * grid.h[0]
            a = idx[:-dx] if dx > 0 else idx[-dx:]
            b = idx[dx:] if dx > 0 else idx[:dx]
            wa, wb = wflat[:-dx], wflat[dx:]
        else:
            dx, dy = off
            length = float(np.hypot(dx * grid.h[0], dy * grid.h[1]))
            sx_a = slice(None, -dx) if dx > 0 else slice(-dx, None)
            sx_b = slice(dx, None) if dx > 0 else slice(None, dx)
            if dx == 0:
                sx_a = sx_b = slice(None)
            sy_a = slice(None, -dy) if dy > 0 else slice(-dy, None)
            sy_b = slice(dy, None) if dy > 0 else slice(None, dy)
            if dy == 0:
                sy_a = sy_b = slice(None)
            a = idx[sx_a, sy_a]
            b = idx[sx_b, sy_b]
            wa, wb = wflat[sx_a, sy_a], wflat[sx_b, sy_b]
        weight = length * 0.5 * (wa + wb)
        rows.append(a.ravel())
        cols.append(b.ravel())
        vals.append(weight.ravel())

    # virtual super-source (index n) at zero cost to all boundary nodes
    bidx = np.flatnonzero(grid.boundary_mask.ravel())
    rows.append(np.full(bidx.size, n))
    cols.append(bidx)
    vals.append(np.zeros(bidx.size))

    graph = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n + 1, n + 1),
    ).tocsr()
    dist = _dijkstra(graph, directed=False, indices=n)[:n]
    dist = dist.reshape(grid.shape)
    dist[grid.boundary_mask] = 0.0
    return DistanceField(values=dist, stencil=stencil, weight_sup=g.sup)


def obstacles(
    g: BoundField, grid: Grid, stencil: int = 16
) -> tuple[np.ndarray, np.ndarray]:
    """Extremal elements of the gradient-constraint set: the upper obstacle
    d_g(., boundary) and its negative."""
    upper = weighted_distance(g, grid, stencil=stencil).values
    return upper, -upper
