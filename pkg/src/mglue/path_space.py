"""Discrete W^{1,2} path spaces on uniform grids.

Paths live on [t_min, t_max] with an odd number of uniformly spaced nodes
(so that s = 0 is a node whenever the interval is symmetric).  All operations
are pure; Grid and DiscretePath instances are treated as immutable values.
"""

from dataclasses import dataclass
from math import ceil

import numpy as np
from scipy.interpolate import CubicSpline


@dataclass(frozen=True)
class Grid:
    t_min: float
    t_max: float
    n_nodes: int

    def __post_init__(self):
        if not self.t_min < self.t_max:
            raise ValueError("need t_min < t_max")
        if self.n_nodes < 9:
            raise ValueError("need at least 9 nodes")
        if self.n_nodes % 2 == 0:
            raise ValueError("n_nodes must be odd")

    @property
    def h(self):
        return (self.t_max - self.t_min) / (self.n_nodes - 1)

    @property
    def nodes(self):
        return self.t_min + self.h * np.arange(self.n_nodes)

    @property
    def span(self):
        return self.t_max - self.t_min


def make_grid(t_min, t_max, h_max=0.02):
    """Uniform grid with spacing h = 1/m <= h_max so that integer breakpoints
    (in particular +-1, +-3) land on nodes whenever the endpoints are
    multiples of 1/m.  Endpoints must be (near-)multiples of the unit 1/m."""
    m = ceil(1.0 / h_max - 1e-12)
    h = 1.0 / m
    lo = round(t_min * m)
    hi = round(t_max * m)
    if abs(lo / m - t_min) > h / 2 or abs(hi / m - t_max) > h / 2:
        raise ValueError("endpoints not resolvable at spacing 1/%d" % m)
    n = hi - lo + 1
    if n % 2 == 0:
        raise ValueError("endpoints give an even node count at spacing 1/%d" % m)
    return Grid(lo / m, hi / m, n)


def symmetric_grid(T, h_max=0.02):
    """Grid on [-T, T] resolving 0, +-1, +-3 as nodes."""
    return make_grid(-T, T, h_max)


@dataclass(frozen=True)
class DiscretePath:
    grid: Grid
    samples: np.ndarray  # shape (n_nodes, dim)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.grid.n_nodes:
            raise ValueError("sample count does not match grid")
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def dim(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class PathNorms:
    l2: float
    w12: float
    sup: float


def zero_path(grid, dim):
    return DiscretePath(grid, np.zeros((grid.n_nodes, dim)))


def path_from_function(grid, fn, dim=None):
    """Sample a vector-valued callable fn(s) -> R^dim at the grid nodes."""
    vals = np.array([np.atleast_1d(fn(s)) for s in grid.nodes], dtype=float)
    if dim is not None and vals.shape[1] != dim:
        raise ValueError("function dimension mismatch")
    return DiscretePath(grid, vals)


def diff_matrix(grid):
    """Sparse second-order differentiation matrix acting on each component.

    Central differences at interior nodes, second-order one-sided stencils at
    the two endpoints.  Returned as a dense banded-structure array of stencil
    rows is avoided; we build a scipy sparse matrix once per grid size."""
    from scipy.sparse import lil_matrix

    n = grid.n_nodes
    h = grid.h
    M = lil_matrix((n, n))
    M[0, 0], M[0, 1], M[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    for j in range(1, n - 1):
        M[j, j - 1] = -0.5 / h
        M[j, j + 1] = 0.5 / h
    M[n - 1, n - 3], M[n - 1, n - 2], M[n - 1, n - 1] = 0.5 / h, -2.0 / h, 1.5 / h
    return M.tocsr()


def differentiate(p):
    """d/ds by second-order stencils (central inside, one-sided at the ends)."""
    if p.grid.n_nodes < 3:
        raise ValueError("grid too small to differentiate")
    w = p.samples
    h = p.grid.h
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - w[:-2]) / (2.0 * h)
    out[0] = (-1.5 * w[0] + 2.0 * w[1] - 0.5 * w[2]) / h
    out[-1] = (1.5 * w[-1] - 2.0 * w[-2] + 0.5 * w[-3]) / h
    return DiscretePath(p.grid, out)


def _trapz_sq(samples, h):
    sq = np.sum(samples * samples, axis=1)
    return h * (np.sum(sq) - 0.5 * (sq[0] + sq[-1]))


def trapezoid_weights(grid):
    w = np.full(grid.n_nodes, grid.h)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def l2_norm(p):
    return float(np.sqrt(_trapz_sq(p.samples, p.grid.h)))


def sup_norm(p):
    return float(np.max(np.linalg.norm(p.samples, axis=1)))


def norms(p):
    """L2 (trapezoidal), W^{1,2} and nodewise sup norms of a path."""
    l2 = l2_norm(p)
    dl2 = l2_norm(differentiate(p))
    return PathNorms(l2=l2, w12=float(np.hypot(l2, dl2)), sup=sup_norm(p))


def w12_inner(p, q):
    """W^{1,2} inner product by trapezoidal quadrature."""
    wts = trapezoid_weights(p.grid)
    dp = differentiate(p).samples
    dq = differentiate(q).samples
    return float(np.sum(wts * np.sum(p.samples * q.samples + dp * dq, axis=1)))


def evaluate_ends(p):
    """(p(t_min), p(t_max)) — the boundary evaluation map."""
    return p.samples[0].copy(), p.samples[-1].copy()


def resample(p, grid):
    """Cubic interpolation of p at the nodes of a (sub-span) target grid."""
    if grid.t_min < p.grid.t_min - 1e-12 or grid.t_max > p.grid.t_max + 1e-12:
        raise ValueError("target grid outside source span (extrapolation)")
    if (
        grid.n_nodes == p.grid.n_nodes
        and abs(grid.t_min - p.grid.t_min) < 1e-15
        and abs(grid.t_max - p.grid.t_max) < 1e-15
    ):
        return DiscretePath(grid, p.samples.copy())
    spline = CubicSpline(p.grid.nodes, p.samples, axis=0)
    return DiscretePath(grid, spline(np.clip(grid.nodes, p.grid.t_min, p.grid.t_max)))


def path_to_csv(p, fileobj):
    """RFC-4180-style dump: header s,x1,...,xn, 17 significant digits."""
    header = "s," + ",".join("x%d" % (i + 1) for i in range(p.dim))
    fileobj.write(header + "\r\n")
    for s, row in zip(p.grid.nodes, p.samples):
        fileobj.write(
            ",".join("%.17g" % v for v in np.concatenate([[s], row])) + "\r\n"
        )
