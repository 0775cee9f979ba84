"""Linear analysis at the constant trajectory 0_T on [-T, T].

Provides the operator D: zeta -> d/ds zeta + A zeta, the explicit kernel
parametrization, the projection onto the kernel along the complement K_T
(paths whose stable component vanishes at -T and unstable component at +T),
two right inverses with image in K_T (a componentwise exponential-integrator
Duhamel recursion and an exact sparse solve of the discretized operator),
the infinitesimal gluing map, and measured/analytic norm bounds.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, diags, identity, kron
from scipy.sparse.linalg import splu

from .path_space import (DiscretePath, Grid, diff_matrix, differentiate,
                         symmetric_grid, trapezoid_weights, zero_path)
from .morse_model import compute_constants


@dataclass(frozen=True)
class KernelElement:
    """Kernel coefficients: v_plus at s = -T (stable), v_minus at s = +T."""
    v_plus: np.ndarray
    v_minus: np.ndarray


class LinearTheory:
    """Per-(model, T) bundle of the linear operators and constants."""

    def __init__(self, model, T, h_max=0.02, constants=None):
        if T < 1:
            raise ValueError("need T >= 1")
        self.model = model
        self.T = float(T)
        self.grid = symmetric_grid(T, h_max)
        self.constants = constants if constants is not None \
            else compute_constants(model)
        self._lu = None

    # -- internal: LU factorization of the discretized D with K_T boundary rows
    def _exact_lu(self):
        if self._lu is None:
            self._lu = splu(_d_system_matrix(self).tocsc())
        return self._lu


def _check_grid(lt, p):
    if p.grid.n_nodes != lt.grid.n_nodes or \
            abs(p.grid.t_min - lt.grid.t_min) > 1e-12 or \
            abs(p.grid.t_max - lt.grid.t_max) > 1e-12:
        raise ValueError("path grid does not match the bundle grid")


def apply_D(lt, zeta):
    """d/ds zeta + A zeta, nodewise."""
    _check_grid(lt, zeta)
    dz = differentiate(zeta)
    return DiscretePath(zeta.grid, dz.samples + zeta.samples * lt.model.a)


def kernel_path(lt, ke):
    """Realize kernel coefficients as the explicit exponential path."""
    s = lt.grid.nodes
    m = lt.model
    plus = np.exp(-np.outer(s + lt.T, m.a_plus)) * np.asarray(ke.v_plus)
    minus = np.exp(np.outer(s - lt.T, m.a_minus)) * np.asarray(ke.v_minus)
    return DiscretePath(lt.grid, np.concatenate([plus, minus], axis=1))


def project_E(lt, zeta):
    """Projection onto the kernel along K_T: coefficients are the stable
    boundary value at -T and the unstable boundary value at +T.  Returns
    (KernelElement, remainder); the remainder lies in K_T exactly."""
    _check_grid(lt, zeta)
    m = lt.model
    ke = KernelElement(v_plus=m.p_plus(zeta.samples[0]).copy(),
                       v_minus=m.p_minus(zeta.samples[-1]).copy())
    kp = kernel_path(lt, ke)
    rem = DiscretePath(zeta.grid, zeta.samples - kp.samples)
    return ke, rem


def apply_Q(lt, eta):
    """Right inverse by componentwise Duhamel recursion.

    Stable components integrate forward from -T with zero initial value,
    unstable components backward from +T; the in-kernel local integral uses
    the trapezoidal rule.  The image lies in K_T exactly."""
    _check_grid(lt, eta)
    m = lt.model
    h = lt.grid.h
    n_nodes = lt.grid.n_nodes
    out = np.zeros_like(eta.samples)
    for i, a in enumerate(m.a):
        e = eta.samples[:, i]
        z = np.zeros(n_nodes)
        if a > 0:
            f = np.exp(-a * h)
            for j in range(n_nodes - 1):
                z[j + 1] = f * z[j] + 0.5 * h * (f * e[j] + e[j + 1])
        else:
            f = np.exp(a * h)
            for j in range(n_nodes - 1, 0, -1):
                z[j - 1] = f * z[j] - 0.5 * h * (e[j - 1] + f * e[j])
        out[:, i] = z
    return DiscretePath(eta.grid, out)


def _d_system_matrix(lt):
    """Square discretization of D with the K_T boundary structure.

    Rows: central-difference flow rows at interior nodes; at the first node
    the stable rows are replaced by the boundary condition zeta_+(-T) = rhs
    and the unstable rows keep the one-sided stencil (mirrored at the last
    node)."""
    m = lt.model
    n = m.dim
    ns = m.n_stable
    N = lt.grid.n_nodes
    D1 = diff_matrix(lt.grid)  # (N, N), per component
    A = kron(identity(N, format="csr"), diags(m.a), format="csr")
    M = (kron(D1, identity(n, format="csr"), format="csr") + A).tolil()
    # boundary replacements: unknown ordering is node-major, component-minor
    for i in range(ns):           # stable BC rows at node 0
        M.rows[i] = [i]
        M.data[i] = [1.0]
    base = (N - 1) * n
    for i in range(ns, n):        # unstable BC rows at node N-1
        M.rows[base + i] = [base + i]
        M.data[base + i] = [1.0]
    return csr_matrix(M)


def d_system_rhs(lt, eta, v_plus=None, v_minus=None):
    """Right-hand side matching _d_system_matrix: flow rows from eta,
    boundary rows from the prescribed coefficients (default 0 -> K_T)."""
    m = lt.model
    n = m.dim
    ns = m.n_stable
    rhs = eta.samples.reshape(-1).copy()
    rhs[:ns] = 0.0 if v_plus is None else v_plus
    rhs[(lt.grid.n_nodes - 1) * n + ns:] = 0.0 if v_minus is None else v_minus
    return rhs


def apply_Q_exact(lt, eta):
    """Right inverse by direct sparse solve of the discretized D with K_T
    boundary rows; D o Q = Id on all enforced rows to machine precision."""
    _check_grid(lt, eta)
    sol = lt._exact_lu().solve(d_system_rhs(lt, eta))
    return DiscretePath(eta.grid, sol.reshape(lt.grid.n_nodes, lt.model.dim))


def gamma_infinitesimal(lt, xi0, eta0):
    """Infinitesimal gluing: coefficients (xi0, eta0) of the stable/unstable
    kernel elements, realized as the explicit glued kernel path."""
    if lt.T < 3:
        raise ValueError("need T >= 3")
    return kernel_path(lt, KernelElement(v_plus=np.atleast_1d(xi0),
                                         v_minus=np.atleast_1d(eta0)))


def gamma_weights(lt):
    """Diagonal weights of the exact W^{1,2} coefficient inner products:
    (domain weight, image weight) per eigenvalue."""
    a = np.abs(lt.model.a)
    dom = (1.0 + a**2) / (2.0 * a)
    img = dom * (1.0 - np.exp(-4.0 * lt.T * a))
    return dom, img


def gamma_svd_bounds(lt):
    """(op_norm, min_singular) of the infinitesimal gluing map in the exact
    weighted coefficient inner products (diagonal, so closed form)."""
    if lt.T < 3:
        raise ValueError("need T >= 3")
    dom, img = gamma_weights(lt)
    sv = np.sqrt(img / dom)
    return float(np.max(sv)), float(np.min(sv))


def euclidean_gluing_reference(model, w_plus_0, w_minus_0, T, grid=None,
                               h_max=0.02):
    """Closed-form glued flow line of the Euclidean model:
    s -> exp(-(s+T)A) w_+(0) + exp((T-s)A) w_-(0)."""
    if model.nonlinearity.strip() not in ("0", "0.0", ""):
        raise ValueError("reference requires the Euclidean (linear) model")
    if grid is None:
        grid = symmetric_grid(T, h_max)
    s = grid.nodes
    a = model.a
    vals = (np.exp(-np.outer(s + T, a)) * np.asarray(w_plus_0)
            + np.exp(np.outer(T - s, a)) * np.asarray(w_minus_0))
    return DiscretePath(grid, vals)


def euclidean_ev_reference(model, w_plus_0, w_minus_0, T):
    """Closed-form boundary evaluation of the Euclidean glued line."""
    a = model.a
    left = np.asarray(w_plus_0) + np.exp(2 * T * a) * np.asarray(w_minus_0)
    right = np.asarray(w_minus_0) + np.exp(-2 * T * a) * np.asarray(w_plus_0)
    return left, right


# ---------------------------------------------------------------------------
# measured operator norms

def w12_gram(grid, dim):
    """Sparse Gram matrix of the discrete W^{1,2} inner product on flattened
    (node-major) sample vectors."""
    wts = trapezoid_weights(grid)
    D1 = diff_matrix(grid)
    W = diags(wts)
    G1 = W + D1.T @ W @ D1
    return kron(G1, identity(dim, format="csr"), format="csr")


def l2_gram(grid, dim):
    wts = trapezoid_weights(grid)
    return kron(diags(wts), identity(dim, format="csr"), format="csr")


def measured_opnorm(M, gram_out, gram_in, rng, probes=20, iters=50):
    """Largest singular value of the dense matrix M between the weighted
    spaces given by sparse Gram matrices, by randomized power iteration."""
    lu = splu(gram_in.tocsc())
    best = 0.0
    for _ in range(probes):
        v = rng.standard_normal(M.shape[1])
        v /= np.sqrt(v @ (gram_in @ v))
        lam = 0.0
        for _ in range(iters):
            w = gram_out @ (M @ v)
            u = lu.solve(M.T @ w)
            lam = v @ (M.T @ w)
            nrm = np.sqrt(u @ (gram_in @ u))
            if nrm == 0.0:
                break
            v = u / nrm
        best = max(best, lam)
    return float(np.sqrt(best))


def projection_matrix(lt):
    """Dense matrix of the kernel projection on flattened sample vectors
    (rank n: kernel basis paths times boundary coefficient extraction)."""
    m = lt.model
    n = m.dim
    N = lt.grid.n_nodes
    cols = []
    for i in range(n):
        ke = KernelElement(
            v_plus=np.eye(n)[i][: m.n_stable],
            v_minus=np.eye(n)[i][m.n_stable:])
        cols.append(kernel_path(lt, ke).samples.reshape(-1))
    K = np.stack(cols, axis=1)  # (N*n, n)
    B = np.zeros((n, N * n))
    for i in range(m.n_stable):
        B[i, i] = 1.0
    for i in range(m.n_stable, n):
        B[i, (N - 1) * n + i] = 1.0
    return K @ B


def measured_projection_norm(lt, rng, probes=20, iters=50):
    G = w12_gram(lt.grid, lt.model.dim)
    return measured_opnorm(projection_matrix(lt), G, G, rng, probes, iters)


def q_matrix(lt, exact=False):
    """Dense matrix of the right inverse on flattened sample vectors."""
    n = lt.model.dim
    N = lt.grid.n_nodes
    apply_fn = apply_Q_exact if exact else apply_Q
    M = np.zeros((N * n, N * n))
    eta = np.zeros((N, n))
    for j in range(N * n):
        eta.reshape(-1)[j] = 1.0
        M[:, j] = apply_fn(lt, DiscretePath(lt.grid, eta)).samples.reshape(-1)
        eta.reshape(-1)[j] = 0.0
    return M


def measured_q_norm(lt, rng, probes=20, iters=50, exact=False):
    Gout = w12_gram(lt.grid, lt.model.dim)
    Gin = l2_gram(lt.grid, lt.model.dim)
    return measured_opnorm(q_matrix(lt, exact=exact), Gout, Gin, rng,
                           probes, iters)


def d_restricted_min_sv(lt):
    """Smallest weighted singular value of D restricted to K_T (boundary
    dofs and boundary flow rows removed), measuring ker D_T = E_T: on the
    complement the discrete operator is boundedly invertible."""
    from scipy.linalg import cholesky, svdvals

    m = lt.model
    n = m.dim
    ns = m.n_stable
    N = lt.grid.n_nodes
    D1 = diff_matrix(lt.grid).toarray()
    A = np.kron(np.eye(N), np.diag(m.a))
    M = np.kron(D1, np.eye(n)) + A
    keep_cols = np.ones(N * n, dtype=bool)
    keep_cols[:ns] = False                      # stable dofs at -T
    keep_cols[(N - 1) * n + ns:] = False        # unstable dofs at +T
    keep_rows = keep_cols.copy()                # drop replaced boundary rows
    M = M[np.ix_(keep_rows, keep_cols)]
    Gin = w12_gram(lt.grid, n).toarray()[np.ix_(keep_cols, keep_cols)]
    Gout = l2_gram(lt.grid, n).toarray()[np.ix_(keep_rows, keep_rows)]
    from scipy.linalg import solve_triangular
    Lin = cholesky(Gin, lower=True)
    Lout = cholesky(Gout, lower=True)
    # weighted singular values of M: svdvals(Lout^T M Lin^{-T})
    B = Lout.T @ solve_triangular(Lin, M.T, lower=True).T
    return float(np.min(svdvals(B)))
