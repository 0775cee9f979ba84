"""Stable/unstable manifold trajectories and their tangent lifts.

Half-trajectories solve the downward gradient flow on a truncated half-line
with projection boundary conditions, by collocation (the same second-order
stencils as path_space.differentiate) and damped Newton.  Tangent lifts solve
the binary-indexed variational systems whose coefficients are enumerated by
set partitions of digit sets; the identification theta reads the asymptotic
kernel coefficient at the truncation time.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.sparse import csr_matrix, diags, identity, kron, lil_matrix
from scipy.sparse.linalg import splu

from .path_space import (DiscretePath, Grid, diff_matrix, differentiate,
                         make_grid, norms)

TOL_FLOW = 1e-9
MAX_ITER = 50
MAX_HALVINGS = 20


# ---------------------------------------------------------------------------
# digit / partition combinatorics

def digit_map(k):
    """Positions of the 1-bits of k, 1-indexed from the least significant."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    return {i + 1 for i in range(k.bit_length()) if k >> i & 1}


def digit_inverse(D):
    """e(D) = sum of 2^(j-1) over j in D; inverse of digit_map."""
    return sum(1 << (j - 1) for j in D)


def partitions(D, ell):
    """All partitions of the finite set D into ell non-empty blocks.

    Canonical ordering: within a partition, blocks sorted by minimum element;
    the list of partitions sorted lexicographically by that block sequence."""
    D = sorted(D)
    if not D:
        raise ValueError("D must be non-empty")
    if ell < 1:
        raise ValueError("need at least one block")

    def rec(items):
        if not items:
            yield []
            return
        head, rest = items[0], items[1:]
        for sub in rec(rest):
            # head joins an existing block or opens a new one
            for i in range(len(sub)):
                yield sub[:i] + [[head] + sub[i]] + sub[i + 1:]
            yield [[head]] + sub

    out = []
    for part in rec(D):
        if len(part) == ell:
            blocks = tuple(tuple(sorted(b)) for b in part)
            out.append(tuple(sorted(blocks, key=lambda b: b[0])))
    return sorted(set(out))


def hamming_weight(k):
    return bin(k).count("1")


@dataclass(frozen=True)
class TangentSystemSpec:
    """Components k = 0..2^m-1; component 0 is the nonlinear flow, component
    k >= 1 is linear in W_k with forcing terms (order ell, argument indices)."""
    m: int
    components: tuple  # tuple over k>=1 of tuples of (ell, (e(A1),...,e(Aell)))

    @property
    def n_components(self):
        return 2 ** self.m


def build_tangent_system(m):
    """The 2^m-component variational system: for each k >= 1,
    0 = W_k' + Dgrad(W_0)[W_k] + sum over ell>=2 and partitions of the digit
    set of k of the order-ell tensor applied to the lower-index components."""
    if not 0 <= m <= 3:
        raise ValueError("m must be in 0..3")
    comps = []
    for k in range(1, 2 ** m):
        terms = [(1, (k,))]
        D = digit_map(k)
        for ell in range(2, hamming_weight(k) + 1):
            for part in partitions(D, ell):
                terms.append((ell, tuple(digit_inverse(b) for b in part)))
        comps.append(tuple(terms))
    return TangentSystemSpec(m=m, components=tuple(comps))


# ---------------------------------------------------------------------------
# half trajectories

@dataclass(frozen=True)
class HalfTrajectory:
    side: str               # "stable" | "unstable"
    head: DiscretePath      # on [0, S] (stable) or [-S, 0] (unstable)
    tail_coeff: np.ndarray  # asymptotic kernel coefficient beyond the head
    S: float
    residual: float
    seed: np.ndarray

    @property
    def grid(self):
        return self.head.grid


class ShootError(RuntimeError):
    pass


def _half_grid(side, S, h_max):
    if side == "stable":
        return make_grid(0.0, S, h_max)
    return make_grid(-S, 0.0, h_max)


def _flow_system(model, grid, side):
    """Sparse stencil operator and the boundary-replaced row indices of the
    collocation system.  On both sides the stable-component rows at the first
    node and the unstable-component rows at the last node become boundary
    conditions (seed at the s = 0 end, decay at the far end)."""
    n = model.dim
    ns = model.n_stable
    N = grid.n_nodes
    D1 = diff_matrix(grid)
    Dk = kron(D1, identity(n, format="csr"), format="csr")
    bc0 = list(range(ns))
    bc1 = [(N - 1) * n + i for i in range(ns, n)]
    return Dk, bc0, bc1


def _grad_all(model, w):
    out = np.empty_like(w)
    for j in range(w.shape[0]):
        out[j] = model.grad(w[j])
    return out


def _jac_blocks(model, w):
    N, n = w.shape
    blocks = np.empty((N, n, n))
    for j in range(N):
        blocks[j] = model.dgrad_tensor(w[j], 1)
    return blocks


def _assemble_system(Dk, jac_blocks, bc_rows):
    """Collocation Jacobian: stencil + block-diagonal Jacobian of grad, with
    the boundary rows replaced by identity rows."""
    N, n, _ = jac_blocks.shape
    from scipy.sparse import block_diag
    J = (Dk + block_diag(jac_blocks, format="csr")).tolil()
    for r in bc_rows:
        J.rows[r] = [r]
        J.data[r] = [1.0]
    return csr_matrix(J)


def _interior_residual(res_flat, n, bc_rows):
    """Sup norm of the enforced flow rows (boundary-condition rows excluded)."""
    mask = np.ones(res_flat.size, dtype=bool)
    mask[list(bc_rows)] = False
    return float(np.max(np.abs(res_flat[mask])))


def _shoot(model, seed, S, side, h_max, tol_flow, max_iter):
    seed = np.atleast_1d(np.asarray(seed, dtype=float))
    n = model.dim
    ns = model.n_stable
    grid = _half_grid(side, S, h_max)
    N = grid.n_nodes
    Dk, bc0, bc1 = _flow_system(model, grid, side)
    bc_rows = bc0 + bc1

    # boundary data: seed at the s=0 end, decay condition at the far end
    bc_vals = np.zeros(N * n)
    if side == "stable":
        if seed.shape != (ns,):
            raise ValueError("stable seed must have dimension n - k")
        bc_vals[:ns] = seed
        s_rel = grid.nodes
        init = np.zeros((N, n))
        init[:, :ns] = np.exp(-np.outer(s_rel, model.a_plus)) * seed
    else:
        if seed.shape != (n - ns,):
            raise ValueError("unstable seed must have dimension k")
        for idx, i in enumerate(range(ns, n)):
            bc_vals[(N - 1) * n + i] = seed[idx]
        s_rel = grid.nodes
        init = np.zeros((N, n))
        init[:, ns:] = np.exp(np.outer(s_rel, model.a_minus)) * seed

    w = init
    res = _flow_res_with_bc(model, grid, w, Dk, bc_rows, bc_vals)
    rnorm = np.linalg.norm(res)
    for it in range(max_iter):
        if _interior_residual(res, n, bc_rows) < tol_flow:
            break
        J = _assemble_system(Dk, _jac_blocks(model, w), bc_rows)
        step = splu(J.tocsc()).solve(-res)
        lam = 1.0
        for _ in range(MAX_HALVINGS):
            w_new = w + lam * step.reshape(N, n)
            res_new = _flow_res_with_bc(model, grid, w_new, Dk, bc_rows,
                                        bc_vals)
            if np.linalg.norm(res_new) < rnorm or rnorm == 0.0:
                break
            lam *= 0.5
        else:
            raise ShootError("damped Newton stalled (seed outside "
                             "computable neighborhood)")
        w, res, rnorm = w_new, res_new, np.linalg.norm(res_new)
    else:
        raise ShootError("Newton did not converge in %d iterations" % max_iter)

    resid = _interior_residual(res, n, bc_rows)
    if resid > tol_flow:
        raise ShootError("flow residual %.3e above tol_flow" % resid)
    head = DiscretePath(grid, w)
    if side == "stable":
        tail = np.exp(S * model.a_plus) * model.p_plus(w[-1])
    else:
        tail = np.exp(S * model.a_minus) * model.p_minus(w[0])
    return HalfTrajectory(side=side, head=head, tail_coeff=tail, S=float(S),
                          residual=resid, seed=seed)


def _flow_res_with_bc(model, grid, w, Dk, bc_rows, bc_vals):
    res = Dk @ w.reshape(-1) + _grad_all(model, w).reshape(-1)
    res[bc_rows] = w.reshape(-1)[bc_rows] - bc_vals[bc_rows]
    return res


def shoot_stable(model, x0, S, h_max=0.02, tol_flow=TOL_FLOW,
                 max_iter=MAX_ITER):
    """Stable-manifold trajectory on [0, S]: p_+ w(0) = x0, p_- w(S) = 0."""
    return _shoot(model, x0, S, "stable", h_max, tol_flow, max_iter)


def shoot_unstable(model, y0, S, h_max=0.02, tol_flow=TOL_FLOW,
                   max_iter=MAX_ITER):
    """Unstable-manifold trajectory on [-S, 0]: p_- w(0) = y0,
    p_+ w(-S) = 0."""
    return _shoot(model, y0, S, "unstable", h_max, tol_flow, max_iter)


# ---------------------------------------------------------------------------
# tangent lifts

def solve_tangent_lift(model, base, sys_spec, seeds, tol_lin=1e-8):
    """Solve the variational components k = 1..2^m-1 along the base
    trajectory, in index order (each component is linear given the lower
    ones).  seeds[k-1] prescribes the free boundary data of component k
    (stable side: p_+ W_k(0); unstable side: p_- W_k(0))."""
    if base.residual > TOL_FLOW * 10:
        raise ValueError("base trajectory residual too large")
    n = model.dim
    ns = model.n_stable
    grid = base.grid
    N = grid.n_nodes
    side = base.side
    Dk, bc0, bc1 = _flow_system(model, grid, side)
    bc_rows = bc0 + bc1
    J = _assemble_system(Dk, _jac_blocks(model, base.head.samples), bc_rows)
    lu = splu(J.tocsc())

    W = {0: base.head.samples}
    out = []
    for k in range(1, sys_spec.n_components):
        terms = sys_spec.components[k - 1]
        forcing = np.zeros((N, n))
        for ell, args in terms:
            if ell == 1:
                continue  # the order-1 term is the system operator itself
            for j in range(N):
                v = model.dgrad_tensor(base.head.samples[j], ell)
                for a in args:
                    v = np.tensordot(v, W[a][j], axes=([v.ndim - 1], [0]))
                forcing[j] += v
        rhs = -forcing.reshape(-1)
        seed = np.atleast_1d(np.asarray(seeds[k - 1], dtype=float))
        bc_vals = np.zeros(N * n)
        if side == "stable":
            bc_vals[:ns] = seed
        else:
            bc_vals[(N - 1) * n + ns:] = seed
        rhs[bc_rows] = bc_vals[bc_rows]
        sol = lu.solve(rhs)
        Wk = sol.reshape(N, n)
        W[k] = Wk
        out.append(DiscretePath(grid, Wk))
    return out


def linearized_residual(model, base, xi):
    """Sup over interior nodes of xi' + dgrad(base) xi (central stencils)."""
    dxi = differentiate(xi).samples
    res = dxi.copy()
    for j in range(base.grid.n_nodes):
        res[j] += model.dgrad_tensor(base.head.samples[j], 1) @ xi.samples[j]
    return float(np.max(np.abs(res[1:-1])))


def theta_identification(model, base, xi, tol_lin=1e-6):
    """Asymptotic kernel coefficient identifying a linearized solution along
    the base with a linear-model kernel element: stable side
    exp(S A_+) p_+ xi(S), unstable side exp(S A_-) p_- xi(-S)."""
    if linearized_residual(model, base, xi) > tol_lin:
        raise ValueError("path does not solve the linearized flow equation")
    if base.side == "stable":
        return np.exp(base.S * model.a_plus) * model.p_plus(xi.samples[-1])
    return np.exp(base.S * model.a_minus) * model.p_minus(xi.samples[0])


def theta_inverse(model, base, v, sys_spec=None):
    """Linearized solution along base with theta-coefficient v, built by
    inverting the seed -> theta matrix on a lift basis."""
    if sys_spec is None:
        sys_spec = build_tangent_system(1)
    dim = model.n_stable if base.side == "stable" else model.index
    cols = []
    lifts = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        lift = solve_tangent_lift(model, base, sys_spec, [e])[0]
        lifts.append(lift)
        cols.append(theta_identification(model, base, lift))
    Mth = np.stack(cols, axis=1)
    seed = np.linalg.solve(Mth, np.atleast_1d(v))
    samples = sum(s * l.samples for s, l in zip(seed, lifts))
    return DiscretePath(base.grid, samples), seed


# ---------------------------------------------------------------------------
# decay fitting

@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    r2: float
    window: tuple


def decay_fit(p, window, floor=1e-14):
    """Least-squares exponential-decay fit of |W(s)| + |W'(s)| over the
    window; rate is the negated slope of the log-linear fit."""
    if isinstance(p, HalfTrajectory):
        p = p.head
    s = p.grid.nodes
    g = (np.linalg.norm(p.samples, axis=1)
         + np.linalg.norm(differentiate(p).samples, axis=1))
    lo, hi = window
    mask = (s >= lo - 1e-12) & (s <= hi + 1e-12) & (g > floor)
    if np.count_nonzero(mask) < 2:
        raise ValueError("fit window empty after flooring")
    x = s[mask]
    y = np.log(g[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss_tot)
    return DecayFit(rate=float(-slope), prefactor=float(np.exp(intercept)),
                    r2=r2, window=(float(lo), float(hi)))
