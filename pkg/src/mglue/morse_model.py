"""Morse models near a critical point at the origin.

A model is f(z) = 1/2 <z, Az> + f_nl(z) with A = diag(a_1 >= ... >= a_{n-k}
> 0 > a_{n-k+1} >= ... >= a_n) and a polynomial perturbation f_nl whose 2-jet
vanishes at 0.  The module provides the gradient, coded derivative tensors of
the gradient up to order 3, and all model-derived constants.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from math import exp, log, sqrt, ceil, inf

import numpy as np
import sympy as sp


def _spectral_norm(mat):
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True)
class MorseModel:
    dim: int
    index: int
    eig: tuple                 # a_1 >= ... >= a_n, ordered, nonzero
    nonlinearity: str = "0"    # polynomial in x1..xn, vanishing 2-jet at 0
    tensor_order: int = 3
    # filled in __post_init__
    _tensor_fns: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.eig, dtype=float)
        if len(a) != self.dim:
            raise ValueError("eigenvalue count must equal dim")
        if np.any(np.diff(a) > 1e-14):
            raise ValueError("eigenvalues must be in decreasing order")
        if np.any(a == 0):
            raise ValueError("Hessian must be invertible")
        if np.sum(a < 0) != self.index:
            raise ValueError("index must equal the number of negative eigenvalues")
        if self.tensor_order < 3:
            raise ValueError("tensor_order >= 3 required")
        object.__setattr__(self, "eig", tuple(float(v) for v in a))
        object.__setattr__(self, "_tensor_fns", _compile_tensors(self))
        # vanishing 2-jet / critical point sanity
        if np.linalg.norm(self.grad(np.zeros(self.dim))) > 1e-12:
            raise ValueError("gradient does not vanish at 0")
        if _spectral_norm(self.dgrad_tensor(np.zeros(self.dim), 1) - self.A) > 1e-10:
            raise ValueError("Hessian at 0 does not match eigenvalue list")

    @property
    def A(self):
        return np.diag(self.eig)

    @property
    def a(self):
        return np.asarray(self.eig)

    @property
    def n_stable(self):
        return self.dim - self.index

    @property
    def sigma(self):
        return float(np.min(np.abs(self.a)))

    @property
    def a_plus(self):
        """Positive definite diagonal of the stable block."""
        return self.a[: self.n_stable]

    @property
    def a_minus(self):
        """Positive definite diagonal of the unstable block (sign-flipped)."""
        return -self.a[self.n_stable:]

    def p_plus(self, z):
        return np.asarray(z)[..., : self.n_stable]

    def p_minus(self, z):
        return np.asarray(z)[..., self.n_stable:]

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return self.a * z + self._tensor_fns[0](z)

    def dgrad_tensor(self, z, order):
        """Derivative tensor of grad of the given order (1..tensor_order).

        Order 1 returns the (n, n) Jacobian of grad; order m returns the
        symmetric (n,)*(m+1) array T with T[i, j1.. jm] = d^m (grad_i)."""
        if not 1 <= order <= self.tensor_order:
            raise ValueError("unsupported tensor order")
        z = np.asarray(z, dtype=float)
        t = self._tensor_fns[order](z)
        if order == 1:
            return self.A + t
        return t


def _compile_tensors(model):
    xs = sp.symbols("x1:%d" % (model.dim + 1))
    expr = sp.sympify(model.nonlinearity, locals={s.name: s for s in xs},
                      convert_xor=True)
    grad_nl = [sp.diff(expr, x) for x in xs]

    def lambdify_tensor(entries, shape):
        fns = [sp.lambdify(xs, e, modules="numpy") for e in entries]

        def fn(z):
            z = np.asarray(z, dtype=float)
            if z.ndim == 1:
                vals = np.array([float(f(*z)) for f in fns])
                return vals.reshape(shape)
            # batched: z has shape (m, n); broadcast constant entries
            m = z.shape[0]
            cols = [z[:, i] for i in range(z.shape[1])]
            vals = np.stack(
                [np.broadcast_to(np.asarray(f(*cols), dtype=float), (m,))
                 for f in fns], axis=-1)
            return vals.reshape((m,) + shape)

        return fn

    n = model.dim
    out = {}
    out[0] = lambdify_tensor(grad_nl, (n,))
    cur = grad_nl
    for order in range(1, model.tensor_order + 1):
        cur = [sp.diff(e, x) for e in cur for x in xs]
        out[order] = lambdify_tensor(cur, (n,) * (order + 1))
    return tuple(out[i] for i in range(model.tensor_order + 1))


def model_e1():
    """Euclidean 2d model: f = (x^2 - y^2)/2, A = diag(1, -1)."""
    return MorseModel(dim=2, index=1, eig=(1.0, -1.0))


def model_c1(lam=0.1):
    """Curved 2d model: f = x^2/2 - y^2/2 + lam*x^2*y."""
    return MorseModel(dim=2, index=1, eig=(1.0, -1.0),
                      nonlinearity="%r*x1^2*x2" % lam)


@dataclass(frozen=True)
class ModelConstants:
    sigma: float
    c_rightinv: float
    d_proj: float
    k_gamma_inv: float
    delta_mu: dict          # mu -> delta_mu, for mu in {2, 4, 4k+1}
    T0: float
    epsilon: float
    mu_star: float          # the 4k+1 key
    C_decay: float

    @property
    def delta4(self):
        return self.delta_mu[4.0]


def c_rightinv_formula(model):
    """Per-definite-block right-inverse constant, max over the two blocks."""
    vals = []
    for block in (model.a_plus, model.a_minus):
        if len(block) == 0:
            continue
        a_first = float(np.max(block))
        a_last = float(np.min(block))
        vals.append(sqrt(((a_first + a_last) ** 2 + 1.0) / a_last**2))
    return max(vals)


def d_proj_formula(model):
    a1 = model.a[0]
    an = model.a[-1]
    return sqrt(8.0 * max(1.0 + a1**2, 1.0 + an**2) / (2.0 * model.sigma))


def k_gamma_formula(model):
    return 1.0 / (1.0 - exp(-12.0 * model.sigma))


def sup_dgrad_deviation(model, rho, rng, n_points=None, safety=1.05):
    """Sampled sup over the sphere |z| = rho of ||dgrad(z) - A||_op,
    scaled by a safety factor for the sampling gap."""
    if n_points is None:
        n_points = 1000 * model.dim
    z = rng.standard_normal((n_points, model.dim))
    z *= rho / np.linalg.norm(z, axis=1, keepdims=True)
    dev = model._tensor_fns[1](z)  # batched (m, n, n) Hessian deviation
    # dev is symmetric (Hessian of the scalar perturbation)
    worst = float(np.max(np.abs(np.linalg.eigvalsh(dev))))
    return safety * worst


def _rho_mu(model, mu, c, rng, delta_max, resolution=1e-6, safety=1.05):
    """Largest rho with sampled sup_{|z|<=rho} ||dgrad - A|| <= 1/(mu c)."""
    target = 1.0 / (mu * c)
    n_points = 1000 * model.dim
    u = rng.standard_normal((n_points, model.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)

    def sup_dev(rho):
        dev = model._tensor_fns[1](rho * u)
        return safety * float(np.max(np.abs(np.linalg.eigvalsh(dev))))

    cap = 2.0 * delta_max
    if sup_dev(cap) <= target:
        return cap  # nonlinearity too weak to bite before the cap
    if sup_dev(resolution) > target:
        raise ValueError("no positive admissible radius (degenerate scale)")
    lo, hi = 0.0, cap
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if sup_dev(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


def compute_constants(model, epsilon=None, C_decay=1.0, delta_max=1.0,
                      rng=None):
    """All model-derived constants; delta_mu by bisection on the sampled
    operator-norm deviation, T0 from the decay prefactor."""
    if rng is None:
        rng = np.random.default_rng(0)
    sigma = model.sigma
    if epsilon is None:
        epsilon = 0.9 * sigma
    if not 0.0 < epsilon < sigma:
        raise ValueError("need 0 < epsilon < sigma")
    c = c_rightinv_formula(model)
    d = d_proj_formula(model)
    k = k_gamma_formula(model)
    mu_star = 4.0 * k + 1.0
    delta_mu = {}
    for mu in (2.0, 4.0, mu_star):
        delta_mu[mu] = 0.5 * _rho_mu(model, mu, c, rng, delta_max)
    delta4 = delta_mu[4.0]
    thresh = delta4 / (4.0 * c)
    if C_decay < thresh * exp(-epsilon * 3.0):
        T0 = 3.0
    else:
        # nudge above the equality point so the decay bound holds strictly
        T0 = max(3.0, log(C_decay / thresh) / epsilon * (1.0 + 1e-9))
    return ModelConstants(sigma=sigma, c_rightinv=c, d_proj=d, k_gamma_inv=k,
                          delta_mu=delta_mu, T0=T0, epsilon=epsilon,
                          mu_star=mu_star, C_decay=C_decay)


# ---------------------------------------------------------------------------
# flat `key = value` model config files

def parse_flat_config(text):
    """Flat `key = value` config with # comments; values kept as strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("line %d: expected key = value" % lineno)
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def model_from_config(cfg):
    """Build a MorseModel (+ epsilon/delta_max knobs) from a flat config dict."""
    dim = int(cfg["dim"])
    index = int(cfg["index"])
    eig = tuple(float(v) for v in cfg["eig"].split(","))
    nonlinearity = cfg.get("nonlinearity", "0").replace("^", "**")
    model = MorseModel(dim=dim, index=index, eig=eig, nonlinearity=nonlinearity)
    epsilon = float(cfg["epsilon"]) if "epsilon" in cfg else None
    delta_max = float(cfg.get("delta_max", 1.0))
    return model, epsilon, delta_max
