"""Quadratic-estimate-free Newton-Picard machinery over finite-dimensional
discretizations, plus a quantitative inverse-function-theorem certificate.

Given a map F with linearization D at a base point x0 and a right inverse Q
(DQ = Id), the correction iterates the contraction
    Phi(x) = x1 - Q(F(x) - D(x - x1)),
whose fixed point x satisfies F(x) = 0 (to the right-inverse defect) with
x - x1 in the image of Q and ||x - x1|| <= 2 c ||F(x1)||.
"""

from dataclasses import dataclass, field

import numpy as np


class PreconditionError(ValueError):
    pass


class ContractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class NPProblem:
    F: callable                 # vector -> vector
    apply_D: callable           # vector -> vector, linear
    apply_Q: callable           # vector -> vector, right inverse of D
    x0: np.ndarray
    c: float                    # bound for ||Q||
    delta: float                # admissible-ball radius
    norm_dom: callable = None   # domain norm (default Euclidean)
    norm_cod: callable = None   # codomain norm (default Euclidean)
    dF: callable = None         # x -> (v -> dF(x) v); finite diff if None
    tol_zero: float = 1e-12
    max_iter: int = 200
    fd_eps: float = 1e-6

    def __post_init__(self):
        if self.norm_dom is None:
            object.__setattr__(self, "norm_dom", np.linalg.norm)
        if self.norm_cod is None:
            object.__setattr__(self, "norm_cod", np.linalg.norm)

    def dF_apply(self, x, v):
        if self.dF is not None:
            return self.dF(x)(v)
        e = self.fd_eps * max(1.0, self.norm_dom(x)) / max(
            self.norm_dom(v), 1e-300)
        return (self.F(x + e * v) - self.F(x - e * v)) / (2.0 * e)


@dataclass(frozen=True)
class NPResult:
    x: np.ndarray
    iterations: int
    residual_final: float
    correction_norm: float
    in_image_Q_defect: float
    contraction_ratios: tuple
    precond: dict

    @property
    def contraction_ratio_max(self):
        return max(self.contraction_ratios) if self.contraction_ratios else 0.0


def precondition_check(p, x1):
    """Measure the two admissibility bounds: ||x1 - x0|| < delta/8 and
    ||F(x1)|| < delta/(4c)."""
    dx = p.norm_dom(np.asarray(x1) - p.x0)
    fx = p.norm_cod(p.F(np.asarray(x1)))
    return {
        "dx_norm": float(dx), "dx_bound": p.delta / 8.0,
        "dx_ok": bool(dx < p.delta / 8.0),
        "fx_norm": float(fx), "fx_bound": p.delta / (4.0 * p.c),
        "fx_ok": bool(fx < p.delta / (4.0 * p.c)),
    }


def np_solve(p, x1, check=True):
    """Newton-Picard correction from the approximate zero x1.

    Iterates Phi(x) = x1 - Q(F(x) - D(x - x1)) until the step norm drops
    below tol_zero * max(1, ||x1||); step-size stopping bounds the distance
    to the fixed point through the geometric tail."""
    x1 = np.asarray(x1, dtype=float)
    pre = precondition_check(p, x1)
    if check:
        if not pre["dx_ok"]:
            raise PreconditionError(
                "||x1 - x0|| = %.6g >= delta/8 = %.6g"
                % (pre["dx_norm"], pre["dx_bound"]))
        if not pre["fx_ok"]:
            raise PreconditionError(
                "||F(x1)|| = %.6g >= delta/(4c) = %.6g"
                % (pre["fx_norm"], pre["fx_bound"]))
    tol = p.tol_zero * max(1.0, p.norm_dom(x1))
    if pre["fx_norm"] <= tol:
        # already a zero: the correction map restricts to the identity
        return NPResult(x=x1.copy(), iterations=0,
                        residual_final=pre["fx_norm"], correction_norm=0.0,
                        in_image_Q_defect=0.0, contraction_ratios=(),
                        precond=pre)
    x = x1.copy()
    ratios = []
    prev_step = None
    iters = 0
    for iters in range(1, p.max_iter + 1):
        x_new = x1 - p.apply_Q(p.F(x) - p.apply_D(x - x1))
        step = p.norm_dom(x_new - x)
        if prev_step is not None and prev_step > 0:
            r = step / prev_step
            ratios.append(float(r))
            if r > 0.95:
                raise ContractionError(
                    "contraction ratio %.3f > 0.95 (hypothesis breakdown)" % r)
        prev_step = step
        x = x_new
        if step <= tol:
            break
    else:
        raise ContractionError("no convergence in %d iterations" % p.max_iter)
    corr = x - x1
    dcorr = p.apply_D(corr)
    qd = p.apply_Q(dcorr)
    scale = max(p.norm_dom(corr), 1e-300)
    return NPResult(
        x=x, iterations=iters,
        residual_final=float(p.norm_cod(p.F(x))),
        correction_norm=float(p.norm_dom(corr)),
        in_image_Q_defect=float(p.norm_dom(corr - qd) / scale),
        contraction_ratios=tuple(ratios), precond=pre)


def np_differential(p, x1, v, max_terms=100, tol=1e-12):
    """Differential of the Newton-Picard map at x1 applied to v:
    (Id + Q dF(x1) - P)^{-1} (Id - P) v with P = QD, by the Neumann
    iteration u <- w + (P - Q dF(x1)) u."""
    v = np.asarray(v, dtype=float)
    w = v - p.apply_Q(p.apply_D(v))
    u = w.copy()
    for _ in range(max_terms):
        u_new = w + p.apply_Q(p.apply_D(u)) - p.apply_Q(p.dF_apply(x1, u))
        if p.norm_dom(u_new - u) <= tol * max(1.0, p.norm_dom(w)):
            return u_new
        u = u_new
    raise ContractionError("Neumann iteration did not converge")


def np_neumann_defect(p, x1, mu, rng, probes=20):
    """Measured norm of (Id + Q dF(x1) - P)^{-1} - Id on random probes;
    bounded by 1/(mu - 1) when ||dF(x1) - D|| <= 1/(mu c)."""
    worst = 0.0
    n = len(np.asarray(p.x0))
    for _ in range(probes):
        v = rng.standard_normal(n)
        w = v.copy()
        # solve (Id + Q dF - P) u = v by the same Neumann iteration
        u = w.copy()
        for _ in range(200):
            u_new = w + p.apply_Q(p.apply_D(u)) - p.apply_Q(p.dF_apply(x1, u))
            if p.norm_dom(u_new - u) <= 1e-13 * max(1.0, p.norm_dom(w)):
                break
            u = u_new
        worst = max(worst, p.norm_dom(u - v) / p.norm_dom(v))
    return float(worst)


def np_tangent_solve(p, x1, xi1, c2=None, check=True):
    """Tangent-map solve: Newton-Picard on the doubled problem
    TF(x, xi) = (F(x), dF(x) xi) with initial point (x0, 0), right inverse
    Q + Q and the fiber-rescaled max norm.  Returns ((x, xi), NPResult)."""
    x1 = np.asarray(x1, dtype=float)
    xi1 = np.asarray(xi1, dtype=float)
    n = x1.size
    m = len(np.asarray(p.F(x1)))
    if c2 is None:
        c2 = estimate_c2(p)
    delta_hat = min(p.delta, 1.0 / (4.0 * p.c * max(c2, 1e-300)))
    wt = delta_hat / p.delta

    def split(z, at):
        return z[:at], z[at:]

    def TF(z):
        x, xi = split(z, n)
        return np.concatenate([p.F(x), p.dF_apply(x, xi)])

    def TD(z):
        x, xi = split(z, n)
        return np.concatenate([p.apply_D(x), p.apply_D(xi)])

    def TQ(z):
        y, eta = split(z, m)
        return np.concatenate([p.apply_Q(y), p.apply_Q(eta)])

    def tnorm_dom(z):
        x, xi = split(z, n)
        return max(p.norm_dom(x), wt * p.norm_dom(xi))

    def tnorm_cod(z):
        y, eta = split(z, m)
        return max(p.norm_cod(y), wt * p.norm_cod(eta))

    tp = NPProblem(F=TF, apply_D=TD, apply_Q=TQ,
                   x0=np.concatenate([p.x0, np.zeros_like(p.x0)]),
                   c=p.c, delta=delta_hat, norm_dom=tnorm_dom,
                   norm_cod=tnorm_cod, tol_zero=p.tol_zero,
                   max_iter=p.max_iter, fd_eps=p.fd_eps)
    res = np_solve(tp, np.concatenate([x1, xi1]), check=check)
    x, xi = split(res.x, n)
    return (x, xi), res


def estimate_c2(p, samples=5, rng=None):
    """Sampled bound for ||d2F|| on the delta-ball by finite differences of
    the differential, with a 1.1 safety factor."""
    if rng is None:
        rng = np.random.default_rng(7)
    n = len(np.asarray(p.x0))
    worst = 0.0
    e = 1e-4 * p.delta
    for _ in range(samples):
        x = np.asarray(p.x0) + p.delta * 0.5 * _unit(rng, n, p.norm_dom)
        u = _unit(rng, n, p.norm_dom)
        v = _unit(rng, n, p.norm_dom)
        d2 = (p.dF_apply(x + e * u, v) - p.dF_apply(x - e * u, v)) / (2 * e)
        worst = max(worst, p.norm_cod(d2))
    return 1.1 * worst


def _unit(rng, n, norm):
    v = rng.standard_normal(n)
    return v / max(norm(v), 1e-300)


# ---------------------------------------------------------------------------
# quantitative inverse function theorem certificate

@dataclass(frozen=True)
class IFTCertificate:
    ok: bool
    inv_norm_at_0: float
    k_bound: float
    max_variation: float
    variation_bound: float
    injectivity_checked: int
    injectivity_failures: int
    preimages_checked: int
    preimage_failures: int
    worst_sample: np.ndarray
    slack: float


def _fd_jacobian(F, x, eps):
    x = np.asarray(x, dtype=float)
    n = x.size
    m = len(F(x))
    J = np.empty((m, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        J[:, j] = (F(x + e) - F(x - e)) / (2 * eps)
    return J


def ift_certificate(F, delta, k, sample_count, rng, dim, fd_eps=1e-6,
                    slack=1.0, n_pairs=200, n_preimages=20,
                    newton_tol=1e-10, dF=None):
    """Check the quantitative-IFT hypotheses for F on the delta-ball around 0
    (F(0) = 0): ||dF(0)^{-1}|| <= k and ||dF(x) - dF(0)|| <= 1/(2k) on
    samples; on success spot-verify injectivity on random pairs and Newton
    preimage solves for targets in the delta/(2k)-ball.  `slack` is a
    multiplicative measurement cushion on the two hypothesis bounds."""
    jac = (lambda x: dF(x)) if dF is not None else (
        lambda x: _fd_jacobian(F, x, fd_eps))
    n = dim
    J0 = jac(np.zeros(n))
    sv = np.linalg.svd(J0, compute_uv=False)
    if sv[-1] <= 0:
        raise ValueError("dF(0) singular: inverse-bound hypothesis fails")
    inv0 = 1.0 / float(sv[-1])
    if inv0 > k * slack:
        raise ValueError("||dF(0)^{-1}|| = %.6g exceeds k = %.6g (slack %.3g)"
                         % (inv0, k, slack))
    worst = 0.0
    worst_x = np.zeros(n)
    for _ in range(sample_count):
        x = delta * rng.uniform(0, 1) ** (1.0 / n) * _unit(
            rng, n, np.linalg.norm)
        var = float(np.linalg.norm(jac(x) - J0, 2))
        if var > worst:
            worst, worst_x = var, x
    if worst > slack / (2.0 * k):
        raise ValueError(
            "max ||dF(x) - dF(0)|| = %.6g exceeds 1/(2k) = %.6g at x = %s"
            % (worst, 1.0 / (2 * k), worst_x))
    # conclusions (failures flag implementation bugs, hypotheses held)
    inj_fail = 0
    for _ in range(n_pairs):
        x = delta * rng.uniform(0, 1) ** (1.0 / n) * _unit(rng, n,
                                                           np.linalg.norm)
        y = delta * rng.uniform(0, 1) ** (1.0 / n) * _unit(rng, n,
                                                           np.linalg.norm)
        if np.linalg.norm(x - y) < 1e-12:
            continue
        lhs = np.linalg.norm(F(x) - F(y))
        if lhs < np.linalg.norm(x - y) / (2.0 * k) * (1 - 1e-6):
            inj_fail += 1
    pre_fail = 0
    for _ in range(n_preimages):
        y = delta / (2.0 * k) * rng.uniform(0, 1) ** (1.0 / n) * _unit(
            rng, n, np.linalg.norm)
        x = np.zeros(n)
        ok = False
        for _ in range(50):
            r = F(x) - y
            if np.linalg.norm(r) <= newton_tol:
                ok = True
                break
            x = x - np.linalg.solve(jac(x), r)
            if np.linalg.norm(x) > delta * (1 + 1e-9):
                break
        else:
            ok = np.linalg.norm(F(x) - y) <= newton_tol
        if not (ok and np.linalg.norm(x) <= delta * (1 + 1e-9)):
            pre_fail += 1
    return IFTCertificate(
        ok=(inj_fail == 0 and pre_fail == 0),
        inv_norm_at_0=inv0, k_bound=float(k),
        max_variation=worst, variation_bound=1.0 / (2.0 * k),
        injectivity_checked=n_pairs, injectivity_failures=inj_fail,
        preimages_checked=n_preimages, preimage_failures=pre_fail,
        worst_sample=worst_x, slack=float(slack))
