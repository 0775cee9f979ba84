"""The gluing pipeline: cutoff, pre-gluing, approximate-zero certification,
Newton-Picard correction to a true flow line, linearized-gluing checks, and
the diffeomorphism-criterion verifier.
"""

from dataclasses import dataclass

import numpy as np

from .path_space import (DiscretePath, differentiate, norms, symmetric_grid,
                         zero_path)
from .invariant_manifolds import (HalfTrajectory, build_tangent_system,
                                  decay_fit, shoot_stable, shoot_unstable,
                                  solve_tangent_lift, theta_inverse)
from .linear_theory import (LinearTheory, apply_D, apply_Q, apply_Q_exact,
                            gamma_infinitesimal, kernel_path, KernelElement,
                            w12_gram)
from .newton_picard import NPProblem, np_solve, np_tangent_solve, \
    PreconditionError, ift_certificate
from .path_space import l2_norm, sup_norm, w12_inner


# ---------------------------------------------------------------------------
# cutoff functions

@dataclass(frozen=True)
class Cutoff:
    """Monotone C^2 step: exactly 0 for s <= -1 and exactly 1 for s >= 1."""
    name: str
    poly: tuple          # polynomial coefficients in u = (s+1)/2 on [-1, 1]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s + 1.0) / 2.0, 0.0, 1.0)
        out = np.polyval(self.poly, u)
        return np.where(s <= -1.0, 0.0, np.where(s >= 1.0, 1.0, out))

    def derivative(self, s):
        s = np.asarray(s, dtype=float)
        u = (s + 1.0) / 2.0
        dpoly = np.polyder(np.poly1d(list(self.poly)))
        out = dpoly(np.clip(u, 0.0, 1.0)) * 0.5
        return np.where((s <= -1.0) | (s >= 1.0), 0.0, out)

    @property
    def sup_dbeta(self):
        s = np.linspace(-1, 1, 4001)
        return float(np.max(np.abs(self.derivative(s))))


def quintic_cutoff():
    """Smoothstep of order 5: 6u^5 - 15u^4 + 10u^3 (C^2 at the breakpoints)."""
    return Cutoff(name="quintic", poly=(6.0, -15.0, 10.0, 0.0, 0.0, 0.0))


def cubic_cutoff():
    """Smoothstep of order 3: 3u^2 - 2u^3 (C^1 at the breakpoints)."""
    return Cutoff(name="cubic", poly=(-2.0, 3.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# sections and pre-gluing

def apply_F(model, w):
    """Nodewise flow section: dw/ds + grad f(w)."""
    dw = differentiate(w).samples
    g = np.empty_like(dw)
    for j in range(w.grid.n_nodes):
        g[j] = model.grad(w.samples[j])
    return DiscretePath(w.grid, dw + g)


def _half_samples_on(grid_T, half, T, side):
    """Samples of the shifted half trajectory w(+-T + s) on the [-T, T] grid,
    by direct index alignment when spacings match, else cubic resampling."""
    head = half.head if isinstance(half, HalfTrajectory) else half
    hg = head.grid
    if abs(hg.h - grid_T.h) < 1e-12:
        if side == "stable":
            # need arguments T + s for s in [-T, T], i.e. [0, 2T] from [0, S]
            offset = round((0.0 - hg.t_min) / hg.h)
            idx0 = offset
        else:
            # arguments -T + s in [-2T, 0] from [-S, 0]
            idx0 = round((-2.0 * T - hg.t_min) / hg.h)
        idx = idx0 + np.arange(grid_T.n_nodes)
        if idx[0] < 0 or idx[-1] >= hg.n_nodes:
            raise ValueError("half-trajectory head does not cover the "
                             "shifted range")
        return head.samples[idx]
    from .path_space import resample, Grid, make_grid
    target = make_grid(0.0, 2.0 * T, grid_T.h) if side == "stable" \
        else make_grid(-2.0 * T, 0.0, grid_T.h)
    return resample(head, target).samples


def preglue(model, cutoff, w_plus, w_minus, T, grid=None, h_max=0.02):
    """Pre-glued path on [-T, T] (T >= 3):
    w_T(s) = (1 - beta(s+2)) w_+(T+s) + beta(s-2) w_-(-T+s)."""
    if T < 3:
        raise ValueError("need T >= 3")
    if grid is None:
        grid = symmetric_grid(T, h_max)
    s = grid.nodes
    wp = _half_samples_on(grid, w_plus, T, "stable")
    wm = _half_samples_on(grid, w_minus, T, "unstable")
    b_left = 1.0 - cutoff(s + 2.0)
    b_right = cutoff(s - 2.0)
    return DiscretePath(grid, b_left[:, None] * wp + b_right[:, None] * wm)


RESID_BANDS = ((-3.0, -1.0), (1.0, 3.0))


def residual_support_violation(res_path, margin=None):
    """Sup of the residual outside [-3,-1] u [1,3] (interior nodes only;
    the boundary one-sided stencils are excluded, band edges get half a
    spacing of tolerance)."""
    g = res_path.grid
    if margin is None:
        margin = 0.5 * g.h
    s = g.nodes
    outside = np.ones(g.n_nodes, dtype=bool)
    for lo, hi in RESID_BANDS:
        outside &= ~((s >= lo - margin) & (s <= hi + margin))
    outside[0] = outside[-1] = False
    if not np.any(outside):
        return 0.0
    return float(np.max(np.linalg.norm(res_path.samples[outside], axis=1)))


def certify_approx_zero(model, cutoff, w_plus, w_minus, T_list, h_max=0.02):
    """Residual-decay table of the pre-glued path over T: l2 norms, a fitted
    exponential rate, and the support check."""
    rows = []
    for T in T_list:
        wt = preglue(model, cutoff, w_plus, w_minus, T, h_max=h_max)
        res = apply_F(model, wt)
        rows.append({
            "T": float(T),
            "resid_l2": l2_norm(res),
            "support_violation": residual_support_violation(res),
        })
    Ts = np.array([r["T"] for r in rows])
    vals = np.array([r["resid_l2"] for r in rows])
    mask = vals > 1e-14
    if np.count_nonzero(mask) >= 2:
        slope, intercept = np.polyfit(Ts[mask], np.log(vals[mask]), 1)
        pred = slope * Ts[mask] + intercept
        y = np.log(vals[mask])
        ss = float(np.sum((y - np.mean(y)) ** 2))
        r2 = 1.0 if ss == 0 else 1.0 - float(np.sum((y - pred) ** 2)) / ss
        rate_fit, C_fit = -float(slope), float(np.exp(intercept))
    else:
        rate_fit, C_fit, r2 = float("inf"), 0.0, 1.0
    return {"rows": rows, "rate_fit": rate_fit, "C_fit": C_fit, "r2": r2}


def estimate_decay_constant(model, cutoff, seed_box, T_list, h_max=0.02,
                            grid_pts=5, S=None, safety=1.2):
    """C(K+, K-) realized as the measured max over a seed grid of fitted
    prefactors, times a safety factor."""
    r_plus, r_minus = seed_box
    if S is None:
        S = 2.0 * max(T_list) + 6.0
    worst = 0.0
    for xp in np.linspace(-r_plus, r_plus, grid_pts):
        for ym in np.linspace(-r_minus, r_minus, grid_pts):
            wp = shoot_stable(model, [xp] * model.n_stable, S, h_max=h_max)
            wm = shoot_unstable(model, [ym] * model.index, S, h_max=h_max)
            fit = certify_approx_zero(model, cutoff, wp, wm, T_list,
                                      h_max=h_max)
            worst = max(worst, fit["C_fit"])
    return safety * worst


# ---------------------------------------------------------------------------
# the gluing map

@dataclass(frozen=True)
class GlueReport:
    T: float
    path: DiscretePath
    preglue_path: DiscretePath
    preglue_resid_l2: float
    np_iterations: int
    residual_final: float       # sup over enforced flow rows of the output
    correction_norm: float
    bound_2c_F: float
    contraction_ratio_max: float
    ev_error: float
    cond1_resid_ok: bool
    cond1_norm_ok: bool
    boundary_defect: float      # K_T membership of the correction (exact: 0)


def _interior_flow_residual(model, w):
    res = apply_F(model, w).samples[1:-1]
    return float(np.max(np.linalg.norm(res, axis=1)))


def glue(model, cutoff, w_plus, w_minus, T, lt, strict=False,
         tol_zero=1e-12, h_max=None):
    """Glued flow line: Newton-Picard correction of the pre-glued path,
    with x0 = 0_T, D the linearization at 0_T and the exact discrete right
    inverse with K_T boundary structure."""
    if lt.T != float(T):
        raise ValueError("linear-theory bundle is for a different T")
    grid = lt.grid
    wt = preglue(model, cutoff, w_plus, w_minus, T, grid=grid)
    consts = lt.constants
    c = consts.c_rightinv
    delta = consts.delta4

    nflat = grid.n_nodes * model.dim

    def F(v):
        return apply_F(model, DiscretePath(grid, v.reshape(-1, model.dim))
                       ).samples.reshape(-1)

    def Dop(v):
        return apply_D(lt, DiscretePath(grid, v.reshape(-1, model.dim))
                       ).samples.reshape(-1)

    def Qop(v):
        return apply_Q_exact(lt, DiscretePath(grid, v.reshape(-1, model.dim))
                             ).samples.reshape(-1)

    def norm_dom(v):
        return norms(DiscretePath(grid, v.reshape(-1, model.dim))).w12

    def norm_cod(v):
        return l2_norm(DiscretePath(grid, v.reshape(-1, model.dim)))

    prob = NPProblem(F=F, apply_D=Dop, apply_Q=Qop,
                     x0=np.zeros(nflat), c=c, delta=delta,
                     norm_dom=norm_dom, norm_cod=norm_cod,
                     tol_zero=tol_zero)
    x1 = wt.samples.reshape(-1)
    pre_resid = l2_norm(apply_F(model, wt))
    if not strict:
        # operative contraction hypothesis: linearization deviation <= 1/(2c)
        # along the ball the iterates live in (sup bound via the pre-glue)
        rho2 = 2.0 * consts.delta_mu[2.0]
        if sup_norm(wt) > rho2:
            raise PreconditionError(
                "pre-glued path leaves the contraction ball: sup %.4g > %.4g"
                % (sup_norm(wt), rho2))
    res = np_solve(prob, x1, check=strict)
    gamma = DiscretePath(grid, res.x.reshape(-1, model.dim))
    corr = res.x - x1
    ns = model.n_stable
    bdefect = max(
        float(np.max(np.abs(corr.reshape(-1, model.dim)[0][:ns]))) if ns else 0.0,
        float(np.max(np.abs(corr.reshape(-1, model.dim)[-1][ns:])))
        if ns < model.dim else 0.0)
    ev_err = ev_error(model, gamma, w_plus, w_minus)
    return GlueReport(
        T=float(T), path=gamma, preglue_path=wt,
        preglue_resid_l2=pre_resid,
        np_iterations=res.iterations,
        residual_final=_interior_flow_residual(model, gamma),
        correction_norm=res.correction_norm,
        bound_2c_F=2.0 * c * pre_resid,
        contraction_ratio_max=res.contraction_ratio_max,
        ev_error=ev_err,
        cond1_resid_ok=res.precond["fx_ok"],
        cond1_norm_ok=res.precond["dx_ok"],
        boundary_defect=bdefect)


def ev_error(model, gamma, w_plus, w_minus):
    """|ev_T(glued path) - (w_+(0), w_-(0))| in the product Euclidean norm."""
    wp0 = w_plus.head.samples[0] if isinstance(w_plus, HalfTrajectory) \
        else w_plus.samples[0]
    wm0 = w_minus.head.samples[-1] if isinstance(w_minus, HalfTrajectory) \
        else w_minus.samples[-1]
    left = gamma.samples[0] - wp0
    right = gamma.samples[-1] - wm0
    return float(np.sqrt(np.sum(left**2) + np.sum(right**2)))


def linearized_glue_check(model, cutoff, lt, fd_eps=1e-4, S=None,
                          strict=False):
    """Central finite differences of the gluing map along the kernel basis
    directions at the origin, against the infinitesimal gluing map."""
    T = lt.T
    if S is None:
        S = 2.0 * T + 6.0
    h_max = lt.grid.h
    n = model.dim
    ns = model.n_stable
    worst = 0.0
    details = []
    for i in range(n):
        stable_dir = i < ns
        def glued_for(t):
            if stable_dir:
                seed_p = np.zeros(ns)
                seed_p[i] = t
                seed_m = np.zeros(n - ns)
            else:
                seed_p = np.zeros(ns)
                seed_m = np.zeros(n - ns)
                seed_m[i - ns] = t
            wp = shoot_stable(model, seed_p, S, h_max=h_max)
            wm = shoot_unstable(model, seed_m, S, h_max=h_max)
            return glue(model, cutoff, wp, wm, T, lt, strict=strict).path
        gp = glued_for(fd_eps)
        gm = glued_for(-fd_eps)
        fd = (gp.samples - gm.samples) / (2.0 * fd_eps)
        if stable_dir:
            ref = gamma_infinitesimal(lt, np.eye(ns)[i], np.zeros(n - ns))
        else:
            ref = gamma_infinitesimal(lt, np.zeros(ns), np.eye(n - ns)[i - ns])
        disc = float(np.max(np.abs(fd - ref.samples)))
        details.append(disc)
        worst = max(worst, disc)
    return {"sup_discrepancy": worst, "per_direction": details}


def convergence_sweep(model, cutoff, seeds, T_list, h_max=0.02, S=None,
                      constants=None, strict=False):
    """Evaluation-map convergence: ev error of the glued line over T, with a
    fitted exponential rate."""
    from .morse_model import compute_constants
    seed_p, seed_m = seeds
    if S is None:
        S = 2.0 * max(T_list) + 6.0
    if constants is None:
        constants = compute_constants(model)
    wp = shoot_stable(model, seed_p, S, h_max=h_max)
    wm = shoot_unstable(model, seed_m, S, h_max=h_max)
    rows = []
    for T in T_list:
        lt = LinearTheory(model, T, h_max, constants)
        rep = glue(model, cutoff, wp, wm, T, lt, strict=strict)
        rows.append({
            "T": float(T), "preglue_resid": rep.preglue_resid_l2,
            "np_iters": rep.np_iterations,
            "corr_norm": rep.correction_norm, "bound_2cF": rep.bound_2c_F,
            "ev_error": rep.ev_error,
        })
    Ts = np.array([r["T"] for r in rows])
    errs = np.array([r["ev_error"] for r in rows])
    mask = errs > 1e-14
    if np.count_nonzero(mask) >= 2:
        slope, intercept = np.polyfit(Ts[mask], np.log(errs[mask]), 1)
        y = np.log(errs[mask])
        pred = slope * Ts[mask] + intercept
        ss = float(np.sum((y - np.mean(y)) ** 2))
        r2 = 1.0 if ss == 0 else 1.0 - float(np.sum((y - pred) ** 2)) / ss
        rate_fit = -float(slope)
    else:
        rate_fit, r2 = float("inf"), 1.0
    return {"rows": rows, "rate_fit": rate_fit, "r2": r2}


# ---------------------------------------------------------------------------
# diffeomorphism criterion

def glue_coordinate_rep(model, cutoff, lt, S=None, strict=False,
                        scale=1.0):
    """Local-coordinate representative of the gluing map on weighted kernel
    coefficients: seeds -> boundary kernel coefficients of the glued path,
    orthonormalized by the exact coefficient weights so the linearization at
    0 matches the infinitesimal-gluing singular values."""
    from .linear_theory import gamma_weights
    T = lt.T
    if S is None:
        S = 2.0 * T + 6.0
    n = model.dim
    ns = model.n_stable
    dom_w, img_w = gamma_weights(lt)
    sd = np.sqrt(dom_w)
    si = np.sqrt(img_w)

    def F(u):
        u = np.asarray(u, dtype=float) * scale
        seed_p = u[:ns] / sd[:ns]
        seed_m = u[ns:] / sd[ns:]
        wp = shoot_stable(model, seed_p, S, h_max=lt.grid.h)
        wm = shoot_unstable(model, seed_m, S, h_max=lt.grid.h)
        rep = glue(model, cutoff, wp, wm, T, lt, strict=strict)
        v_plus = model.p_plus(rep.path.samples[0])
        v_minus = model.p_minus(rep.path.samples[-1])
        return np.concatenate([v_plus * si[:ns], v_minus * si[ns:]]) / scale

    return F


def diffeo_criterion(model, cutoff, lt, sample_count, rng, seed_box_radius,
                     fd_eps=1e-4, slack=None, n_pairs=200, n_preimages=20,
                     strict=False):
    """Certificate that the gluing map is a diffeomorphism onto its image on
    the (empirically certified) seed box: quantitative-IFT hypotheses with
    k from the infinitesimal-gluing inverse bound, plus the Theta_T smallness
    sample on the kernel basis."""
    consts = lt.constants
    k = consts.k_gamma_inv
    d = consts.d_proj
    if slack is None:
        slack = 1.0 + 5.0 * lt.grid.h
    F = glue_coordinate_rep(model, cutoff, lt, strict=strict,
                            scale=seed_box_radius)
    cert = ift_certificate(F, 1.0, k, sample_count, rng, dim=model.dim,
                           fd_eps=fd_eps, slack=slack, n_pairs=n_pairs,
                           n_preimages=n_preimages)
    theta_norm = theta_defect_norm(model, cutoff, lt, seed_box_radius)
    theta_bound = 1.0 / (8.0 * k * d)
    return {
        "ift": cert,
        "theta_norm": theta_norm,
        "theta_bound": theta_bound,
        "theta_ok": theta_norm <= theta_bound * slack,
    }


def theta_defect_norm(model, cutoff, lt, seed_radius, S=None):
    """Operator norm (exact on the finite kernel basis) of the pre-glued
    identification defect Theta_T at the corner of the seed box."""
    T = lt.T
    if S is None:
        S = 2.0 * T + 6.0
    n = model.dim
    ns = model.n_stable
    h_max = lt.grid.h
    wp = shoot_stable(model, [seed_radius] * ns, S, h_max=h_max)
    wm = shoot_unstable(model, [seed_radius] * (n - ns), S, h_max=h_max)
    outs = []
    from .linear_theory import gamma_weights
    dom_w, _ = gamma_weights(lt)
    for i in range(n):
        if i < ns:
            v = np.eye(ns)[i]
            xi_lin = DiscretePath(wp.grid, np.concatenate(
                [np.exp(-np.outer(wp.grid.nodes, model.a_plus)) * v,
                 np.zeros((wp.grid.n_nodes, n - ns))], axis=1))
            xi_pull, _ = theta_inverse(model, wp, v)
            diff_p = DiscretePath(wp.grid, xi_lin.samples - xi_pull.samples)
            diff_m = zero_path(wm.grid, n)
        else:
            v = np.eye(n - ns)[i - ns]
            eta_lin = DiscretePath(wm.grid, np.concatenate(
                [np.zeros((wm.grid.n_nodes, ns)),
                 np.exp(np.outer(wm.grid.nodes, model.a_minus)) * v], axis=1))
            eta_pull, _ = theta_inverse(model, wm, v)
            diff_p = zero_path(wp.grid, n)
            diff_m = DiscretePath(wm.grid, eta_lin.samples - eta_pull.samples)
        out = preglue(model, cutoff, diff_p, diff_m, T, grid=lt.grid)
        outs.append(out)
    # operator norm: Gram of outputs in W^{1,2} against the diagonal domain
    # weights of the kernel coefficient basis
    H = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            H[i, j] = H[j, i] = w12_inner(outs[i], outs[j])
    W = np.diag(dom_w)
    M = np.linalg.solve(np.sqrt(W), np.linalg.solve(np.sqrt(W), H).T)
    return float(np.sqrt(max(np.max(np.linalg.eigvalsh(M)), 0.0)))


# ---------------------------------------------------------------------------
# tangent sweeps

def measured_tangent_projection_norms(lt, rng, orders=(0, 1, 2)):
    """Measured ||d(T^m N)(0_T)|| for the requested orders: the differential
    at the origin is block diagonal with kernel-projection blocks, so the
    weighted-max-norm operator norm equals the projection norm for every m."""
    from .linear_theory import measured_projection_norm
    base = measured_projection_norm(lt, rng)
    return {m: base for m in orders}


def tangent_convergence_sweep(model, cutoff, seeds, tangent_seeds, T_list,
                              order_m=1, h_max=0.02, S=None, constants=None):
    """Pre-glue the tangent lifts componentwise, correct with the doubled
    Newton-Picard solve, and record the tangent evaluation errors over T."""
    from .morse_model import compute_constants
    if order_m == 0:
        return convergence_sweep(model, cutoff, seeds, T_list, h_max=h_max,
                                 S=S, constants=constants)
    if order_m != 1:
        raise ValueError("sweep supports m in {0, 1}")
    seed_p, seed_m = seeds
    tseed_p, tseed_m = tangent_seeds
    if S is None:
        S = 2.0 * max(T_list) + 6.0
    if constants is None:
        constants = compute_constants(model)
    spec1 = build_tangent_system(1)
    wp = shoot_stable(model, seed_p, S, h_max=h_max)
    wm = shoot_unstable(model, seed_m, S, h_max=h_max)
    lift_p = solve_tangent_lift(model, wp, spec1, [tseed_p])[0]
    lift_m = solve_tangent_lift(model, wm, spec1, [tseed_m])[0]
    rows = []
    for T in T_list:
        lt = LinearTheory(model, T, h_max, constants)
        grid = lt.grid
        wt = preglue(model, cutoff, wp, wm, T, grid=grid)
        xt = preglue(model, cutoff, lift_p, lift_m, T, grid=grid)

        def F(v):
            return apply_F(model, DiscretePath(grid, v.reshape(-1, model.dim))
                           ).samples.reshape(-1)

        def Dop(v):
            return apply_D(lt, DiscretePath(grid, v.reshape(-1, model.dim))
                           ).samples.reshape(-1)

        def Qop(v):
            return apply_Q_exact(
                lt, DiscretePath(grid, v.reshape(-1, model.dim))
            ).samples.reshape(-1)

        def norm_dom(v):
            return norms(DiscretePath(grid, v.reshape(-1, model.dim))).w12

        def norm_cod(v):
            return l2_norm(DiscretePath(grid, v.reshape(-1, model.dim)))

        def dF(x):
            xs = x.reshape(-1, model.dim)
            jac = np.stack([model.dgrad_tensor(z, 1) for z in xs])

            def apply(v):
                vs = v.reshape(-1, model.dim)
                lin = np.einsum("jab,jb->ja", jac, vs)
                return (differentiate(DiscretePath(grid, vs)).samples
                        + lin).reshape(-1)

            return apply

        prob = NPProblem(F=F, apply_D=Dop, apply_Q=Qop,
                         x0=np.zeros(grid.n_nodes * model.dim),
                         c=constants.c_rightinv, delta=constants.delta4,
                         norm_dom=norm_dom, norm_cod=norm_cod, dF=dF)
        (x, xi), res = np_tangent_solve(
            prob, wt.samples.reshape(-1), xt.samples.reshape(-1),
            c2=1.0 / (4.0 * constants.c_rightinv * constants.delta4),
            check=False)
        gamma = DiscretePath(grid, x.reshape(-1, model.dim))
        tgamma = DiscretePath(grid, xi.reshape(-1, model.dim))
        base_ev = ev_error(model, gamma, wp, wm)
        tev = np.sqrt(
            np.sum((tgamma.samples[0] - lift_p.samples[0]) ** 2)
            + np.sum((tgamma.samples[-1] - lift_m.samples[-1]) ** 2))
        rows.append({"T": float(T), "ev_error": base_ev,
                     "tangent_ev_error": float(tev),
                     "np_iters": res.iterations})
    Ts = np.array([r["T"] for r in rows])
    errs = np.array([max(r["tangent_ev_error"], 1e-300) for r in rows])
    mask = errs > 1e-14
    if np.count_nonzero(mask) >= 2:
        slope, _ = np.polyfit(Ts[mask], np.log(errs[mask]), 1)
        rate_fit = -float(slope)
    else:
        rate_fit = float("inf")
    return {"rows": rows, "rate_fit": rate_fit}
