"""Command-line harness: configuration ingestion, experiment orchestration,
result persistence, and the verification suite runner.

Exit codes: 0 pass, 1 usage/IO error, 2 verification failure.
"""

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile

import numpy as np

from .morse_model import (compute_constants, model_c1, model_e1,
                          model_from_config, parse_flat_config)
from .linear_theory import (LinearTheory, euclidean_gluing_reference,
                            gamma_svd_bounds, measured_projection_norm,
                            measured_q_norm)
from .invariant_manifolds import (decay_fit, digit_map, partitions,
                                  shoot_stable, shoot_unstable)
from .gluing import (certify_approx_zero, convergence_sweep, cubic_cutoff,
                     glue, measured_tangent_projection_norms, preglue,
                     quintic_cutoff, tangent_convergence_sweep)

FMT = "%.17g"


# ---------------------------------------------------------------------------
# configuration

class ConfigError(Exception):
    pass


_BUILTIN_MODELS = {"e1": model_e1, "c1": model_c1}


class ExperimentConfig:
    """Flat key = value experiment description.

    Keys: model (builtin name or path to a model config file), cutoff
    (quintic|cubic), seed_plus, seed_minus (comma lists), T_list, h, out,
    seed (rng), tol_zero, S, C_decay, debug_scale_q."""

    def __init__(self, raw, base_dir="."):
        self.raw = raw
        model_key = raw.get("model", "c1").strip()
        self.epsilon = None
        self.delta_max = 1.0
        if model_key.lower() in _BUILTIN_MODELS:
            self.model = _BUILTIN_MODELS[model_key.lower()]()
        else:
            path = os.path.join(base_dir, model_key)
            if not os.path.exists(path):
                raise ConfigError("model file not found: %s" % path)
            self.model, self.epsilon, self.delta_max = model_from_config(
                parse_flat_config(open(path, encoding="utf-8").read()))
        cname = raw.get("cutoff", "quintic").strip().lower()
        if cname == "quintic":
            self.cutoff = quintic_cutoff()
        elif cname == "cubic":
            self.cutoff = cubic_cutoff()
        else:
            raise ConfigError("unknown cutoff: %s" % cname)
        self.T_list = [float(t) for t in
                       raw.get("T_list", "3,4,5,6,7,8").split(",")]
        if sorted(self.T_list) != self.T_list or min(self.T_list) < 3:
            raise ConfigError("T_list must be sorted with min >= 3")
        self.h = float(raw.get("h", "0.02"))
        self.seed_plus = [float(v) for v in
                          raw.get("seed_plus", "0.3").split(",")]
        self.seed_minus = [float(v) for v in
                           raw.get("seed_minus", "0.3").split(",")]
        self.out = raw.get("out", ".")
        self.rng_seed = int(raw.get("seed", "0"))
        self.tol_zero = float(raw.get("tol_zero", "1e-12"))
        self.S = float(raw["S"]) if "S" in raw else 2.0 * max(self.T_list) + 6.0
        self.C_decay = float(raw["C_decay"]) if "C_decay" in raw else None
        self.debug_scale_q = float(raw.get("debug_scale_q", "1"))
        for k in ("h", "tol_zero"):
            if getattr(self, "h" if k == "h" else "tol_zero") <= 0:
                raise ConfigError("%s must be positive" % k)

    def rng(self):
        return np.random.default_rng(self.rng_seed)

    def constants(self):
        return compute_constants(self.model, epsilon=self.epsilon,
                                 delta_max=self.delta_max, rng=self.rng())


def load_config(path, out_override=None, seed_override=None):
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    raw = parse_flat_config(open(path, encoding="utf-8").read())
    cfg = ExperimentConfig(raw, base_dir=os.path.dirname(path) or ".")
    if out_override is not None:
        cfg.out = out_override
    if seed_override is not None:
        cfg.rng_seed = int(seed_override)
    return cfg


# ---------------------------------------------------------------------------
# persistence helpers

def _atomic_write(path, data):
    """Write bytes (or text) atomically: temp file in the target directory,
    then rename over the destination."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, newline="" if mode == "w" else None) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    """RFC-4180-style CSV: CRLF line endings, '.' decimal separator,
    17 significant digits."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            FMT % v if isinstance(v, float) else str(v) for v in row))
    _atomic_write(path, "\r\n".join(lines) + "\r\n")


def write_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def path_csv_rows(p):
    n = p.samples.shape[1]
    header = ["s"] + ["x%d" % (i + 1) for i in range(n)]
    rows = [[float(s)] + [float(v) for v in smp]
            for s, smp in zip(p.grid.nodes, p.samples)]
    return header, rows


def _n_workers():
    raw = os.environ.get("MGLUE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return max(1, n) if n else 1


def _map_ordered(fn, items):
    """Apply fn across items with the configured worker cap; results are
    returned in submission order regardless of completion order."""
    workers = _n_workers()
    if workers == 1:
        return [fn(it) for it in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# commands

def cmd_constants(cfg):
    model = cfg.model
    consts = cfg.constants()
    slack = 1.0 + 5.0 * cfg.h
    master = cfg.rng()

    jobs = [(T, int(master.integers(2**63))) for T in cfg.T_list]

    def one(job):
        T, sub_seed = job
        rng = np.random.default_rng(sub_seed)
        lt = LinearTheory(model, T, cfg.h, consts)
        pi = measured_projection_norm(lt, rng)
        q = measured_q_norm(lt, rng) * cfg.debug_scale_q
        gmax, gmin = gamma_svd_bounds(lt)
        return [T, pi, consts.d_proj, q, consts.c_rightinv,
                gmax, gmin, consts.k_gamma_inv]

    rows = _map_ordered(one, jobs)
    write_csv(os.path.join(cfg.out, "constants.csv"),
              ["T", "norm_Pi_measured", "d_bound", "norm_Q_measured",
               "c_bound", "gamma_opnorm", "gamma_minsv", "k_bound"], rows)
    ok = all(r[1] <= r[2] * slack and r[3] <= r[4] * slack
             and r[5] <= 1.0 + 1e-9 for r in rows)
    for r in rows:
        print("T=%g  Pi %.6g <= %.6g  Q %.6g <= %.6g  Gamma %.6g"
              % (r[0], r[1], r[2] * slack, r[3], r[4] * slack, r[5]))
    return 0 if ok else 2


def cmd_glue(cfg):
    model = cfg.model
    consts = cfg.constants()
    T = cfg.T_list[0]
    wp = shoot_stable(model, cfg.seed_plus, cfg.S, h_max=cfg.h)
    wm = shoot_unstable(model, cfg.seed_minus, cfg.S, h_max=cfg.h)
    lt = LinearTheory(model, T, cfg.h, consts)
    rep = glue(model, cfg.cutoff, wp, wm, T, lt, tol_zero=cfg.tol_zero)
    header, rows = path_csv_rows(rep.path)
    write_csv(os.path.join(cfg.out, "glued_path.csv"), header, rows)
    write_json(os.path.join(cfg.out, "glue_report.json"), {
        "iterations": rep.np_iterations,
        "residual_final": rep.residual_final,
        "correction_norm": rep.correction_norm,
        "bound_2c_f": rep.bound_2c_F,
        "contraction_ratio_max": rep.contraction_ratio_max,
    })
    print("glue T=%g: %d iterations, correction %.6g <= %.6g, ev error %.3g"
          % (T, rep.np_iterations, rep.correction_norm, rep.bound_2c_F,
             rep.ev_error))
    return 0


def _decay_prefactor(cfg, consts):
    if cfg.C_decay is not None:
        return cfg.C_decay
    T_fit = cfg.T_list if len(cfg.T_list) >= 2 else [3.0, 5.0, 7.0]
    fit = certify_approx_zero(
        cfg.model, cfg.cutoff,
        shoot_stable(cfg.model, cfg.seed_plus,
                     max(cfg.S, 2.0 * max(T_fit) + 2.0), h_max=cfg.h),
        shoot_unstable(cfg.model, cfg.seed_minus,
                       max(cfg.S, 2.0 * max(T_fit) + 2.0), h_max=cfg.h),
        T_fit, h_max=cfg.h)
    return 1.2 * fit["C_fit"]


def cmd_converge(cfg):
    model = cfg.model
    consts = cfg.constants()
    C = _decay_prefactor(cfg, consts)
    sw = convergence_sweep(model, cfg.cutoff, (cfg.seed_plus, cfg.seed_minus),
                           cfg.T_list, h_max=cfg.h, S=cfg.S, constants=consts)
    c = consts.c_rightinv
    rows = []
    for r in sw["rows"]:
        ev_bound = np.sqrt(2.0) * 4.0 * c * C * np.exp(
            -0.9 * consts.sigma * r["T"]) * 1.2
        rows.append([r["T"], r["preglue_resid"], r["np_iters"],
                     r["corr_norm"], r["bound_2cF"], r["ev_error"],
                     float(ev_bound)])
    write_csv(os.path.join(cfg.out, "converge.csv"),
              ["T", "preglue_resid", "np_iters", "corr_norm", "bound_2cF",
               "ev_error", "ev_bound"], rows)
    write_json(os.path.join(cfg.out, "converge_fit.json"),
               {"rate_fit": sw["rate_fit"], "r2": sw["r2"],
                "C_decay": float(C)})
    print("ev convergence: fitted rate %.4f (r2 %.6f) over T in %s"
          % (sw["rate_fit"], sw["r2"], cfg.T_list))
    return 0


def cmd_tangent(cfg):
    model = cfg.model
    consts = cfg.constants()
    t_seed_p = [1.0] * model.n_stable
    t_seed_m = [1.0] * model.index
    rows = []
    for m in (0, 1):
        sw = tangent_convergence_sweep(
            model, cfg.cutoff, (cfg.seed_plus, cfg.seed_minus),
            (t_seed_p, t_seed_m), cfg.T_list, order_m=m, h_max=cfg.h,
            S=cfg.S, constants=consts)
        for r in sw["rows"]:
            rows.append([float(m), r["T"], r["ev_error"],
                         r.get("tangent_ev_error", r["ev_error"]),
                         r["np_iters"]])
        print("m=%d sweep: rate %.4f" % (m, sw["rate_fit"]))
    write_csv(os.path.join(cfg.out, "tangent_sweep.csv"),
              ["m", "T", "ev_error", "tangent_ev_error", "np_iters"], rows)
    # differential-at-origin norm bounds for m in {0, 1, 2}
    slack = 1.0 + 5.0 * cfg.h
    master = cfg.rng()
    brows = []
    for T in cfg.T_list:
        lt = LinearTheory(model, T, cfg.h, consts)
        rng = np.random.default_rng(master.integers(2**63))
        ms = measured_tangent_projection_norms(lt, rng, orders=(0, 1, 2))
        for m, v in sorted(ms.items()):
            brows.append([float(m), T, v, consts.d_proj ** (2 ** m) * slack])
    write_csv(os.path.join(cfg.out, "tangent_norms.csv"),
              ["m", "T", "norm_measured", "bound"], brows)
    ok = all(r[2] <= r[3] for r in brows)
    return 0 if ok else 2


def cmd_decay(cfg):
    model = cfg.model
    for side, seed, shoot in (("stable", cfg.seed_plus, shoot_stable),
                              ("unstable", cfg.seed_minus, shoot_unstable)):
        half = shoot(model, seed, cfg.S, h_max=cfg.h)
        window = (2.0, cfg.S - 2.0) if side == "stable" \
            else (-(cfg.S - 2.0), -2.0)
        fit = decay_fit(half, window)
        header, rows = path_csv_rows(half.head)
        write_csv(os.path.join(cfg.out, "decay_%s.csv" % side), header, rows)
        write_json(os.path.join(cfg.out, "decay_%s.json" % side), {
            "side": side, "S": cfg.S, "residual": half.residual,
            "x0_or_y0": list(seed), "decay_rate": fit.rate, "r2": fit.r2,
        })
        print("%s: rate %.5f (r2 %.6f), flow residual %.3g"
              % (side, fit.rate, fit.r2, half.residual))
    return 0


# ---------------------------------------------------------------------------
# verification matrix

def _verify_checks(cfg):
    """Deterministic check matrix over the shipped models.  Yields
    (name, measured, bound, ok) tuples."""
    out = []

    def check(name, measured, bound, ok=None):
        if ok is None:
            ok = measured <= bound
        out.append((name, float(measured), float(bound), bool(ok)))

    rng = cfg.rng()
    e1 = model_e1()
    ce = compute_constants(e1, rng=np.random.default_rng(rng.integers(2**63)))
    check("E1 right-inverse constant c = sqrt(5)",
          abs(ce.c_rightinv - np.sqrt(5.0)), 1e-12)
    check("E1 projection constant d = 2*sqrt(2)",
          abs(ce.d_proj - 2.0 * np.sqrt(2.0)), 1e-12)
    check("E1 inverse-bound k", abs(ce.k_gamma_inv - 1.0 / (1.0 - np.exp(-12.0))),
          1e-12)

    beta = quintic_cutoff()
    T = 3.0
    lt = LinearTheory(e1, T, cfg.h, ce)
    gmax, gmin = gamma_svd_bounds(lt)
    check("E1 gamma operator norm", gmax, 1.0 + 1e-9)
    check("E1 gamma min singular value >= sqrt(1-e^-12)",
          np.sqrt(1.0 - np.exp(-12.0 * ce.sigma)) - 1e-9, gmin)

    S = 2.0 * T + 6.0
    wp = shoot_stable(e1, [0.5], S, h_max=cfg.h)
    wm = shoot_unstable(e1, [0.4], S, h_max=cfg.h)
    wt = preglue(e1, beta, wp, wm, T, grid=lt.grid)
    check("preglue left endpoint exact",
          np.max(np.abs(wt.samples[0] - wp.head.samples[0])), 0.0, ok=bool(
              np.all(wt.samples[0] == wp.head.samples[0])))
    plateau = np.abs(lt.grid.nodes) <= 1.0 + 1e-12
    check("preglue plateau is identically 0 on [-1,1]",
          np.max(np.abs(wt.samples[plateau])), 0.0,
          ok=bool(np.all(wt.samples[plateau] == 0.0)))

    rep = glue(e1, beta, wp, wm, T, lt, tol_zero=cfg.tol_zero)
    ref = euclidean_gluing_reference(e1, wp.head.samples[0],
                                     wm.head.samples[-1], T, grid=lt.grid)
    check("E1 glued path vs closed form (sup)",
          np.max(np.abs(rep.path.samples - ref.samples)), 5e-5)
    check("E1 correction count <= 2 iterations", rep.np_iterations, 2)
    check("E1 correction boundary structure exact", rep.boundary_defect, 1e-14)

    c1 = model_c1()
    cc = compute_constants(c1, rng=np.random.default_rng(rng.integers(2**63)))
    ltc = LinearTheory(c1, T, cfg.h, cc)
    wpc = shoot_stable(c1, [0.3], S, h_max=cfg.h)
    wmc = shoot_unstable(c1, [0.3], S, h_max=cfg.h)
    repc = glue(c1, beta, wpc, wmc, T, ltc, tol_zero=cfg.tol_zero)
    check("C1 glued flow residual (interior sup)", repc.residual_final,
          10.0 * cfg.tol_zero)
    check("C1 correction norm <= 2 c ||F(w_T)||",
          repc.correction_norm, repc.bound_2c_F * 1.01)
    check("C1 contraction ratio", repc.contraction_ratio_max, 0.55)
    fit = decay_fit(wpc, (2.0, S - 2.0))
    check("C1 stable-trajectory decay rate >= 0.9 sigma",
          0.9 * cc.sigma, fit.rate)

    m_rng = np.random.default_rng(rng.integers(2**63))
    pi = measured_projection_norm(ltc, m_rng)
    check("C1 measured projection norm <= d (1+5h)", pi,
          cc.d_proj * (1.0 + 5.0 * cfg.h))
    q = measured_q_norm(ltc, m_rng)
    check("C1 measured right-inverse norm <= c (1+5h)", q,
          cc.c_rightinv * (1.0 + 5.0 * cfg.h))

    check("digit set of 9 is {1,4}", 0.0, 0.0,
          ok=digit_map(9) == {1, 4})
    n_parts = len(partitions({1, 2, 3}, 2))
    check("partition count of a 3-set into 2 blocks", n_parts, 3,
          ok=n_parts == 3)
    return out


def cmd_verify(cfg):
    checks = _verify_checks(cfg)
    lines = []
    all_ok = True
    for name, measured, bound, ok in checks:
        all_ok &= ok
        line = "%-55s  measured %- .10e  bound %- .10e  %s" % (
            name, measured, bound, "PASS" if ok else "FAIL")
        lines.append(line)
        print(line)
    lines.append("overall: %s" % ("PASS" if all_ok else "FAIL"))
    print(lines[-1])
    _atomic_write(os.path.join(cfg.out, "verify_report.txt"),
                  "\r\n".join(lines) + "\r\n")
    return 0 if all_ok else 2


# ---------------------------------------------------------------------------

COMMANDS = {
    "constants": cmd_constants,
    "glue": cmd_glue,
    "converge": cmd_converge,
    "tangent": cmd_tangent,
    "decay": cmd_decay,
    "verify": cmd_verify,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mglue",
        description="Gluing laboratory for Morse gradient flow lines.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        cfg = load_config(args.config, out_override=args.out,
                          seed_override=args.seed)
    except (ConfigError, OSError, ValueError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg)
    except (OSError,) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
