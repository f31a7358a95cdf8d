"""Batch driver: `kinetic-parametrix <command> [--config FILE] [--seed N] [--out DIR] ...`.

Exit codes: 0 all enabled checks pass, 1 some check failed, 2 bad config.
Reports are written only after every check has run, so a rejected config
leaves no files behind.
"""
import argparse
import copy
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backward_solver as bs
from . import gaussian_kernel as gk
from . import langevin_sim as ls
from . import measure_tools as mt
from . import mollifier as mo
from . import parametrix as pm
from .drift_fields import BUILTIN, make_field
from .test_functions import compact_bump, gaussian_bump

SCHEMA_VERSION = "1.0"
COMMANDS = ("kernel", "parametrix", "backward", "simulate", "mollify", "diagnose-series", "verify-all")

DEFAULTS = {
    "field": {"kind": "holder", "params": {}},
    "parametrix": {"sigma": 1.0, "N": 3, "delta": 0.1, "eps": 0.2, "eta": 0.5, "beta": 0.5, "time_order": 12,
                   "space_order": 16, "leaf_budget": 100_000, "T": 1.0},
    "simulation": {"T": 1.0, "dt": 0.01, "n_paths": 20_000, "block_size": 8192,
                   "radii": [4.0, 8.0, 16.0, 32.0, 64.0, 128.0], "smoothness": 1.0,
                   "initial": {"kind": "point", "z0": [0.0, 0.0], "std": []}},
    "mollifier": {"order": 12, "eps": [0.5, 0.25, 0.125]},
    "tolerances": {"normalization": 1e-8, "chapman_kolmogorov": 1e-12, "pde_residual": 1e-4,
                   "dilation": 1e-10, "zero_collapse": 1e-12, "constant_oracle": 1e-2, "mass": 1e-2,
                   "strong_residual": 1e-3, "linearity": 1e-10, "rho_mass": 1e-6, "se_multiple": 3.0},
}

TOP_KEYS = {"field", "parametrix", "simulation", "mollifier", "tolerances", "seed", "convention", "command"}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {where}{key!r}")
        if isinstance(defaults[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key!r} must be an object")
            out[key] = _merge(defaults[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path=None, seed=None, convention=None, threads=None) -> dict:
    """Read and validate a JSON config; every object built here so errors surface before any work."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    extra = set(raw) - TOP_KEYS
    if extra:
        raise ConfigError(f"unknown key {sorted(extra)[0]!r}")
    cfg = _merge({k: v for k, v in DEFAULTS.items()}, {k: raw[k] for k in DEFAULTS if k in raw}, "")
    cfg["seed"] = raw.get("seed", 0) if seed is None else seed
    cfg["convention"] = raw.get("convention", "generator") if convention is None else convention
    cfg["threads"] = 1 if threads is None else threads
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    if cfg["convention"] not in ("paper", "generator"):
        raise ConfigError("convention must be 'paper' or 'generator'")
    if cfg["field"]["kind"] not in BUILTIN:
        raise ConfigError(f"unknown field kind {cfg['field']['kind']!r}")
    try:
        build(cfg)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


@dataclass
class Built:
    field: object
    pcfg: pm.ParametrixConfig
    scfg: ls.SimConfig
    kernel: mo.MollifierKernel
    convention: gk.CovarianceConvention


def build(cfg: dict) -> Built:
    allowed = {"zero": set(), "constant": {"c"}, "oscillatory": {"amplitude"},
               "holder": {"scale", "beta", "direction_seed"}}[cfg["field"]["kind"]]
    params = cfg["field"]["params"]
    if not isinstance(params, dict) or set(params) - allowed:
        raise ConfigError(f"field params must be a subset of {sorted(allowed)}")
    fld = make_field(cfg["field"]["kind"], 1, **params)
    conv = gk.CovarianceConvention(cfg["convention"])
    pcfg = pm.ParametrixConfig(seed=cfg["seed"], convention=conv, **cfg["parametrix"])
    sim = dict(cfg["simulation"])
    init = sim.pop("initial")
    initial = ls.InitialLaw(kind=init["kind"], z0=tuple(init["z0"]), std=tuple(init["std"]))
    scfg = ls.SimConfig(sigma=pcfg.sigma, seed=cfg["seed"], initial=initial, threads=cfg["threads"],
                        radii=tuple(sim.pop("radii")), **sim)
    mcfg = cfg["mollifier"]
    if not mcfg["eps"] or any(e <= 0 for e in mcfg["eps"]):
        raise ConfigError("mollifier eps list must be positive")
    for k, v in cfg["tolerances"].items():
        if not isinstance(v, (int, float)) or v <= 0:
            raise ConfigError(f"tolerance {k!r} must be a positive number")
    return Built(fld, pcfg, scfg, mo.MollifierKernel(1, mcfg["order"]), conv)


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    relation: str
    passed: bool
    note: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "value": _num(self.value), "tolerance": _num(self.tolerance),
                "relation": self.relation, "passed": bool(self.passed), "note": self.note}


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def below(name, value, tol, note="") -> Check:
    value = float(value)
    return Check(name, value, float(tol), "<=", bool(value <= tol), note)


def above(name, value, tol, note="") -> Check:
    value = float(value)
    return Check(name, value, float(tol), ">=", bool(value >= tol), note)


def flag(name, ok, note="") -> Check:
    return Check(name, 1.0 if ok else 0.0, 1.0, "==", bool(ok), note)


@dataclass
class Result:
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)


# ---- commands -------------------------------------------------------------

def cmd_kernel(b: Built, cfg: dict) -> Result:
    tol = cfg["tolerances"]
    lam, conv = b.pcfg.sigma, b.convention
    rng = gk.stream(cfg["seed"], 101)
    res = Result()
    worst = 0.0
    for h, z, y in [(0.5, [0.2, -0.1], [0.3, 0.4]), (1.0, [0.0, 0.0], [0.5, 1.0])]:
        oy, oz = gk.normalization_integrals(lam, h, np.array(z), np.array(y), conv)
        worst = max(worst, abs(oy - 1), abs(oz - 1))
    res.checks.append(below("kernel.normalization", worst, tol["normalization"]))
    ck = 0.0
    for _ in range(100):
        s, tau, t = np.sort(rng.uniform(0, 2, 3))
        z, y = rng.normal(size=2), rng.normal(size=2)
        ck = max(ck, gk.chapman_kolmogorov_check(lam, s, tau, t, z, y, conv))
    res.checks.append(below("kernel.chapman_kolmogorov", ck, tol["chapman_kolmogorov"]))
    pde = gk.kernel_pde_residual(lam, 1.0, np.array([0.3, -0.2]), np.linspace(0.1, 0.8, 5),
                                 rng.normal(size=(6, 2)), conv)
    note = "" if pde.ok else pde.message
    res.checks.append(below("kernel.pde_residual", pde.max_rel_residual, tol["pde_residual"], note))
    z, y = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))
    scal = max(float(np.max(gk.dilation_scaling_residual(lam, r, 0.1, z, 0.7, y, conv))) for r in (0.5, 2.0, 3.0))
    res.checks.append(below("kernel.dilation_scaling", scal, tol["dilation"]))
    return res


def _oracle_grid():
    pts = []
    for x in (-0.5, 0.5):
        for v in (-0.5, 0.5):
            pts.append((0.0, np.array([0.0, 0.0]), 0.5, np.array([x, v])))
    return pts


def cmd_parametrix(b: Built, cfg: dict) -> Result:
    tol = cfg["tolerances"]
    res = Result()
    zero = make_field("zero")
    pts = _oracle_grid()
    collapse = max(abs(pm.eval_p(zero, b.pcfg, s, z, t, y, with_tail=False).value
                       - float(gk.eval_P(b.pcfg.sigma, s, z, t, y, b.convention))) for s, z, t, y in pts)
    res.checks.append(below("parametrix.zero_collapse", collapse, tol["zero_collapse"]))
    const = make_field("constant", c=0.5)
    rows, errs = [], []
    for N in range(b.pcfg.N + 1):
        cN = pm.ParametrixConfig(**{**_pdict(b.pcfg), "N": N})
        e = max(abs(pm.eval_p(const, cN, s, z, t, y, with_tail=False).value
                    / float(pm.constant_drift_density(0.5, cN.sigma, s, z, t, y, b.convention)) - 1)
                for s, z, t, y in pts)
        errs.append(e)
        rows.append([N, e])
    res.tables["parametrix_constant_oracle"] = (["N", "max_relative_error"], rows)
    res.checks.append(below("parametrix.constant_oracle", errs[-1], tol["constant_oracle"]))
    res.checks.append(flag("parametrix.monotone_in_N", all(b2 <= a for a, b2 in zip(errs, errs[1:]))))
    mass = pm.normalization(b.field, b.pcfg, 0.0, np.array([0.2, 0.1]), 0.5, order=6)
    res.checks.append(below("parametrix.mass", abs(mass - 1), tol["mass"], f"field={b.field.name}"))
    grid = [(0.0, np.array([0.0, 0.0]), 0.5, np.array([x, v])) for x in (-0.5, 0.5) for v in (-1.0, 1.0)]
    sw = pm.gaussian_sandwich_check(b.field, b.pcfg, grid)
    res.checks.append(flag("parametrix.sandwich", sw.passed,
                           f"C_upper={sw.C_upper:.6g} c_lower={sw.c_lower:.6g} lam_lower={sw.lam_lower:.6g}"))
    res.checks.append(above("parametrix.min_p", sw.min_p, 0.0))
    return res


def _pdict(p: pm.ParametrixConfig) -> dict:
    from dataclasses import asdict
    return asdict(p)


def cmd_backward(b: Built, cfg: dict) -> Result:
    tol = cfg["tolerances"]
    res = Result()
    center, width = [0.3, -0.2], 0.8
    psi = gaussian_bump(center, width)
    u = lambda p: bs.driftless_gaussian_u(center, width, 1.0, b.pcfg.sigma, 1.0, p[..., 0], p[..., 1:],
                                          convention=b.convention)
    rng = gk.stream(cfg["seed"], 102)
    grid = np.column_stack([rng.uniform(0, 0.9, 50), rng.uniform(-2, 2, (50, 2))])
    r = bs.strong_lie_residual(u, make_field("zero"), b.pcfg.sigma, grid, Psi=lambda p: psi(p[..., 1:]),
                               psi_sup=psi.sup)
    res.checks.append(below("backward.strong_residual_driftless", r.max_residual, tol["strong_residual"]))
    z = rng.normal(size=(2, 2))
    prob = bs.source_problem(psi)
    u1 = bs.solve_u(prob, b.field, b.pcfg, 0.3, z, time_order=3)
    u2 = bs.solve_u(bs.source_problem(psi.scaled(2.5)), b.field, b.pcfg, 0.3, z, time_order=3)
    res.checks.append(below("backward.linearity", np.max(np.abs(u2 - 2.5 * u1)), tol["linearity"]))
    res.checks.append(below("backward.sup_bound", np.max(np.abs(u1)), prob.T * psi.sup))
    rows = bs.terminal_attainment(bs.BackwardProblem(T=1.0, g=psi), b.field, b.pcfg, z[:1],
                                  gaps=(0.5, 0.25, 0.125, 0.0625))
    res.tables["backward_terminal"] = (["gap", "sup_abs_u_minus_g"], [list(r_) for r_ in rows])
    sim = ls.SimConfig(**{**_sdict(b.scfg), "n_paths": min(b.scfg.n_paths, 4000)})
    ens = ls.euler_maruyama(b.field, sim, store_times=sim.grid)
    flow = ls.empirical_flow(ens)
    # at t = 0 a point-mass start needs u at a single point
    point = b.scfg.initial.kind == "point"
    du = bs.duality_identity_check(lambda zz: bs.solve_u(prob, b.field, b.pcfg, 0.0, zz, time_order=8), psi,
                                   flow, 0.0, lhs_paths=1 if point else 16)
    res.checks.append(below("backward.duality", du.residual, tol["se_multiple"] * du.combined_se,
                            "residual vs se_multiple x combined SE"))
    return res


def _sdict(s: ls.SimConfig) -> dict:
    from dataclasses import fields
    return {f.name: getattr(s, f.name) for f in fields(s)}


def cmd_simulate(b: Built, cfg: dict) -> Result:
    tol = cfg["tolerances"]
    res = Result()
    s = b.scfg
    k = tol["se_multiple"]
    store = np.round(np.linspace(0, s.T, 5) / s.dt) * s.dt
    ens = ls.localized_solve(b.field, s, store_times=s.grid)
    res.checks.append(flag("simulate.stopping_monotone", bool(ls.stopping_times_monotone(ens).all())))
    res.checks.append(above("simulate.unflagged_paths", float(np.sum(~ens.flagged)), float(s.n_paths)))
    mom = ls.moment_bound_check(ens, b.field, s.initial, s.sigma, s.T)
    res.checks.append(below("simulate.gronwall_violations", mom.gronwall_violations, 0))
    if mom.doob_ok is not None:
        res.checks.append(below("simulate.E_sup_V", mom.E_sup_V, mom.H1_V, mom.sup_F_note))
        res.checks.append(below("simulate.E_sup_Z", mom.E_sup_Z, mom.H1, mom.sup_F_note))
    flow = ls.empirical_flow(ens)
    psi = compact_bump([0.3, 0.2], 2.0)
    rows = []
    for t in store[1:]:
        w = ls.weak_solution_residual(flow, b.field, s.sigma, psi, float(t), s.dt)
        rows.append([float(t), w.residual, w.se, w.budget])
        res.checks.append(below(f"simulate.weak_residual_t{t:g}", abs(w.residual), k * w.se + w.budget))
    res.tables["simulate_weak_residual"] = (["t", "residual", "se", "budget"], rows)
    fin = ens.final[~ens.flagged]
    res.tables["simulate_summary"] = (["quantity", "value"], [
        ["mean_X_T", float(fin[:, 0].mean())], ["mean_V_T", float(fin[:, 1].mean())],
        ["var_X_T", float(fin[:, 0].var(ddof=1))], ["var_V_T", float(fin[:, 1].var(ddof=1))],
        ["E_sup_V", mom.E_sup_V], ["E_sup_X", mom.E_sup_X], ["E_sup_Z", mom.E_sup_Z],
        ["continuity_modulus", mt.flow_continuity_modulus(ls.empirical_flow(ens, store))]])
    return res


def cmd_mollify(b: Built, cfg: dict) -> Result:
    tol = cfg["tolerances"]
    res = Result()
    K = b.kernel
    mass = max(abs(mo.quadrature_mass(K, e) - 1) for e in (1.0, 0.5, 0.1))
    res.checks.append(below("mollify.rho_mass", mass, tol["rho_mass"]))
    sup = [mo.support_check(K, e, seed=cfg["seed"]) for e in (1.0, 0.1)]
    res.checks.append(flag("mollify.support", all(x["outside"] == 0 and x["nonnegative"] for x in sup)))
    rng = gk.stream(cfg["seed"], 103)
    grid = np.column_stack([rng.uniform(0.5, 1.0, 100), rng.uniform(-1, 1, (100, 2))])
    bump = lambda p: np.exp(-np.sum(p**2, axis=-1))
    ybump = lambda p: bump(p) * (-2 * p[..., 0] - 2 * p[..., 1] * p[..., 2])
    cm = mo.commutation_check(K, 0.2, bump, ybump, grid)
    res.checks.append(below("mollify.commutation", cm.max_residual, cm.budget))
    eps = cfg["mollifier"]["eps"]
    e0 = min(eps)
    hw = 0.05 * np.array([e0**2 / 9, e0**3 / 27, e0**3 / 27])
    c = np.array([0.5, 0.0, 0.0])
    narrow = lambda p: np.prod(mo._bump((p - c) / hw), axis=-1)
    fit = mo.derivative_bound_check(K, narrow, c - hw, c + hw, eps_list=eps)
    for key in ("t", "x", "v_proof"):
        res.checks.append(below(f"mollify.derivative_spread_{key}", fit.spread[key], 3.0))
    res.tables["mollify_derivative_constants"] = (["derivative", *[f"eps={e:g}" for e in eps], "spread"],
                                                  [[k, *v, fit.spread[k]] for k, v in fit.constants.items()])
    s = ls.SimConfig(**{**_sdict(b.scfg), "n_paths": min(b.scfg.n_paths, 2000)})
    ens = ls.euler_maruyama(b.field, s, store_times=np.round(np.linspace(0, s.T, 21) / s.dt) * s.dt)
    flow = ls.empirical_flow(ens)
    f = lambda p: b.field.evaluator(p[..., 0], p[..., 1:])
    gb = compact_bump([0.0, 0.0], 2.0)
    G = lambda p: gb.grad(p[..., 1:])[..., 1:]
    tab = mo.caratheodory_limit_check(K, f, G, flow, 0.25, s.T, order=6)
    res.tables["mollify_caratheodory"] = (["eps", "difference", "mean_abs_difference"],
                                          [[e, d_, a] for e, d_, a in zip(tab.eps, tab.differences,
                                                                          tab.mean_abs_differences)])
    res.checks.append(flag("mollify.caratheodory_decreasing", tab.decreasing))
    res.checks.append(below("mollify.caratheodory_final", tab.differences[-1], 3 * tab.reference_se))
    return res


def cmd_diagnose(b: Built, cfg: dict) -> Result:
    res = Result()
    pcfg = pm.ParametrixConfig(**{**_pdict(b.pcfg), "time_order": 8, "space_order": 12})
    eval_set = [(0.0, np.array([0.0, 0.0]), 0.5, np.array([0.2, 0.3]))]
    rep = pm.series_convergence_report(b.field, pcfg, eval_set, n_max=3)
    rows = [[n + 1, float(rep.term_sup[n]), float(rep.bounds[n])] for n in range(len(rep.term_sup))]
    res.tables["diagnose_series"] = (["n", "sup_phi_n", "term_bound"], rows)
    res.checks.append(flag("series.bounds_hold", rep.bound_holds))
    res.checks.append(below("series.eps_sum", rep.eps_sum, 1.0 - 1e-15))
    res.checks.append(flag("series.summable", rep.summable))
    return res


RUNNERS = {"kernel": cmd_kernel, "parametrix": cmd_parametrix, "backward": cmd_backward,
           "simulate": cmd_simulate, "mollify": cmd_mollify, "diagnose-series": cmd_diagnose}


def run(command: str, cfg: dict) -> Result:
    b = build(cfg)
    if command == "verify-all":
        out = Result()
        for name in RUNNERS:
            r = RUNNERS[name](b, cfg)
            out.checks.extend(r.checks)
            out.tables.update(r.tables)
        return out
    return RUNNERS[command](b, cfg)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def render(command: str, cfg: dict, result: Result) -> dict:
    """File name -> text; JSON with sorted keys so equal inputs give equal bytes."""
    failures = [c.as_dict() for c in result.checks if not c.passed]
    report = {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg["seed"],
              "convention": cfg["convention"], "config": {k: v for k, v in cfg.items() if k != "threads"},
              "checks": [c.as_dict() for c in result.checks], "failures": failures, "passed": not failures}
    files = {"report.json": json.dumps(report, sort_keys=True, indent=2, default=_num) + "\n",
             "checks.csv": _csv_text(["name", "value", "tolerance", "relation", "passed", "note"],
                                     [[c.name, c.value, c.tolerance, c.relation, c.passed, c.note]
                                      for c in result.checks])}
    for name, (header, rows) in sorted(result.tables.items()):
        files[f"{name}.csv"] = _csv_text(header, rows)
    return files


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kinetic-parametrix", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--convention", choices=("paper", "generator"))
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("threads must be >= 1")
        cfg = load_config(args.config, args.seed, args.convention, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    result = run(args.command, cfg)
    files = render(args.command, cfg, result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    failed = [c for c in result.checks if not c.passed]
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.6g} {c.relation} {c.tolerance:.6g}"
              + (f"  [{c.note}]" if c.note else ""))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
