"""Euler-Maruyama paths of dX = V dt, dV = F dt + sqrt(2 sigma) dB, with cutoff localization.

Noise is drawn per block of `block_size` paths from a stream keyed by
(seed, block index), so a path is reproducible from (seed, path index) no
matter how blocks are scheduled across threads.
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .drift_fields import DriftField
from .gaussian_kernel import stream

NOISE_KEY, INIT_KEY = 0, 1
MAGIC = b"KPPATHS1"


@dataclass(frozen=True)
class InitialLaw:
    """Point mass at `z0`, product Gaussian N(mean, std^2), or a fixed sample array."""
    kind: str = "point"
    z0: tuple = (0.0, 0.0)
    std: tuple = ()
    samples: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "samples"):
            raise ValueError(f"unknown initial law {self.kind!r}")
        if self.kind == "samples" and self.samples is None:
            raise ValueError("sample law needs a sample array")
        if self.kind == "gaussian" and len(self.std) != len(self.z0):
            raise ValueError("std must match z0")

    @property
    def dim(self) -> int:
        return np.shape(self.samples)[-1] if self.kind == "samples" else len(self.z0)

    def draw(self, rng: np.random.Generator, first: int, count: int) -> np.ndarray:
        if self.kind == "point":
            return np.tile(np.asarray(self.z0, dtype=float), (count, 1))
        if self.kind == "gaussian":
            return np.asarray(self.z0) + np.asarray(self.std) * rng.standard_normal((count, len(self.z0)))
        s = np.asarray(self.samples, dtype=float)
        return s[(first + np.arange(count)) % len(s)]

    def first_moment(self, n: int = 200_000, seed: int = 0) -> float:
        """M1 = E|Z0| (exact for a point mass)."""
        if self.kind == "point":
            return float(np.linalg.norm(self.z0))
        if self.kind == "samples":
            return float(np.mean(np.linalg.norm(self.samples, axis=-1)))
        return float(np.mean(np.linalg.norm(self.draw(stream(seed, 99), 0, n), axis=-1)))


@dataclass(frozen=True)
class SimConfig:
    sigma: float = 1.0
    T: float = 1.0
    dt: float = 0.01
    n_paths: int = 10_000
    seed: int = 0
    initial: InitialLaw = InitialLaw()
    radii: tuple = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
    smoothness: float = 1.0
    block_size: int = 8192
    threads: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("T and dt must be positive")
        if abs(self.T / self.dt - round(self.T / self.dt)) > 1e-9:
            raise ValueError("T/dt must be an integer")
        if self.n_paths < 1 or self.block_size < 1:
            raise ValueError("need at least one path per block")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or (self.radii and self.radii[0] < 1):
            raise ValueError("radii must be >= 1 and strictly increasing")
        if self.initial.dim % 2:
            raise ValueError("initial law must live on R^(2d)")

    @property
    def d(self) -> int:
        return self.initial.dim // 2

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def blocks(self):
        for b, first in enumerate(range(0, self.n_paths, self.block_size)):
            yield b, first, min(self.block_size, self.n_paths - first)


@dataclass
class PathEnsemble:
    """Simulated paths; `samples` holds the stored subgrid, `final` the state at T.

    `exit_times[r]` is the first grid time with |Z| > r under the cutoff at
    radius r (inf if the path stayed inside); `radius_used` is the ladder rung
    each path finished on. Sup statistics are Euclidean and over the full grid.
    """
    times: np.ndarray
    samples: Optional[np.ndarray]
    final: np.ndarray
    initial: np.ndarray
    flagged: np.ndarray
    dt: float
    shared_noise: bool = False
    exit_times: dict = field(default_factory=dict)
    radius_used: Optional[np.ndarray] = None
    sup_v: Optional[np.ndarray] = None
    sup_x: Optional[np.ndarray] = None
    sup_z: Optional[np.ndarray] = None
    sup_b: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.final.shape[0]

    @property
    def d(self) -> int:
        return self.final.shape[-1] // 2


@dataclass
class EmpiricalFlow:
    times: np.ndarray
    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("weights must be nonnegative and sum to one at each time")

    def mean(self, f: Callable[[np.ndarray], np.ndarray], k: int) -> float:
        vals = f(self.samples[k])
        return float(np.sum(self.weights[k] * np.where(self.weights[k] > 0, vals, 0.0)))


def _safe_drift(field_: DriftField, t: float, z: np.ndarray, alive: np.ndarray) -> np.ndarray:
    """Drift with failures (exceptions or non-finite rows) turned into dead paths."""
    try:
        with np.errstate(all="ignore"):
            out = np.asarray(field_.evaluator(np.full(z.shape[0], t), z), dtype=float)
        out = np.broadcast_to(out, z.shape[:-1] + (field_.d,))
    except (FloatingPointError, ValueError, ArithmeticError):
        alive[:] = False
        return np.zeros(z.shape[:-1] + (field_.d,))
    bad = ~np.all(np.isfinite(out), axis=-1)
    if bad.any():
        alive &= ~bad
        out = np.where(bad[:, None], 0.0, out)
    return out


def _store_indices(config: SimConfig, store_times) -> np.ndarray:
    if store_times is None:
        return np.zeros(0, dtype=int)
    idx = np.rint(np.asarray(store_times, dtype=float) / config.dt).astype(int)
    if np.any(np.abs(idx * config.dt - np.asarray(store_times)) > 1e-9) or np.any(idx < 0) or np.any(idx > config.steps):
        raise ValueError("store times must lie on the simulation grid")
    return idx


def _run_block(field_: DriftField, config: SimConfig, b: int, first: int, count: int, store_idx: np.ndarray,
               track_sup: bool, exit_radius: Optional[float] = None, observer=None):
    d, dt, steps = config.d, config.dt, config.steps
    z0 = config.initial.draw(stream(config.seed, INIT_KEY, b), first, count)
    rng = stream(config.seed, NOISE_KEY, b)
    x, v = z0[:, :d].copy(), z0[:, d:].copy()
    alive = np.ones(count, dtype=bool)
    scale = np.sqrt(2 * config.sigma * dt)
    stored = np.empty((len(store_idx), count, 2 * d))
    pos = {int(k): i for i, k in enumerate(store_idx)}
    sups = None
    if track_sup:
        bm = np.zeros((count, d))
        sups = [np.linalg.norm(v, axis=1), np.linalg.norm(x, axis=1), np.linalg.norm(z0, axis=1), np.zeros(count)]
    exit_step = np.full(count, -1)
    if exit_radius is not None:
        out0 = np.linalg.norm(z0, axis=1) > exit_radius
        exit_step[out0] = 0

    def record(k):
        if k in pos:
            stored[pos[k]] = np.concatenate([x, v], axis=1)
        if observer is not None:
            observer(b, k, k * dt, np.concatenate([x, v], axis=1))

    record(0)
    for k in range(steps):
        xi = rng.standard_normal((count, d))
        f = _safe_drift(field_, k * dt, np.concatenate([x, v], axis=1), alive)
        x += v * dt
        v += f * dt + scale * xi
        if not alive.all():
            x[~alive] = np.nan
            v[~alive] = np.nan
        if track_sup:
            bm += np.sqrt(dt) * xi
            nv, nx = np.linalg.norm(v, axis=1), np.linalg.norm(x, axis=1)
            np.fmax(sups[0], nv, out=sups[0])
            np.fmax(sups[1], nx, out=sups[1])
            np.fmax(sups[2], np.hypot(nx, nv), out=sups[2])
            np.fmax(sups[3], np.linalg.norm(bm, axis=1), out=sups[3])
        if exit_radius is not None:
            newly = (exit_step < 0) & (np.hypot(np.linalg.norm(x, axis=1), np.linalg.norm(v, axis=1)) > exit_radius)
            exit_step[newly] = k + 1
        record(k + 1)
    return dict(z0=z0, final=np.concatenate([x, v], axis=1), stored=stored, alive=alive, sups=sups,
                exit_step=exit_step)


def _map_blocks(fn, config: SimConfig):
    jobs = list(config.blocks())
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            return list(pool.map(lambda j: fn(*j), jobs))
    return [fn(*j) for j in jobs]


def euler_maruyama(field_: DriftField, config: SimConfig, store_times=None, track_sup: bool = False,
                   observer=None) -> PathEnsemble:
    """Simulate all paths; states are kept only at `store_times` (plus the endpoint).

    `observer(block, step, t, Z)` is called at every grid time if given.
    """
    if field_.d != config.d:
        raise ValueError("field and initial law dimensions differ")
    idx = _store_indices(config, store_times)
    res = _map_blocks(lambda b, first, count: _run_block(field_, config, b, first, count, idx, track_sup,
                                                         observer=observer), config)
    return _assemble(res, config, idx, track_sup)


def _assemble(res, config, idx, track_sup, **extra) -> PathEnsemble:
    cat = lambda key: np.concatenate([r[key] for r in res], axis=0)
    ens = PathEnsemble(
        times=idx * config.dt,
        samples=np.concatenate([r["stored"] for r in res], axis=1) if len(idx) else None,
        final=cat("final"), initial=cat("z0"), flagged=~cat("alive"), dt=config.dt, **extra)
    if track_sup:
        ens.sup_v, ens.sup_x, ens.sup_z, ens.sup_b = (np.concatenate([r["sups"][i] for r in res]) for i in range(4))
    return ens


def _smooth_step(s, smoothness):
    """C-infinity transition: 1 for s <= 0, 0 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(s < 1, np.exp(-smoothness / np.where(s < 1, 1 - s, 1.0)), 0.0)
        b = np.where(s > 0, np.exp(-smoothness / np.where(s > 0, s, 1.0)), 0.0)
    return np.where(s <= 0, 1.0, np.where(s >= 1, 0.0, a / (a + b)))


def cutoff_profile(z, radius: float, smoothness: float = 1.0) -> np.ndarray:
    """eta_n(z): exactly 1 on the Euclidean ball of radius n, 0 outside radius n + 1."""
    r = np.linalg.norm(np.asarray(z, dtype=float), axis=-1)
    return _smooth_step(r - radius, smoothness)


def cutoff_drift(field_: DriftField, radius: float, smoothness: float = 1.0) -> DriftField:
    if radius < 1:
        raise ValueError("cutoff radius must be >= 1")
    d = field_.d
    R = radius + 1
    # |z|_B on the Euclidean ball of radius R is at most d R^(1/3) + sqrt(d) R
    sup = field_.growth_C * (1 + (d * R ** (1 / 3) + np.sqrt(d) * R) ** field_.beta)
    if field_.bounded:
        sup = min(sup, field_.sup_norm)

    def f(t, z):
        # evaluate everywhere so the arithmetic does not depend on which points are inside
        eta = cutoff_profile(z, radius, smoothness)[..., None]
        with np.errstate(all="ignore"):
            raw = np.asarray(field_.evaluator(t, z), dtype=float)
        return np.where(eta > 0, raw * eta, 0.0)

    return DriftField(name=f"{field_.name}-cutoff{radius:g}", evaluator=f, d=d, growth_C=field_.growth_C,
                      beta=field_.beta, alpha=field_.alpha, holder_L=field_.holder_L, sup_norm=float(sup),
                      params=dict(field_.params, cutoff=radius, smoothness=smoothness))


def gronwall_constant(field_: DriftField, sigma: float) -> float:
    d = field_.d
    return float(max(np.sqrt(2), field_.growth_C * (2 + d), np.sqrt(2 * sigma), 1 + field_.growth_C * np.sqrt(2 * d)))


def gronwall_envelope(field_: DriftField, sigma: float, T: float, z0_norm, max_b) -> np.ndarray:
    """C(|Z0| + T + max|B|) e^(CT), the pathwise bound on sup |Z|."""
    C = gronwall_constant(field_, sigma)
    return C * (np.asarray(z0_norm) + T + np.asarray(max_b)) * np.exp(C * T)


class LadderExhausted(RuntimeError):
    pass


def localized_solve(field_: DriftField, config: SimConfig, store_times=None) -> PathEnsemble:
    """Climb the cutoff ladder per block: a path that leaves B_r reruns with F_(next r) on the same noise.

    Whole blocks are rerun so every path sees identical array layouts; paths
    that already stayed inside keep their earlier result.
    """
    if not config.radii:
        raise ValueError("localization needs at least one radius")
    idx = _store_indices(config, store_times)
    radii = config.radii

    def one(b, first, count):
        done = np.zeros(count, dtype=bool)
        exits = {r: np.full(count, np.inf) for r in radii}
        used = np.full(count, np.nan)
        out = None
        for r in radii:
            res = _run_block(cutoff_drift(field_, r, config.smoothness), config, b, first, count, idx, True,
                             exit_radius=r)
            todo = ~done
            left = res["exit_step"] >= 0
            exits[r][todo & left] = res["exit_step"][todo & left] * config.dt
            keep = todo & ~left
            if out is None:
                out = res
            else:
                for key in ("final", "alive"):
                    out[key][keep] = res[key][keep]
                out["stored"][:, keep] = res["stored"][:, keep]
                for i in range(4):
                    out["sups"][i][keep] = res["sups"][i][keep]
            used[keep] = r
            done |= keep
            if done.all():
                break
        if not done.all():
            bad = np.flatnonzero(~done)[:5] + first
            env = gronwall_envelope(field_, config.sigma, config.T, np.linalg.norm(res["z0"][~done], axis=1),
                                    res["sups"][3][~done])
            raise LadderExhausted(f"paths {bad.tolist()} left every ball up to radius {radii[-1]}; "
                                  f"Gronwall predicts radius up to {float(env.max()):.3g}")
        out["exits"], out["used"] = exits, used
        return out

    res = _map_blocks(one, config)
    exits = {r: np.concatenate([o["exits"][r] for o in res]) for r in radii}
    return _assemble(res, config, idx, True, shared_noise=True, exit_times=exits,
                     radius_used=np.concatenate([o["used"] for o in res]))


def ladder_trajectories(field_: DriftField, config: SimConfig, block: int = 0, radii=None) -> dict:
    """Full grid trajectories of one block under each cutoff radius (shared noise)."""
    radii = config.radii if radii is None else radii
    _, first, count = list(config.blocks())[block]
    out = {}
    for r in radii:
        res = _run_block(cutoff_drift(field_, r, config.smoothness), config, block, first, count,
                         np.arange(config.steps + 1), False, exit_radius=r)
        out[r] = (res["stored"], np.where(res["exit_step"] >= 0, res["exit_step"], config.steps + 1))
    return out


def stopping_times_monotone(ens: PathEnsemble) -> np.ndarray:
    """Per path: recorded exit times are nondecreasing in the radius."""
    radii = sorted(ens.exit_times)
    tau = np.stack([ens.exit_times[r] for r in radii])
    return np.all(tau[1:] >= tau[:-1], axis=0)


def empirical_flow(ens: PathEnsemble, time_subgrid=None) -> EmpiricalFlow:
    """Uniform weights over unflagged paths at stored times in `time_subgrid` (default: all)."""
    if ens.samples is None:
        raise ValueError("ensemble has no stored states")
    if time_subgrid is None:
        sel = np.arange(len(ens.times))
    else:
        sel = [int(np.argmin(np.abs(ens.times - t))) for t in time_subgrid]
        if any(abs(ens.times[i] - t) > 1e-9 for i, t in zip(sel, time_subgrid)):
            raise ValueError("subgrid must be contained in the stored times")
    good = ~ens.flagged
    if not good.any():
        raise ValueError("every path was flagged")
    w = np.where(good, 1.0 / good.sum(), 0.0)
    samples = np.where(good[None, :, None], ens.samples[sel], 0.0)
    return EmpiricalFlow(ens.times[sel], samples, np.tile(w, (len(sel), 1)))


@dataclass
class WeakResidual:
    t: float
    residual: float
    se: float
    budget: float
    passed: bool


def generator_applied(psi, field_: DriftField, sigma: float, t, z) -> np.ndarray:
    """v . grad_x psi + F . grad_v psi + sigma Lap_v psi."""
    d = field_.d
    g = psi.grad(z)
    f = field_.evaluator(np.broadcast_to(t, z.shape[:-1]), z)
    return np.sum(z[..., d:] * g[..., :d], axis=-1) + np.sum(f * g[..., d:], axis=-1) + sigma * psi.lap_v(z)


def weak_solution_residual(flow: EmpiricalFlow, field_: DriftField, sigma: float, psi, t: float,
                           dt: float = 0.0) -> WeakResidual:
    """int psi d mu_t - int psi d mu_0 - int_0^t int L psi d mu_s ds, path by path.

    The per-path quantity is a martingale increment, so its sample SE is the
    right error bar. The budget adds t * dt * mean|L psi| for the Euler bias.
    """
    if getattr(psi, "grad", None) is None or getattr(psi, "lap_v", None) is None:
        raise ValueError("psi needs grad and lap_v")
    k = int(np.argmin(np.abs(flow.times - t)))
    if abs(flow.times[k] - t) > 1e-9:
        raise ValueError("t must be a flow time")
    if k == 0:
        return WeakResidual(float(t), 0.0, 0.0, 0.0, True)
    w = flow.weights[0]
    live = w > 0
    vals = np.stack([generator_applied(psi, field_, sigma, flow.times[j], flow.samples[j][live]) for j in range(k + 1)])
    integral = np.trapezoid(vals, flow.times[: k + 1], axis=0)
    per_path = psi(flow.samples[k][live]) - psi(flow.samples[0][live]) - integral
    n = per_path.size
    res = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    budget = float(t * dt * np.mean(np.abs(vals)))
    return WeakResidual(float(t), res, se, budget, abs(res) <= 3 * se + budget)


@dataclass
class MomentReport:
    M1: float
    sup_F: Optional[float]
    sup_F_note: str
    E_sup_V: float
    E_sup_X: float
    E_sup_Z: float
    H1_V: Optional[float]
    H1_X: Optional[float]
    H1: Optional[float]
    doob_ok: Optional[bool]
    gronwall_C: float
    gronwall_violations: int
    passed: bool


def doob_bounds(M1: float, sup_F: float, sigma: float, T: float, d: int = 1):
    """(H_1V, H_1X, H_1) bounding E sup |V|, E sup |X|, E sup |Z|."""
    hv = M1 + sup_F * T + np.sqrt(8 * sigma * T * d)
    hx = M1 + T * hv
    return float(hv), float(hx), float(hx + hv)


def moment_bound_check(ens: PathEnsemble, field_: DriftField, initial: InitialLaw, sigma: float,
                       T: float) -> MomentReport:
    if ens.sup_v is None:
        raise ValueError("ensemble was simulated without sup tracking")
    good = ~ens.flagged
    M1 = initial.first_moment()
    note = ""
    if field_.bounded:
        supF = field_.sup_norm
    elif "cutoff" in field_.params:
        supF, note = cutoff_drift(field_, field_.params["cutoff"]).sup_norm, "cutoff sup used"
    else:
        supF, note = None, "unbounded field: Doob bound skipped"
    ev, ex, ez = (float(a[good].mean()) for a in (ens.sup_v, ens.sup_x, ens.sup_z))
    hv = hx = h1 = None
    doob = None
    if supF is not None:
        hv, hx, h1 = doob_bounds(M1, supF, sigma, T, field_.d)
        doob = ev <= hv and ex <= hx and ez <= h1
    env = gronwall_envelope(field_, sigma, T, np.linalg.norm(ens.initial, axis=1), ens.sup_b)
    viol = int(np.sum(ens.sup_z[good] > env[good]))
    return MomentReport(M1, supF, note, ev, ex, ez, hv, hx, h1, doob, gronwall_constant(field_, sigma), viol,
                        viol == 0 and doob is not False)


def weak_order_sweep(field_: DriftField, config: SimConfig, psi: Callable[[np.ndarray], np.ndarray],
                     levels: int = 4) -> dict:
    """Coupled Euler runs at dt, dt/2, ..., sharing Brownian increments; successive differences
    of E psi(Z_T) shrink by about 2 per halving for a weak-order-1 scheme."""
    d, T = config.d, config.T
    fine = config.steps * 2 ** (levels - 1)
    sums = np.zeros(levels)
    diffs, diffs2 = np.zeros(levels - 1), np.zeros(levels - 1)
    n = 0
    for b, first, count in config.blocks():
        z0 = config.initial.draw(stream(config.seed, INIT_KEY, b), first, count)
        dW = np.sqrt(T / fine) * stream(config.seed, 2, b).standard_normal((fine, count, d))
        ends = []
        for lv in range(levels):
            m = 2 ** (levels - 1 - lv)
            steps = fine // m
            h = T / steps
            x, v = z0[:, :d].copy(), z0[:, d:].copy()
            for k in range(steps):
                inc = dW[k * m:(k + 1) * m].sum(axis=0)
                f = field_.evaluator(np.full(count, k * h), np.concatenate([x, v], axis=1))
                x = x + v * h
                v = v + f * h + np.sqrt(2 * config.sigma) * inc
            ends.append(psi(np.concatenate([x, v], axis=1)))
        for lv in range(levels):
            sums[lv] += ends[lv].sum()
        for lv in range(levels - 1):
            dd = ends[lv] - ends[lv + 1]
            diffs[lv] += dd.sum()
            diffs2[lv] += (dd**2).sum()
        n += count
    mean_d = diffs / n
    se_d = np.sqrt(np.maximum(diffs2 / n - mean_d**2, 0) / (n - 1))
    dts = [T / (config.steps * 2**lv) for lv in range(levels)]
    ratios = [float(mean_d[i] / mean_d[i + 1]) for i in range(levels - 2)]
    return dict(dt=dts, estimates=(sums / n).tolist(), differences=mean_d.tolist(), difference_se=se_d.tolist(),
                ratios=ratios, orders=[float(np.log2(abs(r))) for r in ratios])


def write_paths(path, ens: PathEnsemble):
    """Little-endian layout: magic, uint32 d, uint64 n, uint64 n_times, float64 times, float64 samples."""
    if ens.samples is None:
        raise ValueError("nothing stored")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQ", ens.d, ens.n, len(ens.times)))
        fh.write(np.asarray(ens.times, dtype="<f8").tobytes())
        fh.write(np.asarray(ens.samples, dtype="<f8").tobytes())


def read_paths(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError("not a path file")
        d, n, nt = struct.unpack("<IQQ", fh.read(20))
        times = np.frombuffer(fh.read(8 * nt), dtype="<f8")
        samples = np.frombuffer(fh.read(8 * nt * n * 2 * d), dtype="<f8").reshape(nt, n, 2 * d)
    return times, samples
