"""Monte Carlo simulation of the jump diffusion with generator Delta + S^b.

Each step adds a Brownian increment sqrt(2 dt) N(0, I), a Gaussian stand-in
for the jumps shorter than eps (covariance matched with b frozen at the
current position) and the jumps of size >= eps from a Poisson clock, thinned
against the majorant M_b |z|^(-d-beta) on eps <= |z| <= lambda.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2

from .coefficients import Coefficient
from .duhamel import KernelTable
from .kernels import sphere_area

CHUNK = 20_000


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt: float = 1e-3
    eps_jump: float = 0.05
    seed: int = 0
    horizon: float = 0.25
    r_max: float = 1e3          # proposal cut for coefficients with unbounded support
    threads: int = 1
    keep_jumps: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.eps_jump > 0:
            raise ValueError("eps_jump must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))


@dataclass
class PathSample:
    """Vectorised record of an ensemble of paths.

    ``positions[k]`` holds X at ``times[k]``; ``exit_times[r]`` and
    ``hit_times[(y, r)]`` are first passage times (inf if not reached);
    jumps are logged as parallel arrays.
    """
    x0: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    jump_time: np.ndarray
    jump_path: np.ndarray
    jump_pre: np.ndarray
    jump_z: np.ndarray
    exit_times: dict = field(default_factory=dict)
    hit_times: dict = field(default_factory=dict)
    levy_counts: dict = field(default_factory=dict)
    levy_compensators: dict = field(default_factory=dict)
    proposals: int = 0
    accepted: int = 0
    rate: float = 0.0
    tail_mass: float = 0.0

    @property
    def n_paths(self):
        return self.positions.shape[1]

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"time {t} was not recorded")
        return self.positions[k]

    def jumps_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = self.jump_z.shape[1] if self.jump_z.ndim > 1 else 1
            w.writerow(["t"] + [f"x_pre{i}" for i in range(d)] + [f"z{i}" for i in range(d)])
            pre = self.jump_pre.reshape(len(self.jump_time), -1)
            z = self.jump_z.reshape(len(self.jump_time), -1)
            for row in zip(self.jump_time, pre, z):
                w.writerow([row[0], *row[1], *row[2]])


# ---------------------------------------------------------------------------
# jump law pieces

def jump_rate(c: Coefficient, eps, r_max=1e3):
    """Lambda = M_b int_{eps <= |z| <= lam} |z|^(-d-beta) dz and the ignored tail mass."""
    lam = min(c.support_radius, r_max)
    if eps >= lam:
        raise ValueError("eps_jump must lie below the support bound")
    area = sphere_area(c.d)
    beta = c.beta
    rate = c.M_b * area * (eps ** -beta - lam ** -beta) / beta
    tail = 0.0 if np.isfinite(c.support_radius) and c.support_radius <= r_max else \
        c.M_b * area * r_max ** -beta / beta
    return rate, tail


def _sample_radius(rng, n, eps, lam, beta):
    """Inverse CDF of r^(-1-beta) on [eps, lam]."""
    u = rng.random(n)
    a, b = eps ** -beta, lam ** -beta
    return (a - u * (a - b)) ** (-1 / beta)


def _sample_direction(rng, n, d):
    if d == 1:
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def small_jump_variance(c: Coefficient, x, eps):
    """Per-axis variance rate (1/d) int_{|z|<eps} |z|^2 b(x,z) / |z|^(d+beta) dz.

    Radial profile of b at x, integrated with Gauss-Legendre on (0, eps).
    """
    r = eps * (_GL_X + 1) / 2
    w = eps / 2 * _GL_W
    x = np.asarray(x, float)
    n = x.shape[0]
    if c.d == 1:
        xs = np.repeat(x[:, 0], r.size).reshape(n, r.size)
        b = c.evaluate(xs, np.broadcast_to(r, (n, r.size)))
    else:
        zs = np.zeros((n, r.size, c.d))
        zs[..., 0] = r
        xs = np.broadcast_to(x[:, None, :], (n, r.size, c.d))
        b = c.evaluate(xs, zs)
    integrand = b * r ** (1 - c.beta)          # r^2 r^(d-1) / r^(d+beta)
    return sphere_area(c.d) / c.d * np.sum(w * integrand, axis=1)


# ---------------------------------------------------------------------------

def _as_points(x0, d, n):
    x0 = np.atleast_1d(np.asarray(x0, float))
    if x0.size != d:
        raise ValueError(f"start point must have {d} coordinates")
    return np.broadcast_to(x0, (n, d)).copy()


def _interval_mass(c, x, B, n_nodes=32):
    """int_B J^b(x, u) du for 1-d intervals B = (lo, hi)."""
    lo, hi = B
    gx, gw = np.polynomial.legendre.leggauss(n_nodes)
    u = (hi - lo) / 2 * gx + (hi + lo) / 2
    w = (hi - lo) / 2 * gw
    z = u[None, :] - x[:, :1]
    r = np.abs(z)
    b = c.evaluate(np.broadcast_to(x[:, :1], z.shape), z)
    with np.errstate(divide="ignore"):
        return np.sum(w * b / r ** (1 + c.beta), axis=1)


def _inside(X, region):
    lo, hi = region
    return (X[:, 0] >= lo) & (X[:, 0] <= hi)


def _run_chunk(c, cfg, x0, n, seed_seq, record_steps, exit_radii, targets, levy_pairs,
               var_const):
    rng = np.random.default_rng(seed_seq)
    d = c.d
    X = _as_points(x0, d, n)
    x0v = X[0].copy()
    lam = min(c.support_radius, cfg.r_max)
    rate = 0.0
    if c.M_b > 0:
        rate, _ = jump_rate(c, cfg.eps_jump, cfg.r_max)
    rec = []
    exit_t = {r: np.full(n, np.inf) for r in exit_radii}
    hit_t = {tg: np.full(n, np.inf) for tg in targets}
    counts = {p: np.zeros(n) for p in levy_pairs}
    comps = {p: np.zeros(n) for p in levy_pairs}
    log_t, log_p, log_pre, log_z = [], [], [], []
    proposals = accepted = 0
    if 0 in record_steps:
        rec.append(X.copy())
    sq = math.sqrt(2 * cfg.dt)
    for k in range(1, cfg.n_steps + 1):
        t = k * cfg.dt
        for p in levy_pairs:
            A, B = p
            inA = _inside(X, A)
            if np.any(inA):
                comps[p][inA] += cfg.dt * _interval_mass(c, X[inA], B)
        X += sq * rng.standard_normal((n, d))
        if c.sup_norm > 0:
            v = var_const if var_const is not None else small_jump_variance(c, X, cfg.eps_jump)
            X += np.sqrt(np.asarray(v) * cfg.dt).reshape(-1, 1) * rng.standard_normal((n, d))
        if rate > 0:
            m = rng.poisson(rate * cfg.dt, n)
            for rep in range(1, int(m.max(initial=0)) + 1):
                idx = np.flatnonzero(m >= rep)
                rr = _sample_radius(rng, idx.size, cfg.eps_jump, lam, c.beta)
                z = rr[:, None] * _sample_direction(rng, idx.size, d)
                pre = X[idx]
                bz = c.evaluate(pre[:, 0] if d == 1 else pre, z[:, 0] if d == 1 else z)
                acc = rng.random(idx.size) * c.M_b < bz
                proposals += idx.size
                accepted += int(acc.sum())
                ja = idx[acc]
                for p in levy_pairs:
                    A, B = p
                    hitp = _inside(pre[acc], A) & _inside(pre[acc] + z[acc], B)
                    np.add.at(counts[p], ja[hitp], 1)
                if cfg.keep_jumps and ja.size:
                    log_t.append(np.full(ja.size, t))
                    log_p.append(ja)
                    log_pre.append(pre[acc])
                    log_z.append(z[acc])
                X[ja] += z[acc]
        dist0 = np.linalg.norm(X - x0v, axis=1)
        for r in exit_radii:
            new = (dist0 > r) & ~np.isfinite(exit_t[r])
            exit_t[r][new] = t
        for tg in targets:
            y, r = tg
            new = (np.linalg.norm(X - np.atleast_1d(y), axis=1) < r) & ~np.isfinite(hit_t[tg])
            hit_t[tg][new] = t
        if k in record_steps:
            rec.append(X.copy())
    cat = lambda a, shape: np.concatenate(a) if a else np.zeros(shape)
    return dict(rec=np.stack(rec), exit=exit_t, hit=hit_t, counts=counts, comps=comps,
                jt=cat(log_t, (0,)), jp=cat(log_p, (0,)).astype(int),
                jpre=cat(log_pre, (0, d)), jz=cat(log_z, (0, d)),
                proposals=proposals, accepted=accepted)


def simulate(c: Coefficient, cfg: SimConfig, x0, *, record_times=None, exit_radii=(),
             targets=(), levy_pairs=()) -> PathSample:
    """Simulate ``cfg.n_paths`` paths from x0.

    ``exit_radii`` registers balls B(x0, r) for exit times, ``targets`` balls
    B(y, r) for hitting times and ``levy_pairs`` 1-d interval pairs (A, B)
    for jump counts and their compensators. Paths are simulated in fixed
    chunks, each with its own stream spawned from ``cfg.seed``, so results do
    not depend on the thread count.
    """
    if c.m_b < 0 or np.any(_probe_negative(c)):
        raise ValueError("simulation needs a nonnegative coefficient")
    d = c.d
    record_times = [cfg.horizon] if record_times is None else list(record_times)
    record_steps = sorted({int(round(t / cfg.dt)) for t in record_times})
    if record_steps[-1] > cfg.n_steps:
        raise ValueError("record times exceed the horizon")
    if levy_pairs and d != 1:
        raise ValueError("Levy system counts are implemented for d = 1")
    sizes = [min(CHUNK, cfg.n_paths - i) for i in range(0, cfg.n_paths, CHUNK)]
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    var_const = None
    if c.translation_invariant and c.sup_norm > 0:
        var_const = float(small_jump_variance(c, np.zeros((1, d)), cfg.eps_jump)[0])
    targets = [(tuple(np.atleast_1d(y).tolist()) if d > 1 else float(np.atleast_1d(y)[0]), r)
               for y, r in targets]
    levy_pairs = [(tuple(A), tuple(B)) for A, B in levy_pairs]
    job = lambda a: _run_chunk(c, cfg, x0, a[0], a[1], set(record_steps), list(exit_radii),
                               targets, levy_pairs, var_const)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(job, zip(sizes, seeds)))
    else:
        parts = [job(a) for a in zip(sizes, seeds)]
    offsets = np.cumsum([0] + sizes[:-1])
    rate, tail = jump_rate(c, cfg.eps_jump, cfg.r_max) if c.M_b > 0 else (0.0, 0.0)
    return PathSample(
        x0=np.atleast_1d(np.asarray(x0, float)),
        times=np.array(record_steps) * cfg.dt,
        positions=np.concatenate([p["rec"] for p in parts], axis=1),
        jump_time=np.concatenate([p["jt"] for p in parts]),
        jump_path=np.concatenate([p["jp"] + o for p, o in zip(parts, offsets)]),
        jump_pre=np.concatenate([p["jpre"] for p in parts]),
        jump_z=np.concatenate([p["jz"] for p in parts]),
        exit_times={r: np.concatenate([p["exit"][r] for p in parts]) for r in exit_radii},
        hit_times={tg: np.concatenate([p["hit"][tg] for p in parts]) for tg in targets},
        levy_counts={lp: np.concatenate([p["counts"][lp] for p in parts]) for lp in levy_pairs},
        levy_compensators={lp: np.concatenate([p["comps"][lp] for p in parts])
                           for lp in levy_pairs},
        proposals=sum(p["proposals"] for p in parts),
        accepted=sum(p["accepted"] for p in parts),
        rate=rate, tail_mass=tail)


def _probe_negative(c):
    return c.nonneg_flag is False


# ---------------------------------------------------------------------------
# statistics

def wilson_interval(k, n, z=1.96):
    """Wilson score interval for a binomial proportion."""
    k, n = np.asarray(k, float), np.asarray(n, float)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


def table_cdf(table: KernelTable, t, x0=0.0):
    """(u, F(u)) at cell edges from the lattice masses of q(t, x0, .), tails split evenly."""
    i = table.time_index(t)
    h = table.dx
    if table.d != 1:
        raise ValueError("marginal CDFs are implemented for 1-d tables")
    if table.translation_invariant:
        u = table.offsets
        q = table.values[i]
    else:
        j = int(round(x0 / h)) + table.m
        u = table.lattice - table.lattice[j]
        q = table.values[i][j]
    mass = q * h
    left = (1 - mass.sum()) / 2
    edges = np.append(u - h / 2, u[-1] + h / 2)
    F = left + np.concatenate([[0.0], np.cumsum(mass)])
    return edges, F


def empirical_density_check(samples: PathSample, table: KernelTable, t):
    """Kolmogorov-Smirnov distance between X_t - x0 and the table CDF, with its MC SE.

    Returns (distance, se) with se = sup sqrt(F(1-F)/n) over the sampled range.
    """
    X = np.sort(samples.at(t)[:, 0] - samples.x0[0])
    n = X.size
    edges, F = table_cdf(table, t)
    Fx = np.interp(X, edges, F, left=F[0], right=F[-1])
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    ks = float(max(np.max(np.abs(emp_hi - Fx)), np.max(np.abs(Fx - emp_lo))))
    se = float(np.sqrt(np.max(Fx * (1 - Fx)) / n))
    return ks, se


def exit_time_stats(samples: PathSample, r, s):
    """P(tau_{B(x0, r)} <= s) for an array of s, with Wilson 95% bounds."""
    tau = samples.exit_times[r]
    s = np.atleast_1d(np.asarray(s, float))
    k = np.array([np.sum(tau <= v + 1e-12) for v in s])
    lo, hi = wilson_interval(k, tau.size)
    return k / tau.size, lo, hi


def fit_exit_kappa(samples: PathSample, r, kappa_max=32 / 9, n_grid=400):
    """Largest kappa < kappa_max with Wilson upper bound of P(tau <= kappa r^2) <= 1/2.

    Returns None when even the smallest grid kappa violates the bound.
    """
    kap = np.linspace(kappa_max / n_grid, kappa_max, n_grid, endpoint=False)
    _, _, hi = exit_time_stats(samples, r, kap * r * r)
    ok = np.flatnonzero(hi <= 0.5)
    if ok.size == 0:
        return None
    # the exit law is monotone in s, so the admissible set is an initial run
    run = ok[ok == np.arange(ok.size)]
    return float(kap[run[-1]]) if run.size else None


def fit_exit_linear(samples: PathSample, r, s_grid):
    """C20 = max over s of P(tau <= s) r^2 / s."""
    p, _, _ = exit_time_stats(samples, r, s_grid)
    return float(np.max(p * r * r / np.asarray(s_grid)))


def brownian_exit_cdf(s, r, terms=200):
    """P(tau <= s) for the 1-d process with generator d^2/dx^2 leaving (-r, r) from 0."""
    s = np.atleast_1d(np.asarray(s, float))
    k = np.arange(terms)[:, None]
    surv = 4 / np.pi * np.sum((-1) ** k / (2 * k + 1)
                              * np.exp(-(2 * k + 1) ** 2 * np.pi ** 2 * 2 * s / (8 * r * r)), axis=0)
    return 1 - np.clip(surv, 0, 1)


def hitting_prob_stats(samples: PathSample, target, deadline):
    """P(sigma_{B(y, r)} < deadline) with Wilson bounds; ``target`` is (y, r)."""
    y, r = target
    key = next(k for k in samples.hit_times if np.allclose(k[0], y) and k[1] == r)
    sig = samples.hit_times[key]
    k = int(np.sum(sig < deadline))
    lo, hi = wilson_interval(k, sig.size)
    return k / sig.size, float(lo), float(hi), k


def hitting_slope(distances, probs):
    """Least squares slope of log P against log |x - y| (nan if any P is zero)."""
    probs = np.asarray(probs, float)
    if np.any(probs <= 0):
        return float("nan")
    return float(np.polyfit(np.log(distances), np.log(probs), 1)[0])


def levy_system_check(samples: PathSample, A, B):
    """Mean A -> B jump count vs mean compensator int 1_A(X_s) int_B J^b(X_s, u) du ds.

    Returns a dict with both means, the SE of the per-path difference, the
    relative defect and pass iff |difference| <= 3 SE (exact zero also passes).
    """
    key = (tuple(A), tuple(B))
    n_ab = samples.levy_counts[key]
    comp = samples.levy_compensators[key]
    diff = n_ab - comp
    se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else 0.0
    mean_n, mean_c = float(n_ab.mean()), float(comp.mean())
    defect = abs(mean_n - mean_c) / mean_c if mean_c > 0 else (0.0 if mean_n == 0 else math.inf)
    ok = abs(mean_n - mean_c) <= 3 * se if se > 0 else mean_n == mean_c
    return {"count": mean_n, "compensator": mean_c, "se": se, "defect": defect, "pass": bool(ok)}


def jump_size_chi2(samples: PathSample, c: Coefficient, eps, n_bins=20):
    """Chi-square test of accepted jump sizes against b-weighted |z|^(-1-beta) (TI, 1-d)."""
    r = np.abs(samples.jump_z[:, 0])
    lam = min(c.support_radius, 1e3)
    edges = np.geomspace(eps, lam, n_bins + 1)
    obs, _ = np.histogram(r, edges)
    fine = np.geomspace(eps, lam, 20_001)
    dens = c.radial(fine) * fine ** (-1 - c.beta)
    cum = np.concatenate([[0.0], np.cumsum(np.diff(fine) * (dens[1:] + dens[:-1]) / 2)])
    probs = np.diff(np.interp(edges, fine, cum))
    probs = probs / probs.sum()
    exp = probs * obs.sum()
    keep = exp > 5
    stat = float(np.sum((obs[keep] - exp[keep]) ** 2 / exp[keep]))
    dof = int(keep.sum()) - 1
    return stat, float(chi2.sf(stat, dof))


def summary(samples: PathSample, cfg: SimConfig):
    """Summary statistics as a JSON-ready dict."""
    X = samples.positions[-1] - samples.x0
    var = X.var(axis=0, ddof=1)
    se = var * math.sqrt(2 / max(1, X.shape[0] - 1))
    out = {"config": asdict(cfg), "time": float(samples.times[-1]),
           "variance": var.tolist(), "variance_se": se.tolist(),
           "jump_rate": samples.rate, "tail_mass": samples.tail_mass,
           "proposals": samples.proposals, "accepted": samples.accepted,
           "acceptance": samples.accepted / samples.proposals if samples.proposals else None}
    for r, tau in samples.exit_times.items():
        out[f"exit_fraction_r{r:g}"] = float(np.mean(np.isfinite(tau)))
    return out


def summary_json(samples, cfg):
    return json.dumps(summary(samples, cfg), sort_keys=True)

