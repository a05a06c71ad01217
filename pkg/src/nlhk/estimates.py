"""Executable versions of the kernel inequalities, with fitted constants.

A fitted constant is the max (or min) over the sampled grid of the ratio of
the two sides; argument-shrink factors are searched over {1, 1/2, 1/4}.
Comparisons are restricted to the interior window |x - y| <= L of a table and
to points where the compared quantities sit above the floating point floor
(1e-9 of the table sup), where lattice values carry no information.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.stats import qmc

from .coefficients import Coefficient, ModelParams
from .duhamel import KernelTable, _mass_tail, choose_base_horizon
from .kernels import (f0, gaussian_hessian_norm, gaussian_radial, h as h_fn, sphere_area,
                      stable_constant)
from .nonlocal_op import abs_frac_gaussian, radial_tail
from .oracle import density_from_symbol, stable_symbol, truncated_stable_symbol

MASS_TOL = 2e-3
POSITIVITY_TOL = 1e-4
NEAR_DIAG_TOL = 1e-6
FLOOR = 1e-9
SHRINKS = (1.0, 0.5, 0.25)
TRUNCATED_MIN_TIME = 0.01


@dataclass
class CheckReport:
    check_id: str
    constants: dict
    worst_point: list
    margin: float
    verdict: str
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_json(self):
        d = asdict(self)
        return json.dumps(_plain(d), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_reports(reports, path=None):
    lines = "\n".join(r.to_json() for r in reports) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(lines)
    return lines


def _report(check_id, value, threshold, worst, constants, *, upper=True, details=None):
    """verdict pass iff value <= threshold (upper) or value >= threshold (lower)."""
    ok = value <= threshold if upper else value >= threshold
    margin = value / threshold if threshold != 0 else value
    return CheckReport(check_id, constants, [float(v) for v in worst], float(margin),
                       "pass" if ok and math.isfinite(value) else "fail", details or {})


# ---------------------------------------------------------------------------
# grid views

def _slices(table: KernelTable, interior=True):
    """Yield (i, t, q, r, xs, ys) with r = |x - y| for each stored time.

    For translation-invariant tables x is the offset and y = 0.
    """
    if table.translation_invariant:
        off = table.offsets
        if table.d == 1:
            r = np.abs(off)
            xs, ys = off, np.zeros_like(off)
        else:
            r = np.hypot(off[:, None], off[None, :])
            xs, ys = np.broadcast_arrays(off[:, None], off[None, :])
        win = r <= table.L * (1 + 1e-12) if interior else np.ones(r.shape, bool)
    else:
        lat = table.lattice
        xs, ys = np.meshgrid(lat, lat, indexing="ij")
        r = np.abs(xs - ys)
        win = (np.abs(xs) <= table.L / 2) if interior else np.ones(r.shape, bool)
    for i, t in enumerate(table.times):
        yield i, float(t), table.values[i][win], r[win], xs[win], ys[win]


def _radial_profile(sym, t, h, R, shrink=1.0):
    """Callable r -> density(t, shrink * r) from an FFT on a fine lattice."""
    hh = 2.0 ** math.floor(math.log2(min(h, math.sqrt(t) / 8, t ** (1 / sym.beta) / 4
                                         if not sym.diffusion else h)))
    n = int(math.ceil(shrink * R / hh)) + 4
    dens = density_from_symbol(sym, t, hh, n * hh, check_alias=False)
    vals = dens.values if sym.d == 1 else dens.values[:, n]
    spline = CubicSpline(dens.offsets[n:], vals[n:])
    return lambda r: spline(np.minimum(shrink * np.asarray(r, float), n * hh))


# ---------------------------------------------------------------------------

def mass_tail(c: Coefficient, t, U, d):
    """First order mass outside the stored box [-U, U]^d."""
    if d == 1:
        return _mass_tail(c, t, U, 1)
    from scipy.special import ndtr
    q = 1 - 2 * (1 - ndtr(U / math.sqrt(2 * t)))
    gauss = 1 - q * q
    jr = lambda r: c.radial(r) / r ** (1 + c.beta)
    # outside the square: radius U / max(|cos|, |sin|) per direction
    theta, w = np.polynomial.legendre.leggauss(32)
    theta = (theta + 1) * math.pi / 8
    w = w * math.pi / 8
    jump = 8 * sum(wi * radial_tail(jr, U / math.cos(th), finite_support=c.support_radius)
                   for th, wi in zip(theta, w))
    return gauss + t * jump


def check_conservativeness(table: KernelTable, c: Coefficient, tol=MASS_TOL) -> CheckReport:
    """|lattice mass + analytic tail - 1| per (t, x), interior rows for x-dependent tables."""
    h = table.dx
    worst, worst_pt = 0.0, (0.0, 0.0)
    masses = []
    for i, t in enumerate(table.times):
        if table.translation_invariant:
            U = table.offsets[-1] + h / 2
            mass = float(np.sum(table.values[i])) * h ** table.d + mass_tail(c, t, U, table.d)
            err, x = abs(mass - 1), 0.0
        else:
            lat = table.lattice
            rows = np.abs(lat) <= table.L / 2
            m = table.values[i][rows].sum(axis=1) * h
            lo = lat[rows] - lat[0] + h / 2
            hi = lat[-1] - lat[rows] + h / 2
            tail = np.array([_one_sided_tail(c, t, a) + _one_sided_tail(c, t, b)
                             for a, b in zip(lo, hi)])
            errs = np.abs(m + tail - 1)
            k = int(np.argmax(errs))
            err, x, mass = float(errs[k]), float(lat[rows][k]), float(m[k] + tail[k])
        masses.append(mass)
        if err >= worst:
            worst, worst_pt = err, (t, x)
    return _report("conservativeness", worst, tol, [worst_pt[0], worst_pt[1], 0.0],
                   {"max_mass_error": worst}, details={"masses": masses})


def _one_sided_tail(c, t, U):
    return _mass_tail(c, t, U, 1) / 2


def check_near_diag_lower(table: KernelTable, c: Coefficient, tol=NEAR_DIAG_TOL) -> CheckReport:
    """q >= p0 / 2 - 1e-6 on |x - y| <= 3 sqrt(t), t <= T_base."""
    T_base = choose_base_horizon(c)
    gap_min, ratio_min, pt = math.inf, math.inf, (0.0, 0.0, 0.0)
    for i, t, q, r, xs, ys in _slices(table):
        if t > T_base * (1 + 1e-12):
            continue
        sel = r <= 3 * math.sqrt(t)
        p0 = gaussian_radial(t, r[sel], table.d)
        gap = q[sel] - (0.5 * p0 - tol)
        ratio = q[sel] / p0
        k = int(np.argmin(ratio))
        if ratio[k] < ratio_min:
            ratio_min, pt = float(ratio[k]), (t, _first(xs[sel][k]), _first(ys[sel][k]))
        gap_min = min(gap_min, float(gap.min()))
    rep = _report("near_diagonal_lower", gap_min, 0.0, pt,
                  {"min_q_over_p0": ratio_min, "min_gap": gap_min}, upper=False)
    rep.margin = ratio_min / 0.5
    return rep


def _first(v):
    v = np.atleast_1d(v)
    return float(v[0])


def check_positivity(table: KernelTable, c: Coefficient, rebuild=None,
                     tol=POSITIVITY_TOL) -> CheckReport:
    """Nonnegative b: min >= -tol sup. Otherwise a value below -tol sup must be found.

    ``rebuild(T)`` may return a table on a shorter horizon; up to three
    halvings are searched when the given table shows no negative value.
    """
    tables = [table]
    sup = table.sup()
    mins = []
    for attempt in range(4):
        tab = tables[-1]
        vmin = float(tab.values.min())
        s = tab.sup()
        mins.append((tab.horizon, vmin, s))
        if c.nonneg_flag or vmin < -tol * s or rebuild is None or attempt == 3:
            break
        tables.append(rebuild(tab.horizon / 2))
    tab = tables[-1]
    idx = np.unravel_index(np.argmin(tab.values), tab.values.shape)
    t = float(tab.times[idx[0]])
    pt = [t] + [float(v) for v in _index_point(tab, idx[1:])]
    ratio = mins[-1][1] / mins[-1][2]
    consts = {"min_over_sup": ratio, "sup": sup, "horizons": [m[0] for m in mins]}
    if c.nonneg_flag:
        return _report("positivity", -ratio, tol, pt, consts)
    return _report("positivity", -ratio, tol, pt, consts, upper=False,
                   details={"expect": "negative value"})


def _index_point(tab, idx):
    if tab.translation_invariant:
        return [tab.offsets[k] for k in idx] + [0.0]
    return [tab.lattice[k] for k in idx]


def check_two_sided(table: KernelTable, c: Coefficient, threshold=1e4) -> CheckReport:
    """C' p_{m_b}(t, s'x, s'y) <= q <= C p_{M_b}(t, s x, s y) with shrinks searched.

    p_a has generator Delta + a Delta^(beta/2); a coefficient level b
    corresponds to a = b / A(d, -beta), so b = A gives p_1 on both sides.
    """
    A = stable_constant(c.d, c.beta)
    d = table.d
    best_up, best_lo = (math.inf, None, None), (0.0, None, None)
    R = table.L * (math.sqrt(d))
    floor = FLOOR * table.sup()
    for s in SHRINKS:
        up, up_pt = 0.0, None
        lo, lo_pt = math.inf, None
        for i, t, q, r, xs, ys in _slices(table):
            env_up = _radial_profile(stable_symbol(d, c.beta, max(c.M_b, 0) / A), t,
                                     table.dx, R, s)(r)
            env_lo = _radial_profile(stable_symbol(d, c.beta, max(c.m_b, 0) / A), t,
                                     table.dx, R, s)(r)
            ok = (q > floor) & (env_up > floor)
            ratio = q[ok] / env_up[ok]
            if ratio.size and ratio.max() > up:
                k = int(np.argmax(ratio))
                up, up_pt = float(ratio[k]), (t, _first(xs[ok][k]), _first(ys[ok][k]))
            ok = (q > floor) & (env_lo > floor)
            ratio = q[ok] / env_lo[ok]
            if ratio.size and ratio.min() < lo:
                k = int(np.argmin(ratio))
                lo, lo_pt = float(ratio[k]), (t, _first(xs[ok][k]), _first(ys[ok][k]))
        if up < best_up[0]:
            best_up = (up, s, up_pt)
        if lo > best_lo[0]:
            best_lo = (lo, s, lo_pt)
    spread = best_up[0] / best_lo[0] if best_lo[0] > 0 else math.inf
    consts = {"C_upper": best_up[0], "shrink_upper": best_up[1],
              "C_lower": best_lo[0], "shrink_lower": best_lo[1], "ratio": spread}
    return _report("two_sided", spread, threshold, best_up[2] or (0, 0, 0), consts)


def check_finite_range(table: KernelTable, c: Coefficient, threshold=50.0,
                       t_min=TRUNCATED_MIN_TIME) -> CheckReport:
    """q <= C7 [t^(-d/2) ^ (p0(t, C8 .) + pbar(t, C8 .))] with C8 in {1, 1/2, 1/4}.

    Also reports the induction bound q <= C0 (t/n)^n for |x-y| >= n lambda,
    n = 1, 2, 3, and a Poisson-tail slope fit log q ~ c |x-y| log(t/|x-y|) on
    |x-y| in [2, 6]. Times below ``t_min`` are skipped because the truncated
    kernel needs a lattice finer than t^(1/beta) there.
    """
    lam = c.support_radius
    if not np.isfinite(lam):
        raise ValueError("finite-range check needs a coefficient with bounded support")
    d = table.d
    floor = FLOOR * table.sup()
    R = table.L * math.sqrt(d)
    best = (math.inf, None, None)
    tbar = truncated_stable_symbol(d, c.beta)
    sel_times = [i for i, t in enumerate(table.times) if t >= t_min]
    profiles = {}
    for s in SHRINKS:
        worst, pt = 0.0, None
        for i, t, q, r, xs, ys in _slices(table):
            if i not in sel_times:
                continue
            key = (i, s)
            if key not in profiles:
                pb = _radial_profile(tbar, t, table.dx, R, s)
                profiles[key] = pb
            env = np.minimum(t ** (-d / 2),
                             gaussian_radial(t, s * r, d) + profiles[key](r))
            ok = (q > floor) & (env > floor)
            ratio = q[ok] / env[ok]
            if ratio.size and ratio.max() > worst:
                k = int(np.argmax(ratio))
                worst, pt = float(ratio[k]), (t, _first(xs[ok][k]), _first(ys[ok][k]))
        if worst < best[0]:
            best = (worst, s, pt)
    induction = {}
    for n in (1, 2, 3):
        c0 = 0.0
        for i, t, q, r, xs, ys in _slices(table):
            far = (r >= n * lam) & (q > floor)
            if np.any(far):
                c0 = max(c0, float(np.max(q[far])) / (t / n) ** n)
        induction[f"C0_n{n}"] = c0
    slope, fit_t = _poisson_tail_fit(table, floor)
    consts = {"C7": best[0], "C8": best[1], **induction, "poisson_tail_c": slope,
              "poisson_tail_time": fit_t}
    ok = best[0] < threshold and (slope is None or slope > 0)
    rep = _report("finite_range", best[0], threshold, best[2] or (0, 0, 0), consts)
    if not ok:
        rep.verdict = "fail"
    return rep


def _poisson_tail_fit(table, floor):
    """Slope c of log q against |u| log(t/|u|) on 2 <= |u| <= 6 at the last usable time."""
    for i in range(len(table.times) - 1, -1, -1):
        t = float(table.times[i])
        if t > 1:
            continue
        if table.translation_invariant and table.d == 1:
            u, q = table.offsets, table.values[i]
        elif table.translation_invariant:
            u, q = table.offsets, table.values[i][:, 2 * table.m]
        else:
            u, q = table.lattice - 0.0, table.values[i][table.m]
            u = u - table.lattice[table.m]
        sel = (np.abs(u) >= 2) & (np.abs(u) <= 6) & (q > floor)
        if sel.sum() < 8:
            continue
        a = np.abs(u[sel])
        X = a * np.log(t / a)
        slope, _ = np.polyfit(X, np.log(q[sel]), 1)
        return float(slope), t
    return None, None


# ---------------------------------------------------------------------------
# Gaussian and comparison-function inequalities

def _halton(n, bounds, seed_dim=None):
    lo = np.array([b[0] for b in bounds], float)
    hi = np.array([b[1] for b in bounds], float)
    pts = qmc.Halton(len(bounds), scramble=False).random(n + 1)[1:]
    return lo + pts * (hi - lo)


def fit_c9(n, d=1):
    """max over samples of p0 / [t^(-d/2)(1 ^ sqrt t/|x|)^(d+2)] and the Hessian analogue."""
    pts = _halton(n, [(0.01, 1.0), (0.0, 6.0)])
    t, x = pts[:, 0], pts[:, 1]
    rx = x if d == 1 else np.c_[x, np.zeros((x.size, d - 1))]
    shape = lambda pw: np.minimum(1.0, np.sqrt(t) / np.maximum(x, 1e-300)) ** pw
    dens = gaussian_radial(t, x, d) / (t ** (-d / 2) * shape(d + 2))
    hess = gaussian_hessian_norm(t, rx, d) / (t ** (-(d + 2) / 2) * shape(d + 4))
    ratios = np.maximum(dens, hess)
    k = int(np.argmax(ratios))
    return float(ratios[k]), (float(t[k]), float(x[k]), 0.0)


def fit_c10(n, d=1, beta=1.0):
    """max over samples of |Delta^(beta/2)|p0 / f0 (the majorant without A)."""
    pts = _halton(n, [(0.01, 1.0), (0.0, 3.0)])
    vals = []
    for t, x in pts:
        z = x if d == 1 else np.array([x, 0.0])
        y = 0.0 if d == 1 else np.zeros(2)
        lhs = float(abs_frac_gaussian(t, z, y, d, beta))
        vals.append(lhs / float(f0(t, z, y, d, beta)))
    vals = np.array(vals)
    k = int(np.argmax(vals))
    return float(vals[k]), (float(pts[k, 0]), float(pts[k, 1]), 0.0)


def c11_exact(d=1, beta=1.0):
    """int_0^t int f0(s, z, y) dz ds / t^(1-beta/2), the same for every t."""
    vol = sphere_area(d) / d
    return (vol + sphere_area(d) / beta) / (1 - beta / 2)


def fit_c11(n, d=1, beta=1.0):
    """The time integral of the f0 mass by quadrature, divided by t^(1-beta/2)."""
    ts = _halton(n, [(0.01, 1.0)])[:, 0]
    vals = []
    for t in ts:
        def mass(s):
            rs = math.sqrt(s)
            inner = sphere_area(d) / d * rs ** d * rs ** (-(d + beta))
            outer = sphere_area(d) * integrate.quad(lambda r: r ** (d - 1 - d - beta), rs,
                                                    np.inf)[0]
            return inner + outer
        vals.append(integrate.quad(mass, 0, t, limit=200)[0] / t ** (1 - beta / 2))
    vals = np.array(vals)
    k = int(np.argmax(vals))
    return float(vals[k]), (float(ts[k]), 0.0, 0.0)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(10)


def _gl(edges):
    edges = np.unique(edges)
    a, b = edges[:-1, None], edges[1:, None]
    x = (a + b) / 2 + (b - a) / 2 * _GL_X
    w = (b - a) / 2 * _GL_W
    return x.ravel(), w.ravel()


@lru_cache(maxsize=None)
def h_f0_convolution(t, u, beta=1.0):
    """I(t, u) = int_0^t int h(t-s, u, z) f0(s, z, 0) dz ds in d = 1.

    Composite Gauss-Legendre on panels graded toward s = 0, s = t, the kinks
    z = +-sqrt(s) of f0 and the peak z = u of h.
    """
    k = 2.0 ** -np.arange(0, 24)
    s_nodes, s_w = _gl(np.concatenate([[0.0], t / 2 * k, t - t / 2 * k, [t]]))
    scales = 2.0 ** np.arange(-6, 4)
    total = 0.0
    for s, ws in zip(s_nodes, s_w):
        tau = t - s
        rs, rt = math.sqrt(s), math.sqrt(tau)
        near = np.concatenate([[0.0, u], rs * scales, -rs * scales,
                               u + rt * scales, u - rt * scales])
        reach = np.max(np.abs(near)) + 1.0
        far = reach * 2.0 ** np.arange(0, 41)
        z, wz = _gl(np.concatenate([near, far, -far]))
        vals = h_fn(tau, u, z, 1, beta) * f0(s, z, 0.0, 1, beta)
        total += ws * float(np.sum(wz * vals))
    return total


def fit_c12_c13(n, beta=1.0, shrinks=(0.5, 0.25, 0.125)):
    """Fit C12 on {|u| <= sqrt t} u {|u| > 1} and C12(C13) on sqrt t < |u| <= 1.

    Returns (C12, C13, worst point); C13 is the dyadic shrink giving the
    smallest overall C12.
    """
    pts = _halton(n, [(0.01, 1.0), (0.0, 3.0)])
    I = np.array([h_f0_convolution(t, u, beta) for t, u in pts])
    t, u = pts[:, 0], pts[:, 1]
    plain = (u <= np.sqrt(t)) | (u > 1)
    hv = h_fn(t, u, 0.0, 1, beta)
    base = I[plain] / hv[plain]
    best = (math.inf, None, None)
    for s in shrinks:
        hs = h_fn(t, s * u, 0.0, 1, beta)
        mid = I[~plain] / hs[~plain]
        allr = np.concatenate([base, mid])
        if allr.max() < best[0]:
            idx = np.concatenate([np.flatnonzero(plain), np.flatnonzero(~plain)])
            k = idx[int(np.argmax(allr))]
            best = (float(allr.max()), s, (float(t[k]), float(u[k]), 0.0))
    return best


def _stable(a, b, tol):
    return abs(b - a) / max(abs(a), 1e-300) < tol


def check_lemma_inequalities(params: ModelParams, n=64, drift=0.05, which=None):
    """Fit C9..C13 on n and 2n Halton samples; pass iff finite and within ``drift``."""
    d, beta = params.d, params.beta
    fits = {
        "C9": lambda k: fit_c9(k, d),
        "C10": lambda k: fit_c10(k, d, beta),
        "C11": lambda k: fit_c11(k, d, beta),
    }
    if d == 1:
        fits["C12_C13"] = lambda k: fit_c12_c13(k, beta)
    reports = []
    for name, fit in fits.items():
        if which is not None and name not in which:
            continue
        coarse, fine = fit(n), fit(2 * n)
        if name == "C12_C13":
            vals = {"C12_coarse": coarse[0], "C12_refined": fine[0],
                    "C13_coarse": coarse[1], "C13_refined": fine[1]}
            a, b, pt = coarse[0], fine[0], fine[2]
        else:
            vals = {f"{name}_coarse": coarse[0], f"{name}_refined": fine[0]}
            a, b, pt = coarse[0], fine[0], fine[1]
        if name == "C11":
            vals["C11_exact"] = c11_exact(d, beta)
        rel = abs(b - a) / max(abs(a), 1e-300)
        ok = math.isfinite(a) and math.isfinite(b) and rel < drift
        reports.append(CheckReport(f"lemma_{name}_beta{beta:g}", vals, list(pt), rel / drift,
                                   "pass" if ok else "fail", {"samples": [n, 2 * n]}))
    return reports
