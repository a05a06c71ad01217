"""Acceptance suite: fifteen criteria at fixed tolerances, one summary line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdict table is printed
in the terminal summary.
"""
import math
from functools import lru_cache

import numpy as np
import pytest

from nlhk import duhamel as D
from nlhk import estimates as E
from nlhk import oracle as O
from nlhk import process_sim as PS
from nlhk.coefficients import ModelParams, rescale
from nlhk.kernels import gaussian_radial

from conftest import A1, coef, record

SPECS = {
    "zero": {"family": "zero", "params": {}},
    "half_a": {"family": "constant", "params": {"c": 0.5 * A1}},
    "indicator": {"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}},
    "negative_shell": {"family": "indicator", "params": {"M": -0.2, "r_min": 1.0, "lambda": 2.0}},
}


@lru_cache(maxsize=None)
def C(name):
    return coef(SPECS[name])


@lru_cache(maxsize=None)
def base(name):
    """Series table on the base horizon of the coefficient."""
    c = C(name)
    return D.build_base(c, D.choose_base_horizon(c))


@lru_cache(maxsize=None)
def to_time(name, t):
    return D.build_to_time(C(name), t)[0]


@lru_cache(maxsize=None)
def sim_indicator():
    cfg = PS.SimConfig(n_paths=100_000, dt=1e-3, eps_jump=0.05, seed=2024, horizon=1.0)
    s = PS.simulate(C("indicator"), cfg, [0.0], record_times=[0.25, 1.0],
                    exit_radii=(0.5, 1.0),
                    targets=[(2.0, 0.5), (3.0, 0.5), (4.0, 0.5)],
                    levy_pairs=[((-0.5, 0.5), (1.0, 1.5)), ((-0.5, 0.5), (2.6, 3.0))])
    return s, cfg


# 1 -------------------------------------------------------------------------

def test_criterion_01_gaussian_recovery():
    table, grid = base("zero")
    g = D.gaussian_table(grid, 1.0)
    rel = 0.0
    for i, t in enumerate(table.times):
        p0 = gaussian_radial(t, np.abs(table.offsets))
        keep = p0 > 0
        rel = max(rel, float(np.max(np.abs(table.values[i][keep] - p0[keep]) / p0[keep])))
    terms_zero = all(r == 0 for r in table.meta["sup_ratios"][1:]) if table.meta["sup_ratios"] \
        else True
    same_as_p0_table = np.allclose(table.values, g.values, rtol=1e-12, atol=0)
    ok = rel < 1e-6 and terms_zero and same_as_p0_table
    record(1, "Gaussian recovery", ok, f"max rel err {rel:.2e}, higher terms zero: {terms_zero}")
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_02_oracle_agreement():
    c = C("half_a")
    table = to_time("half_a", 0.5)
    sym = O.symbol_from_coefficient(c)
    worst, where = 0.0, None
    n_times = 0
    for i, t in enumerate(table.times):
        if not 0.05 <= t <= 0.5 + 1e-12:
            continue
        n_times += 1
        u = table.offsets
        sel = np.abs(u) <= 4 * math.sqrt(t) + 1e-12
        dens = O.density_from_symbol(sym, t, table.dx, float(np.max(np.abs(u[sel]))))
        ref = np.interp(u[sel], dens.offsets, dens.values)
        rel = np.abs(table.values[i][sel] - ref) / ref
        k = int(np.argmax(rel))
        if rel[k] > worst:
            worst, where = float(rel[k]), (float(t), float(u[sel][k]))
    ok = worst < 0.02 and n_times > 10
    record(2, "oracle agreement", ok, f"max rel err {worst:.2e} at (t, u) = {where} over {n_times} times")
    assert ok


# 3 -------------------------------------------------------------------------

def test_criterion_03_geometric_decay():
    table, _ = base("half_a")
    ratios = table.meta["sup_ratios"][1:]
    ok = len(ratios) > 0 and max(ratios) <= 0.6
    record(3, "geometric decay", ok, f"max sup ratio {max(ratios):.3f} over {len(ratios)} terms")
    assert ok


# 4 -------------------------------------------------------------------------

_mass_results = {}


@pytest.mark.parametrize("name", ["zero", "half_a", "indicator", "negative_shell"])
def test_criterion_04_conservativeness(name):
    rep = E.check_conservativeness(to_time(name, 0.25), C(name))
    err = rep.constants["max_mass_error"]
    _mass_results[name] = (rep.passed and err < 2e-3, err)
    detail = ", ".join(f"{k} {v[1]:.1e}" for k, v in _mass_results.items())
    record(4, "conservativeness", all(v[0] for v in _mass_results.values()),
           f"max |mass - 1| up to t = 0.25: {detail}")
    assert _mass_results[name][0]


# 5 -------------------------------------------------------------------------

def test_criterion_05_chapman_kolmogorov():
    c = C("half_a")
    table, grid = base("half_a")
    T = grid.T
    direct = table.at(T)
    composed = D.compose(table, T / 2, T / 2, c=c)
    sl = D._window(table)
    err = float(np.max(np.abs(composed[sl] - direct[sl])) / np.max(np.abs(direct[sl])))
    ok = err < 1e-3
    record(5, "Chapman-Kolmogorov", ok, f"rel err {err:.2e} at T = {T:g}")
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_06_scaling_identity():
    c = C("half_a")
    lam = 4.0
    grid = D.SpaceTimeGrid(0.25)
    direct = D.build_series(c, grid)
    image = D.build_series(rescale(c, lam), grid.scaled(lam))
    moved = D.scaling_transfer(image, lam, grid)
    sl = (slice(None),) + D._window(direct)
    err = float(np.max(np.abs(moved.values[sl] - direct.values[sl])) / np.max(direct.values[sl]))
    ok = err < 1e-3
    record(6, "scaling identity", ok, f"rel err {err:.2e} with lambda = {lam:g}")
    assert ok


# 7 -------------------------------------------------------------------------

def test_criterion_07_duhamel_residuals():
    c = C("half_a")
    table, _ = base("half_a")
    r1, rhs1 = D.duhamel_residual(table, c, "first")
    r2, rhs2 = D.duhamel_residual(table, c, "second")
    sl = (slice(None),) + D._window(table)
    mutual = float(np.max(np.abs(rhs1[sl] - rhs2[sl])) / np.max(np.abs(rhs1[sl])))
    ok = r1 < 1e-3 and r2 < 1e-3 and mutual < 5e-3
    record(7, "Duhamel residuals", ok, f"first {r1:.1e}, second {r2:.1e}, mutual {mutual:.1e}")
    assert ok


# 8 -------------------------------------------------------------------------

def test_criterion_08_near_diagonal_lower_bound():
    out = {}
    for name in ("half_a", "indicator"):
        out[name] = E.check_near_diag_lower(base(name)[0], C(name))
    ok = all(r.passed for r in out.values())
    detail = ", ".join(f"{k} min q/p0 {r.constants['min_q_over_p0']:.3f}" for k, r in out.items())
    record(8, "near-diagonal lower bound", ok, detail)
    assert ok


# 9 -------------------------------------------------------------------------

def test_criterion_09_positivity_iff():
    reps = {name: E.check_positivity(base(name)[0], C(name))
            for name in ("half_a", "indicator")}
    neg = C("negative_shell")
    reps["negative_shell"] = E.check_positivity(
        base("negative_shell")[0], neg, rebuild=lambda T: D.build_base(neg, T)[0])
    ok = all(r.passed for r in reps.values()) and \
        reps["negative_shell"].constants["min_over_sup"] < -1e-4
    detail = ", ".join(f"{k} min/sup {r.constants['min_over_sup']:.2e}" for k, r in reps.items())
    record(9, "positivity iff", ok, detail)
    assert ok


# 10 ------------------------------------------------------------------------

def test_criterion_10_finite_range():
    rep = E.check_finite_range(to_time("indicator", 0.5), C("indicator"))
    k = rep.constants
    ok = rep.passed and k["C7"] < 50 and k["poisson_tail_c"] is not None and k["poisson_tail_c"] > 0
    record(10, "finite-range bound", ok,
           f"C7 {k['C7']:.2f} (C8 {k['C8']}), far-field c {k['poisson_tail_c']}")
    assert ok


# 11 ------------------------------------------------------------------------

def test_criterion_11_monte_carlo_density():
    res = {}
    cfg0 = PS.SimConfig(n_paths=100_000, dt=1e-3, eps_jump=0.05, seed=7, horizon=0.25)
    s0 = PS.simulate(C("zero"), cfg0, [0.0])
    res["zero"] = PS.empirical_density_check(s0, to_time("zero", 0.25), 0.25)
    s1, _ = sim_indicator()
    res["indicator"] = PS.empirical_density_check(s1, to_time("indicator", 0.25), 0.25)
    ok = all(ks < 0.02 for ks, _ in res.values())
    detail = ", ".join(f"{k} KS {v[0]:.4f} (se {v[1]:.4f})" for k, v in res.items())
    record(11, "Monte Carlo agreement", ok, detail)
    assert ok


# 12 ------------------------------------------------------------------------

def test_criterion_12_exit_time():
    s, _ = sim_indicator()
    kappas = {r: PS.fit_exit_kappa(s, r) for r in (0.5, 1.0)}
    c20 = {r: PS.fit_exit_linear(s, r, np.linspace(0.02, 1.0, 50) * r * r) for r in (0.5, 1.0)}
    stable = max(c20.values()) / min(c20.values()) < 2.0
    ok = all(k is not None and k < 32 / 9 for k in kappas.values()) and stable
    record(12, "exit time", ok, f"kappa {kappas}, C20 {({r: round(v, 3) for r, v in c20.items()})}")
    assert ok


# 13 ------------------------------------------------------------------------

def test_criterion_13_hitting_scaling():
    s, _ = sim_indicator()
    r = 0.5
    kappa = PS.fit_exit_kappa(s, r)
    dist = [2.0, 3.0, 4.0]
    probs = [PS.hitting_prob_stats(s, (y, r), kappa * r * r)[0] for y in dist]
    slope = PS.hitting_slope(dist, probs)
    ok = math.isfinite(slope) and abs(slope - (-2.0)) <= 0.3
    record(13, "hitting scaling", ok, f"slope {slope:.2f} (target -2 +- 0.3), P = {probs}")
    assert ok


# 14 ------------------------------------------------------------------------

def test_criterion_14_levy_system():
    s, _ = sim_indicator()
    near = PS.levy_system_check(s, (-0.5, 0.5), (1.0, 1.5))
    far = PS.levy_system_check(s, (-0.5, 0.5), (2.6, 3.0))
    ok = near["pass"] and near["count"] > 0 and far["count"] == 0 and far["compensator"] == 0
    record(14, "Levy system", ok,
           f"near count {near['count']:.4f} vs {near['compensator']:.4f} (se {near['se']:.4f}); "
           f"far count {far['count']}")
    assert ok


# 15 ------------------------------------------------------------------------

_lemma_results = {}


@pytest.mark.parametrize("beta", [0.5, 1.0, 1.5])
def test_criterion_15_lemma_suite(beta):
    reps = E.check_lemma_inequalities(ModelParams(1, beta))
    _lemma_results[beta] = reps
    ok_all = all(r.passed for rs in _lemma_results.values() for r in rs)
    drift = max(r.margin * 0.05 for rs in _lemma_results.values() for r in rs)
    record(15, "lemma suite", ok_all,
           f"betas {sorted(_lemma_results)}, max drift {drift:.3f}")
    assert all(r.passed for r in reps)
