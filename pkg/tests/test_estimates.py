import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from nlhk import duhamel as D
from nlhk import estimates as E
from nlhk.coefficients import ModelParams
from nlhk.kernels import f0, h

from conftest import coef


@pytest.fixture(scope="module")
def gaussian_table(zero):
    return D.build_series(zero, D.SpaceTimeGrid(0.25, K=16))


@pytest.fixture(scope="module")
def neg_base(negative_shell):
    return D.build_base(negative_shell, D.choose_base_horizon(negative_shell), K=16)[0]


def test_report_json_contract(gaussian_table, zero):
    rep = E.check_conservativeness(gaussian_table, zero)
    obj = json.loads(rep.to_json())
    assert {"check_id", "constants", "worst_point", "margin", "verdict"} <= set(obj)
    assert obj["verdict"] == "pass" and len(obj["worst_point"]) == 3


def test_gaussian_suite_passes_with_margin(gaussian_table, zero):
    cons = E.check_conservativeness(gaussian_table, zero)
    assert cons.constants["max_mass_error"] < 1e-8
    near = E.check_near_diag_lower(gaussian_table, zero)
    assert near.passed and near.constants["min_q_over_p0"] == pytest.approx(1.0)
    assert E.check_positivity(gaussian_table, zero).passed
    two = E.check_two_sided(gaussian_table, zero)
    assert two.passed
    assert two.constants["C_upper"] == pytest.approx(1, rel=1e-6)
    assert two.constants["C_lower"] == pytest.approx(1, rel=1e-6)


def test_negative_part_keeps_mass_and_goes_negative(negative_shell, neg_base):
    assert E.check_conservativeness(neg_base, negative_shell).passed
    rep = E.check_positivity(neg_base, negative_shell)
    assert rep.passed and rep.constants["min_over_sup"] < -1e-4


def test_wrong_flag_fails_positivity(neg_base):
    liar = coef({"family": "indicator", "params": {"M": -0.2, "r_min": 1.0, "lambda": 2.0},
                 "nonneg_flag": True})
    assert not E.check_positivity(neg_base, liar).passed


def test_finite_range_requires_bounded_support(gaussian_table, half_a):
    with pytest.raises(ValueError):
        E.check_finite_range(gaussian_table, half_a)


def test_write_reports(tmp_path, gaussian_table, zero):
    reps = [E.check_conservativeness(gaussian_table, zero), E.check_positivity(gaussian_table, zero)]
    text = E.write_reports(reps, tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 2 and text.count("\n") == 2
    assert [json.loads(x)["check_id"] for x in lines] == ["conservativeness", "positivity"]


def f0_space_integral(s, beta):
    """int_R f0(s, z, 0) dz by quad, split at the kink and the far field."""
    g = lambda z: f0(s, z, 0.0, 1, beta)
    far = 10 * math.sqrt(s) + 1
    near = integrate.quad(g, 0, far, points=[math.sqrt(s)], limit=200)[0]
    return 2 * (near + integrate.quad(g, far, np.inf, limit=200)[0])


@pytest.mark.parametrize("beta", [0.5, 1.0, 1.5])
def test_c11_exact_against_quadrature(beta):
    # int_0^1 int f0(s, z, 0) dz ds, by direct quadrature
    ref = integrate.quad(lambda s: f0_space_integral(s, beta), 0, 1, limit=200)[0]
    assert E.c11_exact(1, beta) == pytest.approx(ref, rel=1e-5)


def test_c11_is_scale_free():
    # the ratio at t in {0.1, 0.5, 1} agrees within a factor 2
    beta = 1.0
    def ratio(t):
        return integrate.quad(lambda s: f0_space_integral(s, beta), 0, t,
                              limit=200)[0] / t ** (1 - beta / 2)
    vals = [ratio(t) for t in (0.1, 0.5, 1.0)]
    assert max(vals) / min(vals) < 2


def test_h_f0_convolution_against_nested_quad():
    t, u, beta = 0.5, 0.7, 1.0
    def inner(s):
        g = lambda z: h(t - s, u, z, 1, beta) * f0(s, z, 0.0, 1, beta)
        pts = sorted({0.0, u, math.sqrt(s), -math.sqrt(s), u + math.sqrt(t - s), u - math.sqrt(t - s)})
        return integrate.quad(g, -60, 60, points=pts, limit=400)[0]
    ref = integrate.quad(inner, 0, t, limit=100, epsrel=1e-6)[0]
    assert E.h_f0_convolution(t, u, beta) == pytest.approx(ref, rel=2e-3)


def test_lemma_fits_are_stable():
    reps = E.check_lemma_inequalities(ModelParams(1, 1.0), which={"C9", "C10", "C11"})
    assert [r.check_id for r in reps] == ["lemma_C9_beta1", "lemma_C10_beta1", "lemma_C11_beta1"]
    assert all(r.passed for r in reps)
    c9 = reps[0].constants
    # refinement can only raise a max-ratio fit
    assert c9["C9_refined"] >= c9["C9_coarse"]


@settings(max_examples=25, deadline=None)
@given(n=st.integers(8, 200))
def test_c9_fit_never_exceeds_the_dense_supremum(n):
    from nlhk.kernels import fitted_c9
    assert E.fit_c9(n)[0] <= fitted_c9(1) * (1 + 1e-9)
