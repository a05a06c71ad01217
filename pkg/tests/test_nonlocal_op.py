import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlhk import nonlocal_op as N
from nlhk.kernels import stable_constant

from conftest import coef


def fourier_reference(d, beta):
    """-(-Delta)^(beta/2) exp(-|x|^2/2) at 0, from the Fourier side."""
    if d == 1:
        return -(2 / math.sqrt(2 * math.pi)) * 2 ** ((beta - 1) / 2) * math.gamma((beta + 1) / 2)
    return -2 ** (beta / 2) * math.gamma(1 + beta / 2)


@pytest.mark.parametrize("d,beta", [(1, 0.5), (1, 1.0), (1, 1.5), (2, 1.0)])
def test_fractional_laplacian_of_gaussian(d, beta):
    c = coef({"family": "constant", "params": {"c": stable_constant(d, beta)}}, d=d, beta=beta)
    if d == 1:
        f, x = (lambda x: np.exp(-x ** 2 / 2)), 0.0
    else:
        f, x = (lambda x: np.exp(-np.sum(x ** 2, axis=-1) / 2)), np.zeros(2)
    r = N.apply_Sb(c, f, x)
    ref = fourier_reference(d, beta)
    assert r.value == pytest.approx(ref, rel=1e-5)
    # the reported error bounds the true one (the beta = 0.5 tail is the slow part)
    assert abs(r.value - ref) <= r.error


def test_zero_coefficient_gives_zero():
    r = N.apply_Sb(coef({"family": "zero"}), np.cos, 0.3)
    assert r.value == 0.0 and r.error == 0.0


def test_vectorised_matches_pointwise():
    c = coef({"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}})
    f = lambda x: np.exp(-x ** 2)
    xs = np.linspace(-1.5, 1.5, 7)
    many = N.apply_Sb_many(c, f, xs)
    one = [N.apply_Sb(c, f, x).value for x in xs]
    np.testing.assert_allclose(many, one, rtol=1e-9, atol=1e-12)


def test_cell_kernel_matches_pointwise_kernel():
    c = coef({"family": "constant", "params": {"c": 0.3}})
    s, h, n = 0.1, 0.02, 400
    G = N.cell_kernel_1d(c, s, h, n)
    k = np.arange(-n, n + 1)[::40]
    ref = N.Sb_gaussian(c, s, k * h, 0.0)
    np.testing.assert_allclose(G[::40], ref, rtol=1e-3)


def test_cell_kernel_mass_balance():
    # S^b p0 integrates to zero; beyond |u| = U it carries 2c (1/U + 2s/U^3)
    c = coef({"family": "constant", "params": {"c": 0.3}})
    s, h, n = 0.1, 0.02, 400
    G = N.cell_kernel_1d(c, s, h, n)
    U = (n + 0.5) * h
    tail = 2 * 0.3 * (1 / U + 2 * s / U ** 3)
    assert G.sum() * h + tail == pytest.approx(0.0, abs=2e-5)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-2, 2), a=st.floats(0.3, 3.0))
def test_operator_is_symmetric_and_linear(x, a):
    c = coef({"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}})
    f = lambda y: np.exp(-y ** 2)
    v = N.apply_Sb(c, f, x).value
    assert N.apply_Sb(c, f, -x).value == pytest.approx(v, rel=1e-9, abs=1e-12)
    assert N.apply_Sb(c, lambda y: a * f(y), x).value == pytest.approx(a * v, rel=1e-9, abs=1e-12)


def test_constants_are_annihilated():
    c = coef({"family": "constant", "params": {"c": 0.5}})
    assert abs(N.apply_Sb(c, lambda y: np.ones_like(y), 0.4).value) < 1e-12
