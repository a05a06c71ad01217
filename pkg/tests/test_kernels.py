import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from nlhk import kernels as K
from nlhk.coefficients import ModelParams


def test_stable_constant_closed_values():
    # A(1,-1) = 1/pi and A(2,-1) = 1/(2 pi) follow from Gamma(1/2) = sqrt(pi)
    assert K.stable_constant(1, 1.0) == pytest.approx(1 / math.pi, rel=1e-14)
    assert K.stable_constant(2, 1.0) == pytest.approx(1 / (2 * math.pi), rel=1e-14)


@pytest.mark.parametrize("d,beta", [(1, 0.5), (1, 1.0), (1, 1.5), (2, 1.0)])
def test_stable_normalizer_reproduces_symbol(d, beta):
    ok, err = K.stable_normalizer(ModelParams(d, beta)).verify(rtol=1e-4)
    assert ok, err


@pytest.mark.parametrize("t", [0.01, 0.3, 2.0])
def test_gaussian_unit_mass_and_variance(t):
    mass = integrate.quad(lambda x: K.gaussian(t, x, 0.0), -np.inf, np.inf)[0]
    var = integrate.quad(lambda x: x * x * K.gaussian(t, x, 0.0), -np.inf, np.inf)[0]
    assert mass == pytest.approx(1, abs=1e-10)
    assert var == pytest.approx(2 * t, rel=1e-9)


def test_gaussian_2d_mass():
    t = 0.4
    m = integrate.quad(lambda r: 2 * math.pi * r * K.gaussian_radial(t, r, 2), 0, np.inf)[0]
    assert m == pytest.approx(1, abs=1e-10)


def test_fitted_c9_frozen():
    # max over rho of the density and Hessian ratios; attained by the Hessian term
    assert K.fitted_c9(1) == pytest.approx(18.81, abs=0.01)


def test_rejects_nonpositive_time():
    with pytest.raises(ValueError):
        K.gaussian(0.0, 0.0, 0.0)


@settings(max_examples=80, deadline=None)
@given(t=st.floats(1e-3, 10), x=st.floats(-20, 20))
def test_gaussian_bounds_hold(t, x):
    assert K.gaussian(t, x, 0.0) <= K.gaussian_density_bound(t, x) * (1 + 1e-12)
    assert K.gaussian_hessian_norm(t, x) <= K.gaussian_hessian_bound(t, x) * (1 + 1e-12)


@settings(max_examples=80, deadline=None)
@given(t=st.floats(1e-3, 10), x=st.floats(-20, 20), y=st.floats(-20, 20))
def test_kernel_symmetry_and_h_envelope(t, x, y):
    assert K.gaussian(t, x, y) == K.gaussian(t, y, x)
    assert K.h(t, x, y) <= t ** -0.5 + 1e-15
    assert K.h(t, x, y) >= min(t ** -0.5, K.gaussian(t, x, y)) - 1e-300
    assert K.f0(t, x, y) <= t ** -1.0 + 1e-12
