"""Closed-form Gaussian kernel, comparison functions and the stable normaliser."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .coefficients import ModelParams


def _distance(x, y, d):
    diff = np.asarray(x, float) - np.asarray(y, float)
    return np.abs(diff) if d == 1 else np.linalg.norm(diff, axis=-1)


def _check_time(t):
    t = np.asarray(t, float)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    return t


def gaussian_radial(t, r, d=1):
    """(4 pi t)^(-d/2) exp(-r^2 / 4t); underflow clamps to zero."""
    t = _check_time(t)
    with np.errstate(under="ignore"):
        return (4 * np.pi * t) ** (-d / 2) * np.exp(-np.asarray(r, float) ** 2 / (4 * t))


def gaussian(t, x, y, d=1):
    """Heat kernel of the Laplacian (variance 2t per axis)."""
    return gaussian_radial(t, _distance(x, y, d), d)


def gaussian_hessian_norm(t, x, d=1):
    """Largest absolute eigenvalue of the Hessian of p0(t, .) at x."""
    t = _check_time(t)
    r2 = _distance(x, 0.0, d) ** 2
    p = gaussian_radial(t, np.sqrt(r2), d)
    return p * np.maximum(np.abs(r2 / (4 * t * t) - 1 / (2 * t)), 1 / (2 * t))


def _shape_factor(t, r, power):
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.sqrt(t) / r) ** power


@lru_cache(maxsize=None)
def fitted_c9(d=1):
    """Smallest constants making both Gaussian bounds hold (scale-free in |x|/sqrt t)."""
    rho = np.linspace(0.0, 40.0, 400_001)
    dens = gaussian_radial(1.0, rho, d) / _shape_factor(1.0, rho, d + 2)
    hess = gaussian_hessian_norm(1.0, rho if d == 1 else np.c_[rho, np.zeros((rho.size, d - 1))], d)
    hess = hess / _shape_factor(1.0, rho, d + 4)
    return float(max(dens.max(), hess.max()))


def gaussian_density_bound(t, x, d=1, c9=None):
    c9 = fitted_c9(d) if c9 is None else c9
    r = _distance(x, 0.0, d)
    return c9 * t ** (-d / 2) * _shape_factor(t, r, d + 2)


def gaussian_hessian_bound(t, x, d=1, c9=None):
    """C9 t^(-(d+2)/2) (1 ^ sqrt(t)/|x|)^(d+4)."""
    t = _check_time(t)
    c9 = fitted_c9(d) if c9 is None else c9
    r = _distance(x, 0.0, d)
    return c9 * t ** (-(d + 2) / 2) * _shape_factor(t, r, d + 4)


def f0(t, x, y, d=1, beta=1.0):
    t = _check_time(t)
    r = _distance(x, y, d)
    return np.maximum(np.sqrt(t), r) ** (-(d + beta))


def h(t, x, y, d=1, beta=1.0):
    """t^(-d/2) ^ (p0 + t/|x-y|^(d+beta)), equal to t^(-d/2) on the diagonal."""
    t = _check_time(t)
    r = _distance(x, y, d)
    with np.errstate(divide="ignore"):
        jump = np.where(r > 0, t / r ** (d + beta), np.inf)
    return np.minimum(t ** (-d / 2), gaussian_radial(t, r, d) + jump)


def stable_constant(d, beta):
    """A(d, -beta) = beta 2^(beta-1) Gamma((d+beta)/2) / (pi^(d/2) Gamma(1 - beta/2))."""
    logv = (math.log(beta) + (beta - 1) * math.log(2) + gammaln((d + beta) / 2)
            - (d / 2) * math.log(math.pi) - gammaln(1 - beta / 2))
    return math.exp(logv)


def _sphere_area(d):
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def stable_symbol_by_quadrature(d, beta, xi_norm, const):
    """Integral of (1 - cos(xi.z)) const/|z|^(d+beta) over R^d, for d in {1, 2}.

    In d = 1 the radial integral is 2 int_0^inf (1-cos(k r)) r^(-1-beta) dr; in
    d = 2 the angular average of cos(k r cos(theta)) is J0(k r).
    """
    from scipy.special import j0
    k = float(xi_norm)
    if d == 1:
        kern = lambda r: 1 - np.cos(k * r)
        cos_tail = lambda a: integrate.quad(lambda r: r ** (-1 - beta), a, np.inf,
                                            weight="cos", wvar=k, limit=400)[0]
        weight = 2.0
    elif d == 2:
        kern = lambda r: 1 - j0(k * r)
        cos_tail = None
        weight = 2 * math.pi
    else:
        raise ValueError("quadrature check implemented for d = 1, 2")
    a = 1.0 / k
    with warnings.catch_warnings():
        # 1 - J0 loses relative digits near r = 0; the absolute error stays tiny
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        near = integrate.quad(lambda r: kern(r) * r ** (-1 - beta), 0, a,
                              limit=200, epsabs=1e-14, epsrel=1e-12)[0]
    if d == 1:
        far = a ** (-beta) / beta - cos_tail(a)
    else:
        # J0 tail: integrate panel by panel over half periods, then the remainder
        # of int (1 - J0) r^(-1-beta) is dominated by r^(-1-beta)
        edges = a + np.arange(0, 4001) * math.pi / k
        far = 0.0
        for lo, hi in zip(edges[:-1], edges[1:]):
            far += integrate.quad(lambda r: kern(r) * r ** (-1 - beta), lo, hi)[0]
        far += edges[-1] ** (-beta) / beta
    return const * weight * (near + far)


@dataclass(frozen=True)
class StableNormalizer:
    params: ModelParams
    value: float

    def verify(self, xis=(0.5, 1.0, 3.0), rtol=1e-4):
        """Check int (1-cos xi.z) A/|z|^(d+beta) dz = |xi|^beta at a few frequencies."""
        d, beta = self.params.d, self.params.beta
        errs = [abs(stable_symbol_by_quadrature(d, beta, xi, self.value) / xi ** beta - 1)
                for xi in xis]
        return max(errs) < rtol, max(errs)


def stable_normalizer(params: ModelParams) -> StableNormalizer:
    return StableNormalizer(params, stable_constant(params.d, params.beta))


def sphere_area(d):
    return _sphere_area(d)
