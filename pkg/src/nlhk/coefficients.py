"""Perturbation coefficients b(x, z) of the nonlocal part of the operator.

A coefficient is built from a small JSON-friendly description::

    {"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}, "d": 1, "beta": 1.0}

Supported families are ``zero``, ``constant``, ``indicator`` (optionally an
annulus through ``r_min``), ``product`` (``a(x) * rho(z)``) and ``table``
(multilinear interpolation of values on a lattice, zero outside).
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

FAMILIES = ("zero", "constant", "indicator", "product", "table")

# Half-width of the x box sampled when estimating the envelopes of an
# x-dependent coefficient, and radius used for z when the support is unbounded.
X_SAMPLE_BOX = 4.0
Z_SAMPLE_RADIUS = 4.0


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    d: int = 1
    beta: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise CoefficientError(f"dimension must be a positive integer, got {self.d}")
        if not (0.0 < self.beta < 2.0):
            raise CoefficientError(f"beta must lie in (0, 2), got {self.beta}")


def _as_points(a, d):
    """Coerce to an array of points; shape (n,) for d == 1, (n, d) otherwise."""
    a = np.asarray(a, dtype=float)
    if d == 1:
        return a
    if a.shape[-1] != d:
        raise CoefficientError(f"expected trailing axis of length {d}, got shape {a.shape}")
    return a


def _norm(z, d):
    return np.abs(z) if d == 1 else np.linalg.norm(z, axis=-1)


class Coefficient:
    """Bounded coefficient b(x, z), even in z, with cached envelope data.

    ``evaluate(x, z)`` is vectorised: for ``d == 1`` both arguments are plain
    arrays, otherwise the last axis has length ``d``.
    """

    def __init__(self, raw, params: ModelParams, *, family="custom", spec=None,
                 support_radius=math.inf, nonneg_flag=None, translation_invariant=False,
                 breakpoints=(), symmetrize=False, n_samples=100_000, x_box=X_SAMPLE_BOX):
        self._raw = raw
        self.params = params
        self.family = family
        self.spec = spec
        self.support_radius = float(support_radius)
        self.translation_invariant = bool(translation_invariant)
        self.breakpoints = tuple(sorted(float(r) for r in breakpoints if r > 0))
        self.symmetrized = bool(symmetrize)
        self.x_box = float(x_box)
        lo, hi = self._sample_envelopes(n_samples)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise CoefficientError("coefficient is not bounded on the sample set")
        self.m_b = lo
        self.M_b = hi
        self.sup_norm = max(abs(lo), abs(hi))
        self.nonneg_flag = (lo >= 0.0) if nonneg_flag is None else bool(nonneg_flag)

    @property
    def d(self):
        return self.params.d

    @property
    def beta(self):
        return self.params.beta

    def evaluate(self, x, z):
        x = _as_points(x, self.d)
        z = _as_points(z, self.d)
        val = self._raw(x, z)
        if self.symmetrized:
            val = 0.5 * (val + self._raw(x, -z))
        if np.isfinite(self.support_radius):
            val = np.where(_norm(z, self.d) > self.support_radius, 0.0, val)
        return val

    def radial(self, r, x=0.0):
        """b(x, r e_1) for r >= 0, the profile used by radial quadratures."""
        r = np.asarray(r, dtype=float)
        if self.d == 1:
            return self.evaluate(np.broadcast_to(np.asarray(x, float), r.shape), r)
        z = np.zeros(r.shape + (self.d,))
        z[..., 0] = r
        xx = np.zeros_like(z) + np.asarray(x, float)
        return self.evaluate(xx, z)

    def jump_density(self, x, z):
        """J(x, z) = b(x, z) / |z|^(d + beta)."""
        z = _as_points(z, self.d)
        r = _norm(z, self.d)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.evaluate(x, z) / r ** (self.d + self.beta)
        return np.where(r > 0, out, 0.0)

    def content_hash(self):
        blob = json.dumps(self.spec, sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def _sample_points(self, n):
        d = self.d
        sampler = qmc.Halton(d=2 * d, scramble=False)
        u = sampler.random(n + 1)[1:]
        zr = self.support_radius if np.isfinite(self.support_radius) else Z_SAMPLE_RADIUS
        x = (2 * u[:, :d] - 1) * self.x_box
        z = (2 * u[:, d:] - 1) * zr
        if d == 1:
            x, z = x[:, 0], z[:, 0]
        return x, z

    def _sample_envelopes(self, n):
        x, z = self._sample_points(n)
        vals = self.evaluate(x, z)
        lo, hi = float(np.min(vals)), float(np.max(vals))
        if np.isfinite(self.support_radius):
            # b vanishes beyond the support, so 0 belongs to the essential range
            lo, hi = min(lo, 0.0) + 0.0, max(hi, 0.0) + 0.0
        return lo, hi

    def check_symmetry(self, n=2000, atol=1e-12):
        x, z = self._sample_points(n)
        return float(np.max(np.abs(self.evaluate(x, z) - self.evaluate(x, -z)))) <= atol

    def __repr__(self):
        return (f"Coefficient(family={self.family!r}, d={self.d}, beta={self.beta}, "
                f"sup_norm={self.sup_norm:.6g}, support_radius={self.support_radius})")


class ScaledCoefficient(Coefficient):
    """b^(lam)(x, z) = lam^(beta/2 - 1) * b(lam^(-1/2) x, lam^(-1/2) z)."""

    def __init__(self, base: Coefficient, lam: float):
        if not lam > 0:
            raise CoefficientError(f"scaling parameter must be positive, got {lam}")
        self.base = base
        self.lam = float(lam)
        self.params = base.params
        self.family = base.family
        self.factor = self.lam ** (base.beta / 2 - 1)
        self.spec = {"base": base.spec, "lambda": self.lam}
        self.support_radius = base.support_radius * math.sqrt(self.lam)
        self.translation_invariant = base.translation_invariant
        self.breakpoints = tuple(r * math.sqrt(self.lam) for r in base.breakpoints)
        self.symmetrized = False
        self.x_box = base.x_box * math.sqrt(self.lam)
        self.sup_norm = self.factor * base.sup_norm
        self.m_b = self.factor * base.m_b
        self.M_b = self.factor * base.M_b
        self.nonneg_flag = base.nonneg_flag

    def evaluate(self, x, z):
        s = 1.0 / math.sqrt(self.lam)
        x = _as_points(x, self.d)
        z = _as_points(z, self.d)
        return self.factor * self.base.evaluate(s * x, s * z)


def rescale(c: Coefficient, lam: float) -> ScaledCoefficient:
    if not lam > 0:
        raise CoefficientError(f"scaling parameter must be positive, got {lam}")
    if isinstance(c, ScaledCoefficient):
        return ScaledCoefficient(c.base, c.lam * lam)
    return ScaledCoefficient(c, lam)


# ---------------------------------------------------------------------------
# families

def _radial_window(r, r_min, r_max):
    return (r >= r_min) & (r <= r_max)


def _profile(spec, d):
    """Return (rho, support, breakpoints, even) for a product profile spec."""
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return (lambda z: np.ones(np.shape(_norm(z, d)))), math.inf, (), True
    if kind == "indicator":
        lam = float(spec["lambda"])
        r_min = float(spec.get("r_min", 0.0))
        fn = lambda z: _radial_window(_norm(z, d), r_min, lam).astype(float)
        return fn, lam, (r_min, lam), True
    if kind == "table":
        if d != 1:
            raise CoefficientError("tabulated profiles are only supported for d = 1")
        nodes = np.asarray(spec["z_nodes"], float)
        vals = np.asarray(spec["values"], float)
        fn = lambda z: np.interp(z, nodes, vals, left=0.0, right=0.0)
        even = np.allclose(np.interp(-nodes, nodes, vals, left=0.0, right=0.0), vals)
        support = float(max(abs(nodes[0]), abs(nodes[-1])))
        return fn, support, tuple(np.abs(nodes)), even
    raise CoefficientError(f"unknown profile kind {kind!r}")


def _amplitude(spec, d):
    """a(x) = mean + osc * cos(freq * x_1)."""
    mean = float(spec.get("mean", 1.0))
    osc = float(spec.get("osc", 0.0))
    freq = float(spec.get("freq", 1.0))

    def a(x):
        x1 = x if d == 1 else x[..., 0]
        return mean + osc * np.cos(freq * x1)
    return a


def _table(params, d):
    if d != 1:
        raise CoefficientError("tabulated coefficients are only supported for d = 1")
    z_nodes = np.asarray(params["z_nodes"], float)
    values = np.asarray(params["values"], float)
    x_nodes = params.get("x_nodes")
    if np.any(np.diff(z_nodes) <= 0):
        raise CoefficientError("z_nodes must be strictly increasing")
    if x_nodes is None:
        if values.ndim != 1 or values.shape[0] != z_nodes.size:
            raise CoefficientError("values must match z_nodes")

        def raw(x, z):
            return np.interp(z, z_nodes, values, left=0.0, right=0.0) + np.zeros_like(x)
        ti = True
    else:
        x_nodes = np.asarray(x_nodes, float)
        if values.shape != (x_nodes.size, z_nodes.size):
            raise CoefficientError("values must have shape (len(x_nodes), len(z_nodes))")
        from scipy.interpolate import RegularGridInterpolator
        interp = RegularGridInterpolator((x_nodes, z_nodes), values, bounds_error=False,
                                         fill_value=0.0)

        def raw(x, z):
            x, z = np.broadcast_arrays(x, z)
            return interp(np.stack([x.ravel(), z.ravel()], axis=-1)).reshape(x.shape)
        ti = False
    even = all(np.allclose(np.interp(-z_nodes, z_nodes, row, left=0.0, right=0.0), row)
               for row in np.atleast_2d(values))
    support = float(max(abs(z_nodes[0]), abs(z_nodes[-1])))
    return raw, support, tuple(np.abs(z_nodes)), even, ti


def make_coefficient(spec, params: ModelParams | None = None, *, n_samples=100_000) -> Coefficient:
    """Build a Coefficient from its declarative description.

    ``spec`` may be a dict following the JSON contract or a path-like string
    pointing at such a document. ``params`` overrides ``d``/``beta`` in the document.
    An optional top-level ``nonneg_flag`` replaces the sampled sign verdict
    (a declared assumption, which the positivity check then tests).
    """
    if isinstance(spec, str):
        with open(spec) as fh:
            spec = json.load(fh)
    spec = dict(spec)
    family = spec.get("family")
    if family not in FAMILIES:
        raise CoefficientError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if params is None:
        params = ModelParams(int(spec.get("d", 1)), float(spec.get("beta", 1.0)))
    spec["d"], spec["beta"] = params.d, params.beta
    p = spec.get("params", {}) or {}
    for key, val in p.items():
        if isinstance(val, (int, float)) and not math.isfinite(val):
            raise CoefficientError(f"parameter {key!r} is not finite")
    d = params.d
    support, breaks, ti, even = math.inf, (), True, True

    if family == "zero":
        def raw(x, z):
            return np.zeros(np.broadcast_shapes(np.shape(_norm(z, d)), np.shape(x if d == 1 else x[..., 0])))
    elif family == "constant":
        c = float(p.get("c", 0.0))

        def raw(x, z):
            return np.full(np.broadcast_shapes(np.shape(_norm(z, d)), np.shape(x if d == 1 else x[..., 0])), c)
    elif family == "indicator":
        amp = float(p.get("M", p.get("c", 1.0)))
        lam = float(p["lambda"])
        r_min = float(p.get("r_min", 0.0))
        if not (lam > 0 and 0 <= r_min < lam):
            raise CoefficientError("indicator needs 0 <= r_min < lambda")
        support, breaks = lam, (r_min, lam)

        def raw(x, z):
            r = _norm(z, d)
            shape = np.broadcast_shapes(r.shape, np.shape(x if d == 1 else x[..., 0]))
            return np.broadcast_to(amp * _radial_window(r, r_min, lam), shape).astype(float)
    elif family == "product":
        a = _amplitude(p.get("amplitude", {}), d)
        rho, support, breaks, even = _profile(p.get("profile", {}), d)
        ti = float(p.get("amplitude", {}).get("osc", 0.0)) == 0.0

        def raw(x, z):
            return a(x) * rho(z)
    else:
        raw, support, breaks, even, ti = _table(p, d)

    if not even:
        warnings.warn(f"coefficient family {family!r} is not even in z; using (b(x,z)+b(x,-z))/2",
                      stacklevel=2)
    return Coefficient(raw, params, family=family, spec=spec, support_radius=support,
                       translation_invariant=ti, breakpoints=breaks, symmetrize=not even,
                       n_samples=n_samples, nonneg_flag=spec.get("nonneg_flag"))
