"""Quadrature for the nonlocal operator S^b.

S^b f(x) is evaluated in the symmetrised (second difference) form

    int (f(x+z) + f(x-z) - 2 f(x)) / 2 * b(x, z) / |z|^(d+beta) dz,

which equals the principal value integral because b(x, .) is even. Besides
pointwise evaluation this module provides the lattice kernels used by the
Duhamel iteration: cell averages of S^b p0(s, ., y) over the lattice cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .coefficients import Coefficient
from .kernels import gaussian, gaussian_radial, sphere_area

GL_NODES = 12
# geometric refinement toward the origin stops at inner_radius * 2^-INNER_LEVELS;
# below that the second difference is extrapolated as c r^2 (finer panels
# would only amplify cancellation error)
INNER_LEVELS = 16
TAIL_TOL = 1e-8
Z_MAX_CAP = 1e12


def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def panel_rule(edges, n=GL_NODES, beta=None):
    """Gauss-Legendre nodes and weights on consecutive panels [edges[i], edges[i+1]].

    With ``beta`` given, a first panel starting at 0 is replaced by a single
    node at its right end whose weight integrates c r^2 * r^(-1-beta) exactly.
    """
    edges = np.asarray(edges, float)
    if beta is not None and edges[0] == 0.0:
        r_f = edges[1]
        nodes, weights = panel_rule(edges[1:], n)
        return np.concatenate([[r_f], nodes]), np.concatenate([[r_f / (2 - beta)], weights])
    lo, hi = edges[:-1], edges[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    x, w = _gl(n)
    nodes = (lo[:, None] + (hi - lo)[:, None] * x[None, :]).ravel()
    weights = ((hi - lo)[:, None] * w[None, :]).ravel()
    return nodes, weights


def graded_edges(a, b, levels=INNER_LEVELS, ratio=0.5):
    """Panel edges on [a, b] refined geometrically toward a."""
    span = b - a
    inner = a + span * ratio ** np.arange(levels, 0, -1)
    return np.concatenate([[a], inner, [b]])


def _merge(edges, extra, lo, hi):
    pts = [e for e in extra if lo < e < hi]
    return np.unique(np.concatenate([edges, pts]))


@dataclass(frozen=True)
class PVQuadrature:
    """Radial x angular rule for the symmetrised integrand.

    ``nodes``/``weights`` are radii and radial weights (with the r^(d-1)
    Jacobian folded in); the first ``n_inner`` of them form the inner rule on
    (0, inner_radius]. ``directions`` cover a half sphere since the
    integrand is even in z.
    """
    d: int
    inner_radius: float
    z_max: float
    nodes: np.ndarray
    weights: np.ndarray
    n_inner: int
    directions: np.ndarray
    dir_weights: np.ndarray = field(repr=False)

    @property
    def inner_rule(self):
        return self.nodes[:self.n_inner], self.weights[:self.n_inner]

    @property
    def outer_rule(self):
        return self.nodes[self.n_inner:], self.weights[self.n_inner:]

    def points(self):
        """All quadrature points z (radius times direction) and their weights."""
        if self.d == 1:
            return self.nodes.copy(), self.weights.copy()
        z = self.nodes[:, None, None] * self.directions[None, :, :]
        w = self.weights[:, None] * self.dir_weights[None, :]
        return z.reshape(-1, self.d), w.ravel()


def make_pv_quadrature(d, inner_radius, z_max, beta, *, breakpoints=(), features=(),
                       n=GL_NODES, n_theta=64):
    """Build a PVQuadrature.

    ``features`` is a list of (radius, width) pairs where the integrand has
    structure (e.g. a Gaussian bump); edges are added around them.
    """
    if not (0 < inner_radius and inner_radius < z_max):
        inner_radius = min(inner_radius, 0.5 * z_max)
    inner_edges = graded_edges(0.0, inner_radius)
    k = max(1, math.ceil(math.log2(max(z_max / inner_radius, 1.0 + 1e-12))))
    outer_edges = inner_radius * 2.0 ** np.arange(0, k + 1)
    outer_edges[-1] = z_max
    outer_edges = outer_edges[outer_edges <= z_max]
    extra = list(breakpoints)
    for centre, width in features:
        if width <= 0:
            continue
        offs = width * np.array([-16, -8, -4, -2, -1, -0.5, 0, 0.5, 1, 2, 4, 8, 16])
        extra.extend(centre + offs)
    inner_edges = _merge(inner_edges, extra, 0.0, inner_radius)
    outer_edges = _merge(np.append(outer_edges, z_max), extra, inner_radius, z_max)
    ri, wi = panel_rule(inner_edges, n, beta=beta)
    ro, wo = panel_rule(outer_edges, n)
    nodes = np.concatenate([ri, ro])
    weights = np.concatenate([wi, wo]) * nodes ** (d - 1)
    if d == 1:
        dirs, dw = np.ones((1, 1)), np.ones(1)
    elif d == 2:
        th = (np.arange(n_theta) + 0.5) * math.pi / n_theta
        dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        dw = np.full(n_theta, math.pi / n_theta)
    else:
        raise ValueError("quadrature implemented for d = 1, 2")
    return PVQuadrature(d, float(inner_radius), float(z_max), nodes, weights, ri.size, dirs, dw)


def choose_z_max(c: Coefficient, f_sup, tol=TAIL_TOL):
    """Outer truncation radius; returns (z_max, tail_bound)."""
    if np.isfinite(c.support_radius):
        return c.support_radius, 0.0
    if c.sup_norm == 0:
        return 1.0, 0.0
    d, beta = c.d, c.beta
    coef = 2 * f_sup * c.sup_norm * sphere_area(d) / beta
    z = (coef / tol) ** (1 / beta)
    if z > Z_MAX_CAP:
        return Z_MAX_CAP, coef * Z_MAX_CAP ** (-beta)
    return max(z, 1.0), tol


@dataclass
class SbResult:
    value: float
    error: float
    diverged: bool = False


def _second_difference_integral(c, f, x, quad):
    z, w = quad.points()
    if c.d == 1:
        fx = float(f(np.asarray([x]))[0])
        xs = np.full(z.shape, float(x))
        vals = f(x + z) + f(x - z) - 2 * fx
        bw = c.evaluate(xs, z)
        r = np.abs(z)
    else:
        x = np.asarray(x, float)
        fx = float(f(x[None, :])[0])
        vals = f(x[None, :] + z) + f(x[None, :] - z) - 2 * fx
        bw = c.evaluate(np.broadcast_to(x, z.shape), z)
        r = np.linalg.norm(z, axis=-1)
    return float(np.sum(w * vals * bw / r ** (c.d + c.beta)))


def apply_Sb(c: Coefficient, f, x, *, inner_radius=1.0, features=(), f_sup=None,
             tol=TAIL_TOL) -> SbResult:
    """S^b f(x) for a vectorised function handle ``f``, with an error estimate.

    The error estimate compares the rule with a coarser one of half order.
    """
    if c.sup_norm == 0:
        return SbResult(0.0, 0.0, False)
    if f_sup is None:
        probe = np.linspace(-50, 50, 2001)
        if c.d == 1:
            f_sup = float(np.max(np.abs(f(np.asarray(x, float) + probe))))
        else:
            pts = np.asarray(x, float)[None, :] + probe[:, None] * np.eye(c.d)[0]
            f_sup = float(np.max(np.abs(f(pts))))
    z_max, tail = choose_z_max(c, f_sup, tol)
    brk = c.breakpoints
    fine = make_pv_quadrature(c.d, inner_radius, z_max, c.beta, breakpoints=brk,
                              features=features)
    coarse = make_pv_quadrature(c.d, inner_radius, z_max, c.beta, breakpoints=brk,
                                features=features, n=GL_NODES // 2, n_theta=32)
    v = _second_difference_integral(c, f, x, fine)
    v2 = _second_difference_integral(c, f, x, coarse)
    err = abs(v - v2) + tail
    return SbResult(v, err, bool(tail > tol or not np.isfinite(v)))


def apply_Sb_many(c: Coefficient, f, xs, *, inner_radius=1.0, f_sup=1.0, tol=TAIL_TOL):
    """S^b f at many 1-d points with one shared rule (no error estimate)."""
    xs = np.asarray(xs, float)
    if c.sup_norm == 0:
        return np.zeros_like(xs)
    if c.d != 1:
        return np.array([apply_Sb(c, f, x, inner_radius=inner_radius, f_sup=f_sup).value
                         for x in xs])
    z_max, _ = choose_z_max(c, f_sup, tol)
    quad = make_pv_quadrature(1, inner_radius, z_max, c.beta, breakpoints=c.breakpoints)
    z, w = quad.points()
    z = z.ravel()
    w = w.ravel()
    X = xs[:, None]
    vals = f(X + z) + f(X - z) - 2 * f(xs)[:, None]
    bw = c.evaluate(np.broadcast_to(X, vals.shape), np.broadcast_to(z, vals.shape))
    return np.sum(w * vals * bw / np.abs(z) ** (1 + c.beta), axis=1)


def _pointwise(fn, z, y, d):
    z = np.asarray(z, float)
    y = np.asarray(y, float)
    if d == 1:
        z, y = np.broadcast_arrays(z, y)
        out = np.array([fn(zi, yi) for zi, yi in zip(z.ravel(), y.ravel())])
        return out.reshape(z.shape)
    lead = np.broadcast_shapes(z.shape[:-1], y.shape[:-1])
    z = np.broadcast_to(z, lead + (d,)).reshape(-1, d)
    y = np.broadcast_to(y, lead + (d,)).reshape(-1, d)
    return np.array([fn(zi, yi) for zi, yi in zip(z, y)]).reshape(lead)


def Sb_gaussian(c: Coefficient, s, z, y, *, with_error=False):
    """S^b_z p0(s, z, y), the driving term of the Duhamel recursion (vectorised)."""
    d = c.d
    width = math.sqrt(2 * s)
    p_sup = float(gaussian_radial(s, 0.0, d))

    def one(zi, yi):
        dist = float(np.linalg.norm(np.atleast_1d(zi - yi)))
        f = lambda w: gaussian(s, w, yi, d)
        res = apply_Sb(c, f, zi, inner_radius=min(math.sqrt(s), 1.0),
                       features=[(dist, width)], f_sup=p_sup)
        return (res.value, res.error) if with_error else res.value

    if with_error:
        vals = _pointwise(lambda a, b: one(a, b)[0], z, y, d)
        errs = _pointwise(lambda a, b: one(a, b)[1], z, y, d)
        return vals, errs
    return _pointwise(one, z, y, d)


def abs_frac_gaussian(s, z, y, d=1, beta=1.0, n=GL_NODES):
    """Absolute-integrand majorant of the fractional Laplacian of p0(s, ., y) at z.

    Inside radius rho = sqrt(s) (if |z-y|^2 <= s) or |z-y|/2 (otherwise) the
    first order Taylor polynomial is subtracted; outside, |p0(z+w) - p0(z)|.
    No normalising constant is applied.
    """
    def one(zi, yi):
        x = np.atleast_1d(np.asarray(zi, float) - np.asarray(yi, float))
        r = float(np.linalg.norm(x))
        rho = math.sqrt(s) if r * r <= s else r / 2
        width = math.sqrt(2 * s)
        p = lambda u: gaussian_radial(s, np.linalg.norm(u, axis=-1), d)
        px = float(gaussian_radial(s, r, d))
        grad = -x / (2 * s) * px
        z_max = max(r, 1.0) * 1e3 + 50 * width
        quad = make_pv_quadrature(d, rho, z_max, beta, features=[(r, width)], n=n, n_theta=256)
        pts, w = quad.points()
        pts = pts.reshape(-1, d) if d > 1 else pts[:, None]
        if d == 1:
            pts = np.concatenate([pts, -pts])
            w = np.concatenate([w, w])
        else:
            pts = np.concatenate([pts, -pts])
            w = np.concatenate([w, w])
        rad = np.linalg.norm(pts, axis=-1)
        diff = p(x[None, :] + pts) - px
        inner = rad <= rho
        diff = np.where(inner, diff - pts @ grad, diff)
        total = float(np.sum(w * np.abs(diff) / rad ** (d + beta)))
        # beyond z_max |p0(x+w) - p0(x)| is essentially p0(x)
        total += px * sphere_area(d) * z_max ** (-beta) / beta
        return total

    return _pointwise(one, z, y, d)


# ---------------------------------------------------------------------------
# lattice kernels for the Duhamel iteration

def _box_mass(c, sigma, h):
    """Mass of N(0, sigma^2) in the cell [c - h/2, c + h/2] (exact box for sigma = 0)."""
    c = np.asarray(c, float)
    if sigma == 0:
        a = np.abs(c)
        return np.where(a < h / 2, 1.0, np.where(a == h / 2, 0.5, 0.0))
    return ndtr((c + h / 2) / sigma) - ndtr((c - h / 2) / sigma)


def radial_tail(jr, r0, *, z_far=1e9, finite_support=math.inf):
    """int_{r0}^inf jr(r) dr for a radial jump density profile jr.

    Beyond ``z_far`` the profile is extended as a pure power law.
    """
    if r0 >= finite_support:
        return 0.0
    hi = min(z_far, finite_support)
    edges = r0 * 2.0 ** np.arange(0, 1 + math.ceil(math.log2(hi / r0)))
    edges[-1] = hi
    edges = np.unique(np.clip(edges, r0, hi))
    nodes, w = panel_rule(edges)
    total = float(np.sum(w * jr(nodes)))
    if not np.isfinite(finite_support):
        last = float(jr(np.array([hi]))[0]) * hi
        # jr ~ C r^(-1-beta) beyond hi; the exponent is read from two samples
        r2 = np.array([hi, 2 * hi])
        v = jr(r2)
        if v[0] > 0 and v[1] > 0:
            expo = -math.log2(v[1] / v[0])
            total += last / (expo - 1) if expo > 1 else 0.0
    return total


def cell_kernel_1d(c: Coefficient, s, h, n_off, x_nodes=None, n=8):
    """Cell-averaged driving kernel on a 1-d lattice.

    Returns G[k, j] ~ (1/h) int_{cell k} S^b p0(s, v + y, y) dv for offsets
    v_k = k h, k = -n_off..n_off, with the coefficient frozen at ``x_nodes[j]``
    (a single column at x = 0 when ``x_nodes`` is None). Summing G over k
    against h gives the exact mass (zero up to the tail beyond the window),
    and the limit s -> 0 is the discrete jump stencil.
    """
    sigma = math.sqrt(2 * s) if s > 0 else 0.0
    xs = np.zeros(1) if x_nodes is None else np.asarray(x_nodes, float)
    ks = np.arange(0, n_off + 1) * h
    r_cut = (n_off + 0.5) * h + 8 * sigma
    support = c.support_radius
    r_end = min(r_cut, support) if np.isfinite(support) else r_cut
    n_cells = math.ceil(r_end / h - 0.5) + 1
    half = (np.arange(0, n_cells + 1) + 0.5) * h
    edges = np.concatenate([graded_edges(0.0, h / 2)[:-1], half])
    if 0 < sigma < h / 2:
        # resolve the smoothed cell edges sitting at half-integers
        offs = sigma * np.array([0.25, 0.5, 1, 2, 4, 8])
        offs = offs[offs < h / 2]
        extra = (half[:, None] + np.concatenate([-offs, offs])[None, :]).ravel()
        edges = np.concatenate([edges, extra])
    edges = np.concatenate([edges, [b for b in c.breakpoints]])
    edges = np.unique(edges[(edges >= 0) & (edges <= r_end)])
    if edges[-1] < r_end:
        edges = np.append(edges, r_end)
    r, w = panel_rule(edges, n, beta=c.beta)
    bk = _box_mass(ks, sigma, h)
    E = (_box_mass(ks[:, None] + r[None, :], sigma, h)
         + _box_mass(ks[:, None] - r[None, :], sigma, h) - 2 * bk[:, None])
    J = np.empty((r.size, xs.size))
    tails = np.empty(xs.size)
    for j, x in enumerate(xs):
        J[:, j] = c.radial(r, x) / r ** (1 + c.beta)
        jr = lambda rr, x=x: c.radial(rr, x) / rr ** (1 + c.beta)
        tails[j] = radial_tail(jr, r_end, finite_support=support)
    G_half = (E @ (w[:, None] * J) - 2 * bk[:, None] * tails[None, :]) / h
    G = np.concatenate([G_half[:0:-1], G_half], axis=0)
    return G if x_nodes is not None else G[:, 0]


def jump_stencil_2d(c: Coefficient, h, m_max, n=6, n_theta=720):
    """Cell integrals W[m] = int_{cell m} J for a radial 2-d coefficient.

    Returns (W, c0, tail): W has shape (2 m_max + 1,)*2 with W[centre] = 0,
    c0 = (1/2) int_{cell 0} z_1^2 J, tail = int outside the stencil box of J.
    """
    beta = c.beta
    jr = lambda r: c.radial(r) / np.maximum(r, 1e-300) ** (2 + beta)
    x, wx = _gl(n)
    u, wu = x - 0.5, wx
    idx = np.arange(-m_max, m_max + 1)
    pos = (idx[:, None] + u[None, :]) * h
    R = np.hypot(pos[:, None, :, None], pos[None, :, None, :])
    W = np.einsum("abij,i,j->ab", jr(R), wu, wu) * h * h
    # cells touching the origin need a finer tensor rule
    sub = 8
    us = ((np.arange(sub)[:, None] + x[None, :]) / sub).ravel() - 0.5
    ws = np.tile(wx / sub, sub)
    for a in range(-2, 3):
        for b in range(-2, 3):
            if a == 0 and b == 0:
                continue
            Rn = np.hypot((a + us)[:, None] * h, (b + us)[None, :] * h)
            W[a + m_max, b + m_max] = float(np.sum(ws[:, None] * ws[None, :] * jr(Rn))) * h * h
    W[m_max, m_max] = 0.0
    # near field: polar integral over the central cell; far field: outside the box
    th = (np.arange(n_theta) + 0.5) * (math.pi / 2) / n_theta
    edge = np.maximum(np.abs(np.cos(th)), np.abs(np.sin(th)))
    c0 = 0.0
    tail = 0.0
    for t, e in zip(th, edge):
        rn, rw = panel_rule(graded_edges(0.0, (h / 2) / e), 8)
        c0 += float(np.sum(rw * rn ** 3 * math.cos(t) ** 2 * jr(rn)))
        tail += radial_tail(lambda r: jr(r) * r, (m_max + 0.5) * h / e,
                            finite_support=c.support_radius)
    dth = (math.pi / 2) / n_theta
    return W, 0.5 * 4 * c0 * dth, 4 * tail * dth


def cell_kernel_2d(c: Coefficient, s, h, n_off, stencil=None):
    """2-d analogue of cell_kernel_1d for translation-invariant coefficients.

    Uses the jump stencil applied to cell masses of p0(s) plus a local
    Laplacian correction for the central cell (second order in h).
    """
    from scipy.signal import fftconvolve
    W, c0, tail = stencil if stencil is not None else jump_stencil_2d(c, h, 2 * n_off)
    m_max = (W.shape[0] - 1) // 2
    sigma = math.sqrt(2 * s) if s > 0 else 0.0
    k = np.arange(-(n_off + m_max), n_off + m_max + 1) * h
    b1 = _box_mass(k, sigma, h)
    B = np.outer(b1, b1)
    conv = fftconvolve(B, W, mode="same")
    inner = slice(m_max, m_max + 2 * n_off + 1)
    Bc = B[inner, inner]
    lap = (B[m_max + 1:m_max + 2 * n_off + 2, inner] + B[m_max - 1:m_max + 2 * n_off, inner]
           + B[inner, m_max + 1:m_max + 2 * n_off + 2] + B[inner, m_max - 1:m_max + 2 * n_off]
           - 4 * Bc) / (h * h)
    G = conv[inner, inner] - (W.sum() + tail) * Bc + c0 * lap
    return G / (h * h)
