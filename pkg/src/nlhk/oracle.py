"""Reference densities by Fourier inversion of exp(-t psi).

For x-independent coefficients the process is a Levy process with symbol
psi(xi) = |xi|^2 + int (1 - cos xi.z) b(z) / |z|^(d+beta) dz, so its density is
a plain inverse Fourier transform. The jump part is evaluated in closed form
for radial profiles that are piecewise constant (all the families used in the
checks), and by adaptive quadrature otherwise. Nothing here goes through the
lattice operators of ``nonlocal_op``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.special import gamma, j0

from .coefficients import Coefficient
from .duhamel import KernelTable
from .kernels import stable_constant

DECAY_EXPONENT = 40.0       # exp(-40) ~ 4e-18: symbol evaluations stop beyond this
NYQUIST_TOL = 1e-12
RINGING_TOL = 1e-8
ALIAS_TOL = 1e-6
MAX_FFT = 1 << 22


class AliasingWarning(UserWarning):
    pass


def stable_integral(d, beta):
    """int_{R^d} (1 - cos e.z) |z|^(-d-beta) dz for a unit vector e.

    d = 1: pi / (Gamma(1+beta) sin(pi beta/2)); d = 2 via the Bessel integral
    int_0^inf (1 - J0(u)) u^(-1-beta) du = 2^-beta Gamma(1-beta/2) / (beta Gamma(1+beta/2)).
    """
    if d == 1:
        return math.pi / (gamma(1 + beta) * math.sin(math.pi * beta / 2))
    if d == 2:
        return 2 * math.pi * 2 ** -beta * gamma(1 - beta / 2) / (beta * gamma(1 + beta / 2))
    raise ValueError("d must be 1 or 2")


def _cos_tail(xi, r, nu):
    """int_r^inf cos(xi s) s^-nu ds for xi > 0, r > 0, nu > 1 (vectorised in xi)."""
    xi = np.atleast_1d(np.asarray(xi, float))
    out = np.empty_like(xi)
    big = xi * r >= 40
    # integration by parts: -exp(i xi r) sum_n (nu)_n r^(-nu-n) / (i xi)^(n+1)
    xb = xi[big]
    if xb.size:
        acc = np.zeros(xb.shape, complex)
        term = np.full(xb.shape, r ** -nu, complex) / (1j * xb)
        for n in range(60):
            acc += term
            term = term * (nu + n) / (r * 1j * xb)
            if np.max(np.abs(term)) < 1e-18 * r ** -nu:
                break
        out[big] = np.real(-np.exp(1j * xb * r) * acc)
    for k in np.flatnonzero(~big):
        out[k] = integrate.quad(lambda s: s ** -nu, r, np.inf, weight="cos", wvar=xi[k],
                                limit=400)[0]
    return out


def _one_minus_cos_tail(xi, r, beta):
    """int_r^inf (1 - cos xi s) s^(-1-beta) ds."""
    xi = np.abs(np.atleast_1d(np.asarray(xi, float)))
    out = np.zeros_like(xi)
    pos = xi > 0
    out[pos] = r ** -beta / beta - _cos_tail(xi[pos], r, 1 + beta)
    return out


def _bessel_piece(k, a, b, beta):
    """int_a^b (1 - J0(k s)) s^(-1-beta) ds by quadrature over half periods."""
    f = lambda s: (1 - j0(k * s)) * s ** (-1 - beta)
    if k == 0:
        return 0.0
    if a == 0:
        a0 = min(b, 1 / k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            near = integrate.quad(f, 0, a0, epsabs=1e-15, limit=200)[0]
        return near + (_bessel_piece(k, a0, b, beta) if b > a0 else 0.0)
    top = b if np.isfinite(b) else a + 4000 * math.pi / k
    edges = np.append(np.arange(a, top, math.pi / k), top)
    val = sum(integrate.quad(f, lo, hi)[0] for lo, hi in zip(edges[:-1], edges[1:]))
    if not np.isfinite(b):
        # J0 averages out; the remaining weight is the plain power tail
        val += top ** -beta / beta
    return val


@dataclass
class LevySymbol:
    """psi(xi) = |xi|^2 (if ``diffusion``) + jump part, as a function of |xi|.

    ``pieces`` lists (r_a, r_b, value) for a radial profile that is constant on
    shells; ``radial`` is the general fallback (profile as a function of |z|).
    """
    d: int
    beta: float
    pieces: tuple = ()
    radial: Callable | None = None
    support: float = math.inf
    breakpoints: tuple = ()
    diffusion: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def jump(self, k):
        k = np.abs(np.asarray(k, float))
        if self.radial is None:
            return self._pieces_jump(k)
        return self._quad_jump(k)

    def __call__(self, xi):
        """psi at frequency vectors (last axis of length d when d > 1)."""
        xi = np.asarray(xi, float)
        k = np.abs(xi) if self.d == 1 or xi.ndim == 0 else np.linalg.norm(xi, axis=-1)
        return self.of_radius(k)

    def of_radius(self, k):
        """psi as a function of |xi|."""
        k = np.abs(np.asarray(k, float))
        out = self.jump(k)
        return out + k ** 2 if self.diffusion else out

    # -- closed forms for shell-constant profiles ---------------------------
    def _pieces_jump(self, k):
        k = np.atleast_1d(k)
        out = np.zeros_like(k, dtype=float)
        full = stable_integral(self.d, self.beta)
        for a, b, v in self.pieces:
            if v == 0:
                continue
            if self.d == 2:
                part = np.array([2 * math.pi * self._bessel(kk, a, b) for kk in k])
            elif a == 0:
                part = full * k ** self.beta - 2 * self._tail1(k, b)
            else:
                part = 2 * (self._tail1(k, a) - self._tail1(k, b))
            out += v * part
        return out

    def _tail1(self, k, r):
        if r == 0:
            return np.full(k.shape, np.inf)
        if not np.isfinite(r):
            return np.zeros(k.shape)
        return _one_minus_cos_tail(k, r, self.beta)

    def _bessel(self, k, a, b):
        key = (float(k), a, b)
        if key not in self._cache:
            if a == 0 and not np.isfinite(b):
                val = stable_integral(2, self.beta) / (2 * math.pi) * k ** self.beta
            else:
                val = _bessel_piece(k, a, b, self.beta)
            self._cache[key] = val
        return self._cache[key]

    # -- general radial profile ---------------------------------------------
    def _quad_jump(self, k):
        k = np.atleast_1d(k)
        return np.array([self._quad_one(float(kk)) for kk in k])

    def _quad_one(self, k):
        if k == 0:
            return 0.0
        if k in self._cache:
            return self._cache[k]
        b, beta, R = self.radial, self.beta, self.support
        pts = sorted({0.0, *[p for p in self.breakpoints if 0 < p < R]})
        if self.d == 1:
            kern = lambda s: 2 * np.sin(k * s / 2) ** 2
            weight = 2.0
        else:
            kern = lambda s: 1 - j0(k * s)
            weight = 2 * math.pi
        top = R if np.isfinite(R) else max(pts[-1], 1.0) + 200 * 2 * math.pi / k
        edges = np.unique(np.concatenate([pts, np.arange(0, top, math.pi / k), [top]]))
        val = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            for lo, hi in zip(edges[:-1], edges[1:]):
                val += integrate.quad(lambda s: kern(s) * b(s) * s ** (-1 - beta), lo, hi,
                                      epsabs=1e-14)[0]
            if not np.isfinite(R):
                val += integrate.quad(lambda s: b(s) * s ** (-1 - beta), top, np.inf)[0]
        self._cache[k] = weight * val
        return self._cache[k]


def stable_symbol(d, beta, a=1.0, diffusion=True):
    """|xi|^2 + a |xi|^beta (the p_a symbol); a = 0 gives the Laplacian."""
    const = a / stable_integral(d, beta)
    return LevySymbol(d, beta, pieces=((0.0, math.inf, const),), diffusion=diffusion)


def truncated_stable_symbol(d, beta):
    """int_{|z|<=1} (1 - cos xi.z) A(d,-beta) / |z|^(d+beta) dz, no diffusion."""
    return LevySymbol(d, beta, pieces=((0.0, 1.0, stable_constant(d, beta)),), diffusion=False)


def _shell_pieces(c: Coefficient):
    """Detect a radial profile that is constant between consecutive breakpoints."""
    edges = [0.0, *c.breakpoints]
    R = c.support_radius
    if not edges or edges[-1] < R:
        edges.append(R)
    pieces = []
    for a, b in zip(edges[:-1], edges[1:]):
        hi = b if np.isfinite(b) else a + 50.0
        probe = np.linspace(a, hi, 23)[1:-1]
        vals = c.radial(probe)
        if np.ptp(vals) > 1e-14 * max(1.0, np.max(np.abs(vals))):
            return None
        pieces.append((a, b, float(vals[0])))
    return tuple(p for p in pieces if p[2] != 0.0)


def symbol_from_coefficient(c: Coefficient) -> LevySymbol:
    if not c.translation_invariant:
        raise ValueError("Fourier reference needs an x-independent coefficient")
    pieces = _shell_pieces(c)
    if pieces is not None:
        return LevySymbol(c.d, c.beta, pieces=pieces, support=c.support_radius)
    return LevySymbol(c.d, c.beta, radial=lambda r: c.radial(np.asarray(r, float)),
                      support=c.support_radius, breakpoints=c.breakpoints)


# ---------------------------------------------------------------------------

@dataclass
class Density:
    """Density over offsets k h, |k| <= n (1-d) or a square of offsets (2-d)."""
    t: float
    h: float
    offsets: np.ndarray
    values: np.ndarray
    alias_error: float
    min_value: float


def _radial_symbol_values(sym: LevySymbol, k, t):
    """exp(-t psi(k)) on a set of |xi|, skipping evaluations past the decay cut."""
    k = np.asarray(k, float)
    uniq, inv = np.unique(k.ravel(), return_inverse=True)
    vals = np.zeros(uniq.size)
    # psi is evaluated in increasing |xi| in chunks; stop once t psi stays large
    start = 0
    chunk = 256
    while start < uniq.size:
        sl = slice(start, start + chunk)
        psi = sym.of_radius(uniq[sl])
        vals[sl] = np.exp(-t * psi)
        if sym.diffusion and t * np.min(uniq[sl] ** 2 - _neg_bound(sym)) > DECAY_EXPONENT:
            break
        if not sym.diffusion and np.all(t * psi > DECAY_EXPONENT) and uniq[sl][0] > 1 / t:
            break
        start += chunk
    return vals[inv].reshape(k.shape)


def _neg_bound(sym: LevySymbol):
    """Upper bound for -jump part (non-zero only for negative profiles)."""
    neg = sum(-v * 4 * (a ** -sym.beta - (b ** -sym.beta if np.isfinite(b) else 0)) / sym.beta
              for a, b, v in sym.pieces if v < 0 and a > 0)
    return neg * (1 if sym.d == 1 else 2 * math.pi)


def _needed_spacing(sym: LevySymbol, t, h):
    """Halve h until exp(-t psi) is negligible at the Nyquist frequency."""
    hf = h
    for _ in range(20):
        if math.exp(-t * float(sym.of_radius(np.array([math.pi / hf]))[0])) < NYQUIST_TOL:
            return hf
        hf /= 2
    return hf


def _fft_density(sym, t, hf, N, d):
    dxi = 2 * math.pi / (N * hf)
    k1 = np.fft.fftfreq(N, d=1.0 / N) * dxi
    if d == 1:
        phi = _radial_symbol_values(sym, np.abs(k1), t)
        vals = np.real(np.fft.ifft(phi)) / hf
        return np.fft.fftshift(vals)
    kk = np.hypot(k1[:, None], k1[None, :])
    if sym.radial is None and all(a == 0 and not np.isfinite(b) for a, b, _ in sym.pieces):
        phi = _radial_symbol_values(sym, kk, t)
    else:
        # evaluate on |xi| knots and interpolate: radial symbols are smooth in |xi|
        kmax = min(kk.max(), math.sqrt(DECAY_EXPONENT / t) * 1.5 + dxi)
        knots = np.linspace(0, kmax, max(64, int(kmax / dxi) + 2))
        spline = CubicSpline(knots, sym.of_radius(knots))
        psi = np.where(kk <= kmax, spline(np.minimum(kk, kmax)), np.inf)
        phi = np.exp(-t * psi)
    vals = np.real(np.fft.ifft2(phi)) / hf ** 2
    return np.fft.fftshift(vals)


def density_from_symbol(sym: LevySymbol, t, h, L, *, check_alias=True) -> Density:
    """Inverse Fourier transform of exp(-t psi) sampled at offsets k h, |k| h <= L.

    The FFT period is at least 8 L (dual spacing <= pi / (4 L)) and the
    spacing is refined until the transform is negligible at the Nyquist
    frequency. Aliasing is measured by doubling the period; values below
    -1e-8 trigger a resolution doubling rather than clipping. Raw values are
    returned without renormalisation.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    d = sym.d
    hf = _needed_spacing(sym, t, h)
    r = int(round(h / hf))
    if abs(r * hf - h) > 1e-12 * h:
        raise ValueError("refined spacing must divide the requested spacing")
    n = int(round(L / h))
    N = 1 << max(4, math.ceil(math.log2(8 * L / hf)))
    for _ in range(4):
        if N ** d > MAX_FFT:
            raise MemoryError(f"FFT of size {N}^{d} exceeds the configured cap")
        full = _fft_density(sym, t, hf, N, d)
        ring = float(full.min())
        if ring >= -RINGING_TOL or (2 * N) ** d > MAX_FFT:
            break
        hf /= 2
        r *= 2
        N *= 2
    sub = _subsample(full, N, r, n, d)
    alias = 0.0
    # heavy tails alias like 1/period^(d+beta): widen the period until clean
    while check_alias and (2 * N) ** d <= MAX_FFT:
        wider = _subsample(_fft_density(sym, t, hf, 2 * N, d), 2 * N, r, n, d)
        alias = float(np.max(np.abs(wider - sub)))
        sub, N = wider, 2 * N
        if alias <= ALIAS_TOL * float(np.max(np.abs(sub))):
            break
    if alias > ALIAS_TOL * float(np.max(np.abs(sub))):
        warnings.warn(f"periodisation error {alias:.2e} at t={t}", AliasingWarning, stacklevel=2)
    if ring < -RINGING_TOL:
        warnings.warn(f"negative ringing {ring:.2e} at t={t}", AliasingWarning, stacklevel=2)
    off = np.arange(-n, n + 1) * h
    return Density(t, h, off, sub, alias, ring)


def _subsample(full, N, r, n, d):
    centre = N // 2
    idx = centre + r * np.arange(-n, n + 1)
    if np.any(idx < 0) or np.any(idx >= N):
        raise ValueError("requested extent exceeds the FFT period")
    return full[idx] if d == 1 else full[np.ix_(idx, idx)]


def oracle_table(sym: LevySymbol, times, dx, m, beta=None) -> KernelTable:
    """A translation-invariant KernelTable (offsets |k| <= 2m) from the Fourier route."""
    vals = np.stack([density_from_symbol(sym, t, dx, 2 * m * dx).values for t in times])
    return KernelTable(np.asarray(times, float), dx, m, sym.d, sym.beta if beta is None else beta,
                       vals, True, meta={"source": "fourier"})


# ---------------------------------------------------------------------------
# p_a and the truncated stable kernel

def _radial_inverse(sym_fn, t, r, d):
    """(1/2 pi)^d int exp(-t psi) e^{i xi.x} d xi as a 1-d radial quadrature."""
    r = float(r)
    if d == 1:
        f = lambda k: math.exp(-t * sym_fn(k))
        top = _cutoff(sym_fn, t)
        if r == 0:
            return integrate.quad(f, 0, top, limit=400, epsabs=0, epsrel=1e-13)[0] / math.pi
        return integrate.quad(f, 0, top, weight="cos", wvar=r, limit=800,
                              epsabs=0, epsrel=1e-13)[0] / math.pi
    if d == 2:
        top = _cutoff(sym_fn, t)
        f = lambda k: math.exp(-t * sym_fn(k)) * j0(k * r) * k
        edges = [0.0] if r == 0 else list(np.arange(0, top, math.pi / r))
        edges = np.unique(np.append(edges, top))
        val = sum(integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-13, limit=200)[0]
                  for lo, hi in zip(edges[:-1], edges[1:]))
        return val / (2 * math.pi)
    raise ValueError("d must be 1 or 2")


def _cutoff(sym_fn, t):
    k = 1.0
    while t * sym_fn(k) < DECAY_EXPONENT:
        k *= 2
    return k


def pa_density(a, t, x, y, d=1, beta=1.0):
    """Density of Brownian motion (generator Delta) plus an independent a^(1/beta)-scaled stable part.

    Evaluated pointwise by radial Fourier quadrature; a = 0 reduces to p0.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if a < 0:
        raise ValueError("a must be nonnegative")
    const = a / stable_integral(d, beta)
    full = stable_integral(d, beta)
    psi = lambda k: k * k + const * full * k ** beta
    x, y = np.asarray(x, float), np.asarray(y, float)
    diff = x - y
    r = np.abs(diff) if d == 1 else np.linalg.norm(diff, axis=-1)
    return _vectorised(lambda rr: _radial_inverse(psi, t, rr, d), r)


def _vectorised(fn, r):
    r = np.asarray(r, float)
    out = np.array([fn(v) for v in r.ravel()]).reshape(r.shape)
    return out if out.ndim else float(out)


@lru_cache(maxsize=64)
def _truncated_table(t, d, beta, h, L):
    return density_from_symbol(truncated_stable_symbol(d, beta), t, h, L, check_alias=False)


def truncated_stable_density(t, x, y, d=1, beta=1.0, *, h=None, L=8.0):
    """Density of the symmetric beta-stable process with jumps larger than 1 removed.

    Computed by FFT on a lattice and interpolated with a cubic spline (d = 1)
    or read at the nearest lattice point (d = 2).
    """
    if not (0 < t <= 1):
        raise ValueError("t must lie in (0, 1]")
    h = h if h is not None else min(0.01, t ** (1 / beta) / 8)
    h = 2.0 ** math.floor(math.log2(h))
    dens = _truncated_table(float(t), d, float(beta), h, float(L))
    x, y = np.asarray(x, float), np.asarray(y, float)
    if d == 1:
        r = np.abs(x - y)
        spline = CubicSpline(dens.offsets, dens.values)
        out = np.where(r <= L, spline(np.minimum(r, L)), np.nan)
        return out if out.ndim else float(out)
    diff = x - y
    n = (dens.offsets.size - 1) // 2
    idx = np.clip(np.rint(diff / h).astype(int) + n, 0, 2 * n)
    return dens.values[idx[..., 0], idx[..., 1]]
