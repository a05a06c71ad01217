"""Construction of the heat kernel q^b by the Duhamel (parametrix) series.

q_0 = p0 and q_n(t,x,y) = int_0^t int q_{n-1}(t-s,x,z) S^b_z p0(s,z,y) dz ds.
The space integral is a lattice sum against the cell-averaged driving kernel
(see ``nonlocal_op.cell_kernel_1d``); the time integral is the trapezoid rule
on the nodes s = t_i - t_j, so q_{n-1} is only ever read at stored times.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .coefficients import Coefficient, rescale
from .kernels import gaussian_radial, stable_constant
from .nonlocal_op import (_box_mass, apply_Sb, apply_Sb_many, cell_kernel_1d, cell_kernel_2d,
                          jump_stencil_2d, radial_tail)

MAGIC = b"NLHK"
FORMAT_VERSION = 1
A0_FRACTION = 0.25


class NonContraction(RuntimeError):
    """The series stopped contracting; the horizon must shrink."""


class GridMismatch(ValueError):
    pass


class ExtentOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Time nodes t_k = T (k/K)^gamma and the lattice {-m dx, ..., m dx}^d."""
    T: float
    K: int = 48
    dx: float | None = None
    L: float | None = None
    d: int = 1
    gamma: float = 1.0

    def __post_init__(self):
        dx = self.dx if self.dx is not None else math.sqrt(self.T) / (16 if self.d == 1 else 8)
        L = self.L if self.L is not None else (8 if self.d == 1 else 6) * math.sqrt(self.T)
        object.__setattr__(self, "dx", float(dx))
        object.__setattr__(self, "L", float(round(L / dx) * dx))
        if not (self.T > 0 and self.K >= 1 and self.dx > 0):
            raise ValueError("grid needs T > 0, K >= 1 and dx > 0")
        if self.L < 6 * math.sqrt(self.T) * (1 - 1e-12):
            raise ValueError(f"lattice half-width {self.L} is below 6 sqrt(T)")

    @property
    def m(self):
        return int(round(self.L / self.dx))

    @property
    def times(self):
        k = np.arange(1, self.K + 1)
        return self.T * (k / self.K) ** self.gamma

    @property
    def lattice(self):
        return np.arange(-self.m, self.m + 1) * self.dx

    def scaled(self, lam):
        """Image grid under (t, x) -> (lam t, sqrt(lam) x)."""
        r = math.sqrt(lam)
        return SpaceTimeGrid(self.T * lam, self.K, self.dx * r, self.L * r, self.d, self.gamma)


@dataclass
class KernelTable:
    """Values of q on a space-time grid.

    Translation-invariant tables store q(t, x - y) for offsets k dx with
    |k| <= 2m (per axis); otherwise values[i, j, k] = q(t_i, x_j, y_k).
    """
    times: np.ndarray
    dx: float
    m: int
    d: int
    beta: float
    values: np.ndarray
    translation_invariant: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.m * self.dx

    @property
    def lattice(self):
        return np.arange(-self.m, self.m + 1) * self.dx

    @property
    def offsets(self):
        return np.arange(-2 * self.m, 2 * self.m + 1) * self.dx

    @property
    def horizon(self):
        return float(self.times[-1])

    def time_index(self, t, rtol=1e-9):
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > rtol * max(t, 1e-300):
            raise KeyError(f"time {t} is not a node of the table")
        return i

    def at(self, t):
        return self.values[self.time_index(t)]

    def full(self, i):
        """q(t_i, x_j, y_k) as an (n, n) matrix (d = 1)."""
        if not self.translation_invariant:
            return self.values[i]
        n = 2 * self.m + 1
        j = np.arange(n)
        return self.values[i][(j[:, None] - j[None, :]) + 2 * self.m]

    def radial_profile(self, i):
        """(|x - y|, q) along the offset axis for a translation-invariant table."""
        v = self.values[i]
        if self.d == 2:
            v = v[:, 2 * self.m]
        return self.offsets, v

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def copy_with(self, **kw):
        return replace(self, **kw)

    # -- serialisation -----------------------------------------------------
    def to_bytes(self):
        n_axis = 2 * self.m + 1
        head = MAGIC + struct.pack("<I", FORMAT_VERSION)
        head += struct.pack("<IdI", self.d, self.beta, self.times.size)
        head += np.asarray(self.times, "<f8").tobytes()
        head += struct.pack("<ddIB", self.dx, self.L, n_axis, int(self.translation_invariant))
        return head + np.ascontiguousarray(self.values, "<f8").tobytes()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != MAGIC:
            raise ValueError("not a kernel table file")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        d, beta, K = struct.unpack_from("<IdI", blob, 8)
        off = 8 + 16
        times = np.frombuffer(blob, "<f8", K, off).copy()
        off += 8 * K
        dx, L, n_axis, ti = struct.unpack_from("<ddIB", blob, off)
        off += 21
        m = (n_axis - 1) // 2
        per = (4 * m + 1 if ti else n_axis)
        shape = (K,) + ((per,) * d if ti else (n_axis, n_axis))
        values = np.frombuffer(blob, "<f8", int(np.prod(shape)), off).reshape(shape).copy()
        return cls(times, dx, m, d, beta, values, bool(ti))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path, every=1):
        """Columns t, x..., y..., q (translation-invariant tables use y = 0)."""
        rows = []
        for i, t in enumerate(self.times):
            if self.translation_invariant and self.d == 1:
                for u, q in zip(self.offsets[::every], self.values[i][::every]):
                    rows.append((t, u, 0.0, q))
            elif self.translation_invariant:
                off = self.offsets[::every]
                vals = self.values[i][::every, ::every]
                for a, u1 in enumerate(off):
                    for b, u2 in enumerate(off):
                        rows.append((t, u1, u2, 0.0, 0.0, vals[a, b]))
            else:
                lat = self.lattice[::every]
                vals = self.values[i][::every, ::every]
                for a, x in enumerate(lat):
                    for b, y in enumerate(lat):
                        rows.append((t, x, y, vals[a, b]))
        names = (["t", "x", "y", "q"] if self.d == 1 else ["t", "x1", "x2", "y1", "y2", "q"])
        np.savetxt(path, np.array(rows), delimiter=",", header=",".join(names), comments="")


@dataclass
class SeriesState:
    n: int
    term: KernelTable
    sup_ratio: float
    partial_sum: KernelTable


# ---------------------------------------------------------------------------

def gaussian_table(grid: SpaceTimeGrid, beta, translation_invariant=True, times=None):
    times = grid.times if times is None else np.asarray(times, float)
    if translation_invariant:
        off = np.arange(-2 * grid.m, 2 * grid.m + 1) * grid.dx
        r = _radius_grid(off, grid.d)
    else:
        if grid.d != 1:
            raise ValueError("x-dependent tables are limited to d = 1")
        lat = grid.lattice
        r = np.abs(lat[:, None] - lat[None, :])
    vals = np.stack([gaussian_radial(t, r, grid.d) for t in times])
    return KernelTable(times, grid.dx, grid.m, grid.d, beta, vals, translation_invariant)


def _radius_grid(off, d):
    if d == 1:
        return np.abs(off)
    if d == 2:
        return np.hypot(off[:, None], off[None, :])
    raise ValueError("d must be 1 or 2")


def _cell_gaussian(tau, off, h, d):
    """Cell masses of p0(tau) divided by the cell volume (delta for tau = 0)."""
    sig = math.sqrt(2 * tau) if tau > 0 else 0.0
    b = _box_mass(off, sig, h) / h
    if d == 1:
        return b
    return np.outer(b, b)


class DuhamelOperator:
    """The linear map q -> int_0^t int q(t-s,x,z) S^b_z p0(s,z,y) dz ds on a grid."""

    def __init__(self, c: Coefficient, grid: SpaceTimeGrid, translation_invariant=None):
        self.c = c
        self.grid = grid
        self.d = grid.d
        ti = c.translation_invariant if translation_invariant is None else translation_invariant
        if ti and not c.translation_invariant:
            raise ValueError("coefficient depends on x; a translation-invariant table is invalid")
        if self.d == 2 and not ti:
            raise ValueError("d = 2 is limited to translation-invariant coefficients")
        self.ti = ti
        self.times = grid.times
        self.nodes = np.concatenate([[0.0], self.times])
        self.h = grid.dx
        self.m = grid.m
        self._kernels = {}
        self._stencil = None
        self._plan()

    def _plan(self):
        """Trapezoid weights over s = t_i - t_j and the distinct s values needed."""
        self.pairs = []
        s_vals = {}
        for i in range(1, self.nodes.size):
            s = self.nodes[i] - self.nodes[:i + 1]
            w = np.zeros(i + 1)
            ds = -np.diff(s)
            w[:-1] += ds / 2
            w[1:] += ds / 2
            keys = []
            for sv in s:
                key = round(float(sv) / self.grid.T, 12)
                s_vals.setdefault(key, float(sv))
                keys.append(key)
            self.pairs.append((i, np.arange(i + 1), keys, w))
        self.s_values = s_vals

    def kernel(self, key):
        if key not in self._kernels:
            s = self.s_values[key]
            if self.d == 1:
                x_nodes = None if self.ti else self.grid.lattice
                # TI outputs at offset u need sources out to |u| + 2mh
                n_off = 4 * self.m if self.ti else 2 * self.m
                G = cell_kernel_1d(self.c, s, self.h, n_off, x_nodes=x_nodes)
                if not self.ti:
                    n = 2 * self.m + 1
                    j = np.arange(n)
                    G = G[(j[:, None] - j[None, :]) + 2 * self.m, j[:, None]]
            else:
                if self._stencil is None:
                    # Gaussian cell masses vanish beyond ~8 sigma of the origin
                    pad = int(np.ceil(8 * np.sqrt(2 * self.grid.T) / self.h)) + 2
                    self._stencil = jump_stencil_2d(self.c, self.h, 4 * self.m + pad)
                G = cell_kernel_2d(self.c, s, self.h, 4 * self.m, stencil=self._stencil)
            if not np.all(np.isfinite(G)):
                raise FloatingPointError(f"non-finite driving kernel at s = {s}")
            self._kernels[key] = G
        return self._kernels[key]

    # -- representation of the previous iterate at the nodes -----------------
    def _gaussian_nodes(self):
        off = np.arange(-2 * self.m, 2 * self.m + 1) * self.h
        if self.ti:
            return [_cell_gaussian(t, off, self.h, self.d) for t in self.nodes]
        n = 2 * self.m + 1
        j = np.arange(n)
        idx = (j[:, None] - j[None, :]) + 2 * self.m
        return [_cell_gaussian(t, off, self.h, 1)[idx] for t in self.nodes]

    def apply(self, prev: np.ndarray | None, *, gaussian=False):
        """Apply the Duhamel map.

        ``prev`` holds values at the grid times (shape (K, ...)); its value at
        t = 0 is taken as 0. With ``gaussian=True`` the previous iterate is p0,
        represented by cell masses (a lattice delta at t = 0).
        """
        if gaussian:
            P = self._gaussian_nodes()
        else:
            zero = np.zeros_like(prev[0])
            P = [zero] + list(prev)
        if self.c.sup_norm == 0:
            return np.zeros((self.times.size,) + P[0].shape)
        if self.ti:
            return self._apply_ti(P)
        return self._apply_matrix(P)

    def _apply_ti(self, P):
        d, m, h = self.d, self.m, self.h
        n = 4 * m + 1
        nfft = 1 << (3 * n - 1).bit_length()
        axes = tuple(range(-d, 0))
        fshape = (nfft,) * d
        rf = lambda a: np.fft.rfftn(a, fshape, axes=axes)
        Ph = [rf(p) for p in P]
        Gh = {}
        out = np.empty((self.times.size,) + (n,) * d)
        # P spans offsets +-2m and G spans +-4m, so output offset 0 sits at 6m
        sl = (slice(4 * m, 8 * m + 1),) * d
        for i, js, keys, w in self.pairs:
            acc = 0
            for j, key, wj in zip(js, keys, w):
                if wj == 0:
                    continue
                if key not in Gh:
                    Gh[key] = rf(self.kernel(key))
                acc = acc + wj * Ph[j] * Gh[key]
            full = np.fft.irfftn(acc, fshape, axes=axes)
            out[i - 1] = full[sl] * h ** d
        return out

    def _apply_matrix(self, P):
        h = self.h
        out = np.empty((self.times.size,) + P[0].shape)
        for i, js, keys, w in self.pairs:
            acc = np.zeros_like(P[0])
            for j, key, wj in zip(js, keys, w):
                if wj == 0 or not np.any(P[j]):
                    continue
                acc += wj * (P[j] @ self.kernel(key))
            out[i - 1] = acc * h
        return out


def choose_base_horizon(c: Coefficient, a0=None):
    """min(1, (a0 / max(||b||, a0))^(2/(2-beta))) with a0 = 0.25 A(d, -beta) by default."""
    if a0 is None:
        a0 = A0_FRACTION * stable_constant(c.d, c.beta)
    return min(1.0, (a0 / max(c.sup_norm, a0)) ** (2 / (2 - c.beta)))


def iterate_once(prev: KernelTable, c: Coefficient, op: DuhamelOperator | None = None,
                 *, prev_is_gaussian=False) -> KernelTable:
    """One Duhamel step q_{n-1} -> q_n on the grid of ``prev``."""
    if op is None:
        grid = SpaceTimeGrid(prev.horizon, prev.times.size, prev.dx, prev.L, prev.d,
                             _gamma_of(prev.times))
        op = DuhamelOperator(c, grid, prev.translation_invariant)
    vals = op.apply(None if prev_is_gaussian else prev.values, gaussian=prev_is_gaussian)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite iterate; the grid is too coarse near t = 0")
    return prev.copy_with(values=vals, meta={})


def _gamma_of(times):
    T, K = times[-1], times.size
    if K < 2:
        return 1.0
    return math.log(times[0] / T) / math.log(1 / K)


def series_states(c: Coefficient, grid: SpaceTimeGrid, tol=1e-10, max_terms=80,
                  translation_invariant=None):
    """Yield SeriesState objects for n = 1, 2, ... until the stopping rule fires."""
    op = DuhamelOperator(c, grid, translation_invariant)
    q0 = gaussian_table(grid, c.beta, op.ti)
    partial = q0.copy_with(values=q0.values.copy())
    sup0 = q0.sup()
    prev_vals, prev_sup = None, sup0
    high = 0
    for n in range(1, max_terms + 1):
        vals = op.apply(prev_vals, gaussian=(n == 1))
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite iterate; the grid is too coarse near t = 0")
        sup_n = float(np.max(np.abs(vals)))
        ratio = sup_n / prev_sup if prev_sup > 0 else 0.0
        partial = partial.copy_with(values=partial.values + vals)
        term = q0.copy_with(values=vals)
        yield SeriesState(n, term, ratio, partial)
        if sup_n < tol * sup0:
            return
        high = high + 1 if ratio > 0.9 else 0
        if high >= 2:
            raise NonContraction(
                f"sup ratio {ratio:.3f} > 0.9 twice at n = {n}; shrink the horizon below {grid.T}")
        prev_vals, prev_sup = vals, sup_n
    raise NonContraction(f"series did not reach tolerance {tol} in {max_terms} terms")


def build_series(c: Coefficient, grid: SpaceTimeGrid, tol=1e-10, max_terms=80,
                 translation_invariant=None, a0=None) -> KernelTable:
    T_base = choose_base_horizon(c, a0)
    if grid.T > T_base * (1 + 1e-9):
        raise ValueError(f"horizon {grid.T} exceeds the base horizon {T_base}")
    ratios, sups = [], []
    table = None
    for state in series_states(c, grid, tol, max_terms, translation_invariant):
        ratios.append(state.sup_ratio)
        sups.append(float(np.max(np.abs(state.term.values))))
        table = state.partial_sum
    if table is None:
        table = gaussian_table(grid, c.beta, c.translation_invariant
                               if translation_invariant is None else translation_invariant)
    table.meta = {"coefficient": c.content_hash(), "d": c.d, "beta": c.beta,
                  "sup_ratios": ratios, "term_sups": sups, "horizon": grid.T,
                  "grid": {"K": grid.K, "dx": grid.dx, "L": grid.L, "gamma": grid.gamma}}
    return table


def build_with_scaling(c: Coefficient, grid: SpaceTimeGrid, tol=1e-10, a0=None) -> KernelTable:
    """Build q^b through b^(lam) with lam chosen so that ||b^(lam)|| <= a0.

    The series for b^(lam) is summed on the image grid and transferred back,
    which is exact because the grids are constructed as images.
    """
    if a0 is None:
        a0 = A0_FRACTION * stable_constant(c.d, c.beta)
    if c.sup_norm <= a0:
        return build_series(c, grid, tol, a0=a0)
    lam = (c.sup_norm / a0) ** (2 / (2 - c.beta))
    src = build_series(rescale(c, lam), grid.scaled(lam), tol, a0=a0)
    out = scaling_transfer(src, lam, grid)
    out.meta["coefficient"] = c.content_hash()
    return out


def scaling_transfer(table: KernelTable, lam, target: SpaceTimeGrid | None = None) -> KernelTable:
    """q^b(t,x,y) = lam^(d/2) q^(b^(lam))(lam t, sqrt(lam) x, sqrt(lam) y).

    ``table`` lives on the image grid; the result lives on its preimage.
    """
    r = math.sqrt(lam)
    times = table.times / lam
    dx = table.dx / r
    if target is not None:
        ok = (target.times.shape == times.shape
              and np.allclose(target.times, times, rtol=1e-12, atol=0)
              and abs(target.dx - dx) <= 1e-12 * dx and target.m == table.m)
        if not ok:
            raise GridMismatch("source grid is not the image of the target grid")
    out = table.copy_with(times=times, dx=dx, values=table.values * lam ** (table.d / 2),
                          meta=dict(table.meta, transferred_from_lambda=lam))
    return out


# ---------------------------------------------------------------------------
# Chapman-Kolmogorov extension

def _conv_offsets(a, b, m_in, m_out, h, d):
    """Linear convolution of two offset arrays (|k| <= 2 m_in) kept on |k| <= 2 m_out."""
    n = 4 * m_in + 1
    nfft = 1 << (2 * n - 1).bit_length()
    axes = tuple(range(-d, 0))
    fshape = (nfft,) * d
    full = np.fft.irfftn(np.fft.rfftn(a, fshape, axes=axes) * np.fft.rfftn(b, fshape, axes=axes),
                         fshape, axes=axes)
    centre = 4 * m_in
    sl = (slice(centre - 2 * m_out, centre + 2 * m_out + 1),) * d
    return full[sl] * h ** d


def _pad_offsets(v, m_old, m_new, d):
    if m_new == m_old:
        return v
    pad = 2 * (m_new - m_old)
    return np.pad(v, [(0, 0)] + [(pad, pad)] * d)


def _padded(table: KernelTable, t, m_to, c: Coefficient | None):
    """Offsets |k| <= 2 m_to of q(t); beyond the stored ones p0 + t J (or zero)."""
    v = _pad_offsets(table.at(t)[None], table.m, m_to, table.d)[0]
    if c is None or m_to == table.m:
        return v
    off = np.arange(-2 * m_to, 2 * m_to + 1) * table.dx
    r = _radius_grid(off, table.d)
    far = r > table.offsets[-1] * (1 + 1e-12)
    if table.d == 2:
        far = np.maximum(np.abs(off)[:, None], np.abs(off)[None, :]) > table.offsets[-1] * (1 + 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = gaussian_radial(t, r, table.d) + t * c.radial(r) / r ** (table.d + c.beta)
    v[far] = tail[far]
    return v


def compose(table: KernelTable, t1, t2, m_out=None, c: Coefficient | None = None):
    """q(t1 + t2) by the lattice Chapman-Kolmogorov sum of q(t1) and q(t2).

    For translation-invariant tables the result covers |k| <= 2 m_out. When
    ``c`` is given, both factors are continued past the stored offsets by their
    first order tails so the heavy tails are not cut off inside the new extent.
    """
    if not table.translation_invariant:
        return table.at(t1) @ table.at(t2) * table.dx
    m_out = table.m if m_out is None else m_out
    m_in = max(table.m, 2 * m_out) if c is not None else table.m
    a, b = _padded(table, t1, m_in, c), _padded(table, t2, m_in, c)
    return _conv_offsets(a, b, m_in, m_out, table.dx, table.d)


def extend_time(table: KernelTable, s, *, c: Coefficient | None = None, max_nodes=None,
                max_points=1 << 22) -> KernelTable:
    """Extend a table on (0, T] to (0, s], s <= 2T, by q(T + tau) = q(T) * q(tau).

    New nodes are T + tau for stored tau <= s - T (thinned to at most
    ``max_nodes``); s - T must itself be a node. Translation-invariant
    tables grow their lattice like sqrt(t) so that L stays >= 6 sqrt(t) and
    the Gaussian truncation error stays negligible; passing ``c`` also keeps
    the jump tails beyond the old extent.
    """
    T = table.horizon
    if not (T < s <= 2 * T * (1 + 1e-12)):
        raise ValueError(f"extension target {s} must lie in ({T}, {2 * T}]")
    tau_last = s - T
    table.time_index(tau_last)
    taus = table.times[table.times <= tau_last * (1 + 1e-12)]
    max_nodes = max_nodes or len(table.times)
    if taus.size > max_nodes:
        pick = np.unique(np.round(np.linspace(0, taus.size - 1, max_nodes)).astype(int))
        taus = taus[pick]
    d = table.d
    if table.translation_invariant:
        m_new = int(math.ceil(table.m * math.sqrt(s / T) - 1e-9))
        if (8 * m_new + 1) ** d > max_points:
            raise ExtentOverflow(f"extension needs {(8 * m_new + 1) ** d} offsets (cap {max_points})")
        new_vals = [compose(table, T, tau, m_out=m_new, c=c) for tau in taus]
        old = _pad_offsets(table.values, table.m, m_new, d)
        if c is not None:
            old = np.stack([_padded(table, t, m_new, c) for t in table.times])
    else:
        m_new = table.m
        new_vals = [compose(table, T, tau) for tau in taus]
        old = table.values
    vals = np.concatenate([old, np.stack(new_vals)])
    times = np.concatenate([table.times, T + taus])
    meta = dict(table.meta)
    meta["extensions"] = meta.get("extensions", []) + [
        {"from": T, "to": float(s), "nodes": int(taus.size)}]
    return table.copy_with(times=times, m=m_new, values=vals, meta=meta)


def extend_to(table: KernelTable, s, **kw) -> KernelTable:
    """Repeated doubling; requires s = T 2^k for the table horizon T."""
    while table.horizon < s * (1 - 1e-12):
        target = min(2 * table.horizon, s)
        table = extend_time(table, target, **kw)
    return table


def base_grid(c: Coefficient, t, a0=None, *, K=48, dx=None, L=None, dx_factor=16,
              L_factor=8, gamma=1.0) -> SpaceTimeGrid:
    """Grid on the largest horizon T = t / 2^k not exceeding the base horizon.

    Finite-support coefficients widen L so that the stored offsets (out to
    2L) cover the jump range plus the diffusive spread.
    """
    T_base = choose_base_horizon(c, a0)
    k = max(0, math.ceil(math.log2(t / T_base) - 1e-12))
    T = t / 2 ** k
    if dx is None:
        dx = math.sqrt(T) / dx_factor
    if L is None:
        L = L_factor * math.sqrt(T)
        R = c.support_radius
        if R is not None and np.isfinite(R):
            L = max(L, 0.5 * (R + L_factor * math.sqrt(T)))
        L = math.ceil(L / dx - 1e-9) * dx
    return SpaceTimeGrid(T, K, dx, L, c.d, gamma)


def build_base(c: Coefficient, t, *, tol=1e-10, a0=None, **grid_kw):
    """Series build on base_grid(c, t); a0 is halved on NonContraction.

    Returns (table, grid).
    """
    if a0 is None:
        a0 = A0_FRACTION * stable_constant(c.d, c.beta)
    for _ in range(8):
        grid = base_grid(c, t, a0, **grid_kw)
        try:
            table = build_series(c, grid, tol, a0=a0)
        except NonContraction:
            a0 /= 2
            continue
        table.meta["a0"] = a0
        return table, grid
    raise NonContraction(f"no contracting horizon found below t = {t}; "
                         "a smaller target time or sup norm is needed")


def build_to_time(c: Coefficient, t, *, tol=1e-10, a0=None, max_nodes=None, **grid_kw):
    """Build on the base grid, then double up to t by composition. Returns (table, base grid)."""
    table, grid = build_base(c, t, tol=tol, a0=a0, **grid_kw)
    return extend_to(table, t, c=c, max_nodes=max_nodes), grid


# ---------------------------------------------------------------------------
# residuals, semigroup and generator checks

def _mass_tail(c: Coefficient, t, U, d):
    """First order mass of q(t, 0, .) outside |u| > U: Gaussian tail plus t int J."""
    if d == 1:
        gauss = 2 * (1 - ndtr(U / math.sqrt(2 * t)))
        jr = lambda r: c.radial(r) / r ** (1 + c.beta)
        jump = 2 * t * radial_tail(jr, U, finite_support=c.support_radius)
        return gauss + jump
    raise ValueError("tail correction implemented for d = 1")


def duhamel_residual(table: KernelTable, c: Coefficient, form="first", op=None):
    """sup |q - p0 - Duhamel integral| / sup |q| for either form of the identity.

    ``first``: the integral of q(t-s,x,z) S^b_z p0(s,z,y).
    ``second``: the integral of p0(t-s,x,z) S^b_z q(s,z,y), with S^b applied to
    a cubic interpolant of q in z. The p0 part of q contributes the same
    cell-averaged term in both forms; the remainder is handled separately.
    The sup runs over |x - y| <= L, away from the truncation edge of the
    offsets. Returns (residual, rhs) with rhs the right-hand side on the grid.
    """
    rhs = _rhs(table, c, form, op)
    win = _window(table)
    diff = (table.values - rhs)[(slice(None),) + win]
    res = float(np.max(np.abs(diff))) / table.sup()
    return res, rhs


def _window(table):
    """Index window |x - y| <= L of a translation-invariant table (all of it otherwise)."""
    if not table.translation_invariant:
        return (slice(None),) * 2
    m = table.m
    return (slice(m, 3 * m + 1),) * table.d


def _table_grid(table):
    return SpaceTimeGrid(table.horizon, table.times.size, table.dx, table.L, table.d,
                         _gamma_of(table.times))


def _rhs(table, c, form, op=None):
    grid = _table_grid(table)
    if not np.allclose(grid.times, table.times, rtol=1e-10):
        raise ValueError("residuals need a table on an unextended grid")
    op = op or DuhamelOperator(c, grid, table.translation_invariant)
    p0 = gaussian_table(grid, c.beta, table.translation_invariant).values
    first_order = op.apply(None, gaussian=True)
    rest = table.values - p0
    if form == "first":
        return p0 + first_order + op.apply(rest)
    if form != "second":
        raise ValueError("form must be 'first' or 'second'")
    if not table.translation_invariant or table.d != 1:
        raise ValueError("the second form is implemented for 1-d translation-invariant tables")
    s_rest = np.stack([_apply_Sb_lattice(c, table.offsets, r, t)
                       for r, t in zip(rest, table.times)])
    return p0 + first_order + _gaussian_time_convolution(op, s_rest)


def _first_order_tail(c, t, u):
    """t b(z)/|z|^(d+beta), the leading behaviour of q - p0 far from the diagonal."""
    r = np.abs(u)
    with np.errstate(divide="ignore"):
        return t * c.radial(r) / r ** (1 + c.beta)


def _apply_Sb_lattice(c, off, vals, t):
    """S^b of the cubic interpolant of lattice values at every stored offset.

    Beyond the stored offsets the function continues with its first order tail.
    """
    from scipy.interpolate import CubicSpline
    if not np.any(vals):
        return np.zeros_like(vals)
    spline = CubicSpline(off, vals, bc_type="natural")
    U = off[-1]

    def f(u):
        inside = np.abs(u) <= U
        return np.where(inside, spline(np.clip(u, -U, U)),
                        _first_order_tail(c, t, np.where(inside, U, u)))

    h = off[1] - off[0]
    return apply_Sb_many(c, f, off, inner_radius=h, f_sup=float(np.max(np.abs(vals))))


def _gaussian_time_convolution(op: DuhamelOperator, g):
    """int_0^t p0(t-s) * g(s) ds on the nodes, p0 in cell form, g(0) = 0."""
    off = np.arange(-2 * op.m, 2 * op.m + 1) * op.h
    Gs = [np.zeros_like(g[0])] + list(g)
    m, h = op.m, op.h
    out = np.empty_like(g)
    for i, js, _keys, w in op.pairs:
        acc = np.zeros(8 * m + 1)
        for j, wj in zip(js, w):
            if wj == 0 or not np.any(Gs[j]):
                continue
            p = _cell_gaussian(op.nodes[i] - op.nodes[j], off, h, 1)
            acc += wj * np.convolve(p, Gs[j])
        out[i - 1] = acc[2 * m:6 * m + 1] * h
    return out


def apply_semigroup(table: KernelTable, f, t, x, c: Coefficient | None = None):
    """T_t f(x) = int q(t,x,y) f(y) dy by the lattice sum (1-d tables).

    For translation-invariant tables the part of the integral beyond the stored
    offsets is added from the first order tail p0 + t J when ``c`` is given.
    """
    i = table.time_index(t)
    x = np.atleast_1d(np.asarray(x, float))
    h = table.dx
    if table.translation_invariant:
        off = table.offsets
        q = table.values[i]
        out = np.array([np.sum(q * f(xi - off)) * h for xi in x])
        if c is not None:
            out = out + _tail_integral(c, f, t, x, off[-1] + h / 2)
        return out
    lat = table.lattice
    idx = np.rint(x / h).astype(int) + table.m
    return (table.values[i][idx] @ f(lat)) * h


def _tail_integral(c, f, t, x, U):
    from scipy import integrate
    out = []
    for xi in x:
        def g(u):
            dens = gaussian_radial(t, u) + t * c.radial(u) / u ** (1 + c.beta)
            return dens * (f(xi + u) + f(xi - u))
        top = c.support_radius if np.isfinite(c.support_radius) else np.inf
        if top <= U:
            out.append(0.0)
            continue
        # the Gaussian part lives within a few sqrt(t) of U; the rest is algebraic
        mid = min(top, U + 12 * math.sqrt(t))
        val = integrate.quad(g, U, mid, limit=200)[0]
        if top > mid:
            val += integrate.quad(g, mid, top, limit=200)[0]
        out.append(val)
    return np.array(out)


def generator_check(table: KernelTable, c: Coefficient, f, lap_f, x=None, n_time=None):
    """sup over x and grid times of |T_t f - f - int_0^t T_s (Delta f + S^b f) ds|."""
    from scipy.interpolate import CubicSpline
    if x is None:
        x = np.linspace(-table.L / 2, table.L / 2, 9)
    h = table.dx
    span = table.offsets[-1] + table.L
    ys = np.arange(-math.ceil(span / h), math.ceil(span / h) + 1) * h
    sf = np.array([apply_Sb(c, f, y, inner_radius=min(1.0, 10 * h)).value for y in ys[::4]])
    sf_spline = CubicSpline(ys[::4], sf)
    Y = ys[::4][-1]
    left, right = sf[0], sf[-1]

    def sf_ext(y):
        # beyond the nodes S^b f decays like J(y) times the mass of f
        y = np.asarray(y, float)
        inner = sf_spline(np.clip(y, -Y, Y))
        decay = (Y / np.maximum(np.abs(y), Y)) ** (1 + c.beta)
        return np.where(y > Y, right * decay, np.where(y < -Y, left * decay, inner))

    g = lambda y: lap_f(y) + sf_ext(y)
    times = table.times if n_time is None else table.times[:n_time]
    Tg = [g(x)] + [apply_semigroup(table, g, t, x, c) for t in times]
    nodes = np.concatenate([[0.0], times])
    defect = 0.0
    for i, t in enumerate(times, start=1):
        integral = np.trapezoid(np.stack(Tg[:i + 1]), nodes[:i + 1], axis=0)
        lhs = apply_semigroup(table, f, t, x, c) - f(x)
        defect = max(defect, float(np.max(np.abs(lhs - integral))))
    return defect
