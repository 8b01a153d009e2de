"""Bilinear Calderón–Zygmund kernels on the line, their truncations and trilinear pairings.

All built-in kernels are translation invariant, ``K(x, y, z) = k(x - y, x - z)``, so
the cell-triple integrals of a truncated kernel on the level-L mesh depend only on
the offsets ``(y - x, z - x)`` in cells.  :class:`PairingTable` integrates these
once by quadrature and evaluates pairings of mesh functions as exact finite sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .mesh import MeshFunction


class QuadratureError(RuntimeError):
    pass


# ---------------------------------------------------------------------- cutoffs
@dataclass(frozen=True)
class SmoothCutoff:
    """``phi(t) = s(2t - 1)`` on ``[1/2, 1]`` with the smoothstep ``s(u) = 3u^2 - 2u^3``."""

    name: str = "smoothstep"

    def __call__(self, t):
        u = np.clip(2.0 * np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
        return u * u * (3.0 - 2.0 * u)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        u = 2.0 * t - 1.0
        inside = (u > 0) & (u < 1)
        return np.where(inside, 2.0 * 6.0 * u * (1.0 - u), 0.0)

    @property
    def max_derivative(self) -> float:
        return 3.0


def smooth_cutoff_default() -> SmoothCutoff:
    return SmoothCutoff()


# ---------------------------------------------------------------------- kernels
@dataclass(frozen=True)
class KernelConstants:
    alpha: float
    cz_norm: float


@dataclass(frozen=True)
class BilinearKernel:
    """A translation-invariant kernel given by its profile ``k(a, b)``, ``a = x - y``, ``b = x - z``."""

    name: str
    profile: Callable = field(compare=False, repr=False)
    constants: KernelConstants = KernelConstants(1.0, 0.0)
    n: int = 1
    params: tuple = ()
    kinked: bool = False

    def __call__(self, x, y, z):
        x, y, z = (np.asarray(v, dtype=float) for v in (x, y, z))
        return self.profile(x - y, x - z)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def _beurling_re(a, b):
    r2 = a * a + b * b
    return (a * a - b * b) / (r2 * r2)


def _beurling_im(a, b):
    r2 = a * a + b * b
    return -2.0 * a * b / (r2 * r2)


def _zero(a, b):
    return np.zeros(np.broadcast(a, b).shape)


# Declared constants are rounded-up sampled suprema (see measure_constants).
_DECLARED = {"beurling-re": 32.0, "beurling-im": 32.0, "size-only": 32.0, "zero": 0.0}


def builtin_kernel(name: str, delta0: float = 0.0) -> BilinearKernel:
    if name == "beurling-re":
        return BilinearKernel(name, _beurling_re, KernelConstants(1.0, _DECLARED[name]))
    if name == "beurling-im":
        return BilinearKernel(name, _beurling_im, KernelConstants(1.0, _DECLARED[name]))
    if name == "size-only":
        d0 = float(delta0)

        def size_only(a, b):
            return 1.0 / (np.abs(a) + np.abs(b) + d0) ** 2

        return BilinearKernel(name, size_only, KernelConstants(1.0, _DECLARED[name]), params=(d0,), kinked=True)
    if name == "zero":
        return BilinearKernel(name, _zero, KernelConstants(1.0, 0.0))
    raise ValueError(f"unknown kernel {name!r}")


KERNEL_NAMES = ("beurling-re", "beurling-im", "size-only", "zero")


# ---------------------------------------------------------------------- truncations
@dataclass(frozen=True)
class TruncationSpec:
    kind: str = "smooth"
    eps: float = 0.125
    eps2: float | None = None
    phi: SmoothCutoff = SmoothCutoff()

    def __post_init__(self):
        if self.kind not in ("sharp", "smooth", "smooth-band"):
            raise ValueError(f"unknown truncation kind {self.kind!r}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.kind == "smooth-band":
            if self.eps2 is None or self.eps2 < self.eps:
                raise ValueError("band truncation needs eps2 >= eps")

    def factor(self, a, b):
        if self.kind == "sharp":
            return (np.maximum(np.abs(a), np.abs(b)) > self.eps).astype(float)
        s = np.abs(a) + np.abs(b)
        if self.kind == "smooth":
            return self.phi(s / self.eps)
        return self.phi(s / self.eps) - self.phi(s / self.eps2)

    def key(self) -> tuple:
        return (self.kind, float(self.eps), None if self.eps2 is None else float(self.eps2), self.phi.name)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "eps": self.eps}
        if self.eps2 is not None:
            out["eps2"] = self.eps2
        return out

    @classmethod
    def from_json(cls, d: dict) -> "TruncationSpec":
        return cls(d.get("kind", "smooth"), float(d.get("eps", 0.125)), d.get("eps2"))


@dataclass(frozen=True)
class QuadratureSpec:
    order: int = 4
    near_factor: int = 4


def truncated_profile(K: BilinearKernel, trunc: TruncationSpec):
    def prof(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = trunc.factor(a, b)
            val = K.profile(a, b)
        return np.where(fac != 0.0, val * fac, 0.0)

    return prof


# ---------------------------------------------------------------------- constants
def measure_constants(K: BilinearKernel, samples: int = 100_000, seed: int = 0,
                      trunc: TruncationSpec | None = None) -> dict:
    """Sampled suprema of the size ratio and the three Hölder ratios.

    Points are scrambled Sobol samples of ``(y - x, z - x)`` in ``[-1, 1]^2`` and of a
    perturbation up to half of ``max(|x - y|, |x - z|)``.  Returns the individual
    maxima and their overall maximum ``cz_norm``.
    """
    prof = truncated_profile(K, trunc) if trunc is not None else K.profile
    alpha = K.constants.alpha
    m = int(2 ** np.ceil(np.log2(max(samples, 2))))
    pts = qmc.Sobol(d=4, scramble=True, seed=seed).random(m)
    if trunc is not None:
        scale = 4.0 * trunc.eps if trunc.eps2 is None else 2.0 * trunc.eps2
    else:
        scale = 1.0
    u = (2 * pts[:, 0] - 1) * scale
    v = (2 * pts[:, 1] - 1) * scale
    mx = np.maximum(np.abs(u), np.abs(v))
    keep = mx > 1e-9 * scale
    u, v, mx = u[keep], v[keep], mx[keep]
    t = (pts[keep, 2] - 0.5) * mx            # |t| <= mx/2
    s = np.abs(u) + np.abs(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        k0 = prof(u, v)
        size = np.nanmax(np.abs(k0) * s ** 2)
        ratios = {}
        # x -> x + t shifts both differences; y -> y + t and z -> z + t shift one each
        for label, du, dv in (("holder_x", t, t), ("holder_y", -t, 0 * t), ("holder_z", 0 * t, -t)):
            k1 = prof(u + du, v + dv)
            r = np.abs(k1 - k0) * s ** (2 + alpha) / np.abs(t) ** alpha
            r = r[np.isfinite(r) & (np.abs(t) > 0)]
            ratios[label] = float(r.max()) if r.size else 0.0
    out = {"size": float(size), **ratios, "samples": int(keep.sum())}
    out["cz_norm"] = max(out["size"], ratios["holder_x"], ratios["holder_y"], ratios["holder_z"])
    return out


# ---------------------------------------------------------------------- quadrature tables
def _gauss(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def _subdivided(order: int, pieces: int):
    x, w = _gauss(order)
    nodes = (np.arange(pieces)[:, None] + x[None, :]).ravel() / pieces
    weights = np.tile(w, pieces) / pieces
    return nodes, weights


def _smooth_entries(prof, P, Q, h, order, pieces):
    """Cell-triple integrals for offset pairs (P, Q) by 3-D tensor Gauss quadrature."""
    x, w = _subdivided(order, pieces)
    u, v, t = np.meshgrid(x, x, x, indexing="ij")
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    da = (u - v).ravel()
    db = (u - t).ravel()
    out = np.empty(len(P))
    chunk = max(1, 2_000_000 // len(W))
    for s in range(0, len(P), chunk):
        p = P[s:s + chunk, None]
        q = Q[s:s + chunk, None]
        vals = prof(h * (da[None, :] - p), h * (db[None, :] - q))
        out[s:s + chunk] = vals @ W
    return out * h ** 3


def _sharp_entry(prof_plain, eps, p, q, h, order, pieces):
    """Exact-split quadrature of one cell triple for the sharp truncation.

    For each x node the (y, z) square is split where ``|x - y| = eps`` or ``|x - z| = eps``;
    the outer x integral is split where those split points cross cell boundaries.
    """
    e = eps / h
    gx, gw = _gauss(order)
    # a = u - v - p in cells; a = +-e  <=>  v = u - p -+ e
    brk = {0.0, 1.0}
    for c in (p + e, p - e, q + e, q - e, p + e + 1, p - e + 1, q + e + 1, q - e + 1):
        if 0 < c < 1:
            brk.add(float(c))
    xb = sorted(brk)
    total = 0.0
    for lo, hi in zip(xb[:-1], xb[1:]):
        sub = np.linspace(lo, hi, pieces + 1)
        for a0, a1 in zip(sub[:-1], sub[1:]):
            for uu, ww in zip(a0 + (a1 - a0) * gx, (a1 - a0) * gw):
                vb = sorted({0.0, 1.0, *(c for c in (uu - p - e, uu - p + e) if 0 < c < 1)})
                tb = sorted({0.0, 1.0, *(c for c in (uu - q - e, uu - q + e) if 0 < c < 1)})
                acc = 0.0
                for v0, v1 in zip(vb[:-1], vb[1:]):
                    vm = 0.5 * (v0 + v1)
                    if abs(uu - vm - p) > e:
                        # whole v-strip outside the square: integrate all of t
                        tparts = [(0.0, 1.0)]
                    else:
                        tparts = [(t0, t1) for t0, t1 in zip(tb[:-1], tb[1:])
                                  if abs(uu - 0.5 * (t0 + t1) - q) > e]
                    vv = v0 + (v1 - v0) * gx
                    vw = (v1 - v0) * gw
                    for t0, t1 in tparts:
                        tt = t0 + (t1 - t0) * gx
                        tw = (t1 - t0) * gw
                        A = h * (uu - vv[:, None] - p)
                        B = h * (uu - tt[None, :] - q)
                        acc += float(vw @ prof_plain(A, B) @ tw)
                total += ww * acc
    return total * h ** 3


@lru_cache(maxsize=32)
def _table_cached(kernel: BilinearKernel, trunc_key, trunc: TruncationSpec, quad: QuadratureSpec,
                  L: int, R: int) -> np.ndarray:
    h = 2.0 ** (-L)
    offs = np.arange(-R, R + 1)
    P, Q = np.meshgrid(offs, offs, indexing="ij")
    P = P.ravel().astype(float)
    Q = Q.ravel().astype(float)
    w = np.zeros(len(P))
    if kernel.is_zero:
        return w.reshape(2 * R + 1, 2 * R + 1)
    prof = truncated_profile(kernel, trunc)
    e = trunc.eps / h
    absP, absQ = np.abs(P), np.abs(Q)
    smin = np.maximum(absP - 1, 0) + np.maximum(absQ - 1, 0)
    smax = absP + absQ + 2
    mmin = np.maximum(np.maximum(absP - 1, 0), np.maximum(absQ - 1, 0))
    mmax = np.maximum(absP, absQ) + 1
    if trunc.kind == "sharp":
        if e < 2:
            raise QuadratureError("sharp truncation needs eps >= 2 mesh cells")
        inside = mmax <= e          # truncation factor identically zero
        cut = (~inside) & (mmin <= e)
        plain = ~inside & ~cut
        w[plain] = _smooth_entries(prof, P[plain], Q[plain], h, quad.order, 1)
        for idx in np.flatnonzero(cut):
            w[idx] = _sharp_entry(kernel.profile, trunc.eps, P[idx], Q[idx], h, quad.order, 1)
    else:
        kinks = [0.5 * e, e]
        if trunc.kind == "smooth-band":
            kinks += [0.5 * trunc.eps2 / h, trunc.eps2 / h]
        zero = smax <= 0.5 * e
        if trunc.kind == "smooth-band":
            zero |= smin >= trunc.eps2 / h
        # cells where the integrand has a kink: cutoff transition edges or a = 0 / b = 0
        near = (absP <= 1) | (absQ <= 1)
        for kk in kinks:
            near |= (smin <= kk) & (smax >= kk)
        near &= ~zero
        plain = ~zero & ~near
        w[plain] = _smooth_entries(prof, P[plain], Q[plain], h, quad.order, 1)
        w[near] = _smooth_entries(prof, P[near], Q[near], h, quad.order, quad.near_factor)
    return w.reshape(2 * R + 1, 2 * R + 1)


def offset_table(K: BilinearKernel, trunc: TruncationSpec, quad: QuadratureSpec, L: int, R: int) -> np.ndarray:
    """``w[p + R, q + R] = integral over x-cell, (x+p)-cell, (x+q)-cell of K_trunc``."""
    return _table_cached(K, trunc.key(), trunc, quad, int(L), int(R))


class PairingTable:
    """Truncated-kernel cell integrals for offsets up to ``R`` cells, with box-sum support."""

    def __init__(self, K: BilinearKernel, trunc: TruncationSpec, L: int, R: int,
                 quad: QuadratureSpec = QuadratureSpec()):
        self.kernel, self.trunc, self.quad, self.L, self.R = K, trunc, quad, int(L), int(R)
        self.w = offset_table(K, trunc, quad, L, R)
        self._box = None

    @property
    def h(self) -> float:
        return 2.0 ** (-self.L)

    # -------------------------------------------------------------- dense pairing
    def pairing(self, f: MeshFunction, g: MeshFunction, h: MeshFunction) -> float:
        """``<T(f, g), h>`` as the exact triple sum over cells."""
        for u in (f, g, h):
            if u.L != self.L or u.n != 1:
                raise ValueError("pairing needs 1-D functions on the table's mesh")
        bf, bg, bh = f.support_box(), g.support_box(), h.support_box()
        if bf is None or bg is None or bh is None:
            return 0.0
        (y0,), (y1,) = bf
        (z0,), (z1,) = bg
        (x0,), (x1,) = bh
        span = max(y1, z1) - min(x0, y0, z0)
        span = max(span, x1 - min(y0, z0))
        if span > self.R + 1:
            raise ValueError(f"supports span {span} cells, table covers {self.R}")
        fv = f.values[y0 - f.origin[0]:y1 - f.origin[0]]
        gv = g.values[z0 - g.origin[0]:z1 - g.origin[0]]
        hv = h.values[x0 - h.origin[0]:x1 - h.origin[0]]
        R = self.R
        vals = np.empty(x1 - x0)
        for i, x in enumerate(range(x0, x1)):
            if hv[i] == 0.0:
                vals[i] = 0.0
                continue
            block = self.w[y0 - x + R:y1 - x + R, z0 - x + R:z1 - x + R]
            vals[i] = hv[i] * (fv @ block @ gv)
        return float(np.sum(vals))

    def apply(self, f: MeshFunction, g: MeshFunction, origin, shape) -> MeshFunction:
        """Cell averages of ``T(f, g)`` on the box ``[origin, origin + shape)``."""
        out = MeshFunction.zeros(self.L, origin, shape)
        bf, bg = f.support_box(), g.support_box()
        if bf is None or bg is None:
            return out
        (y0,), (y1,) = bf
        (z0,), (z1,) = bg
        fv = f.values[y0 - f.origin[0]:y1 - f.origin[0]]
        gv = g.values[z0 - g.origin[0]:z1 - g.origin[0]]
        R = self.R
        for i in range(out.shape[0]):
            x = out.origin[0] + i
            if max(y1, z1) - x > R + 1 or x - min(y0, z0) > R:
                raise ValueError("evaluation box exceeds the table range")
            block = self.w[y0 - x + R:y1 - x + R, z0 - x + R:z1 - x + R]
            out.values[i] = (fv @ block @ gv) / self.h
        return out

    # -------------------------------------------------------------- box sums
    def _box_tables(self):
        if self._box is None:
            w = self.w.astype(np.longdouble)
            P = np.zeros((w.shape[0] + 1, w.shape[1] + 1), dtype=np.longdouble)
            P[1:, 1:] = w.cumsum(axis=0).cumsum(axis=1)
            D = P.copy()
            for d in range(1, D.shape[0]):
                D[d, 1:] += D[d - 1, :-1]
            self._box = (P, D)
        return self._box

    def box3(self, x0, x1, y0, y1, z0, z1) -> np.ndarray:
        """``<T(1_[y0,y1), 1_[z0,z1)), 1_[x0,x1)>`` for integer cell intervals, vectorised."""
        P, D = self._box_tables()
        R = self.R
        x0, x1, y0, y1, z0, z1 = (np.asarray(a, dtype=np.int64) for a in (x0, x1, y0, y1, z0, z1))
        x0, x1, y0, y1, z0, z1 = np.broadcast_arrays(x0, x1, y0, y1, z0, z1)
        if np.any(np.maximum(y1, z1) - x0 > R + 1) or np.any(x1 - np.minimum(y0, z0) > R + 1):
            raise ValueError("box exceeds the table range")
        n = D.shape[0]

        def diag(c, d, x):
            # sum over x' >= x of P[c - x' + R, d - x' + R], read off the diagonal sums
            i = c - x + R
            j = d - x + R
            ok = (i >= 0) & (j >= 0)
            return np.where(ok, D[np.clip(i, 0, n - 1), np.clip(j, 0, n - 1)], 0)

        def xsum(c, d):
            return diag(c, d, x0) - diag(c, d, x1)

        total = xsum(y1, z1) - xsum(y0, z1) - xsum(y1, z0) + xsum(y0, z0)
        return np.asarray(total, dtype=float)


@lru_cache(maxsize=16)
def _pairing_table_cached(K, trunc_key, trunc, L, R, quad):
    return PairingTable(K, trunc, L, R, quad)


def pairing_table(K: BilinearKernel, trunc: TruncationSpec, L: int, R: int,
                  quad: QuadratureSpec = QuadratureSpec()) -> PairingTable:
    return _pairing_table_cached(K, trunc.key(), trunc, int(L), int(R), quad)


def _span(*fs: MeshFunction) -> int:
    boxes = [f.support_box() for f in fs]
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return 1
    lo = min(b[0][0] for b in boxes)
    hi = max(b[1][0] for b in boxes)
    return int(hi - lo + 1)


def _table_range(span: int) -> int:
    """Round a span up to a power of two so that tables are shared between calls."""
    return 1 << int(np.ceil(np.log2(max(span, 2))))


def trilinear_pairing(K: BilinearKernel, trunc: TruncationSpec, f: MeshFunction, g: MeshFunction,
                      h: MeshFunction, quad: QuadratureSpec = QuadratureSpec()) -> float:
    if trunc.kind == "smooth-band" and trunc.eps2 == trunc.eps:
        return 0.0
    R = _table_range(_span(f, g, h))
    return pairing_table(K, trunc, f.L, R, quad).pairing(f, g, h)


def adjoint_pairing(which: int, K: BilinearKernel, trunc: TruncationSpec, a: MeshFunction,
                    b: MeshFunction, c: MeshFunction, quad: QuadratureSpec = QuadratureSpec()) -> float:
    """``<T^{1*}(a, b), c> = <T(c, b), a>`` and ``<T^{2*}(a, b), c> = <T(a, c), b>``."""
    if which == 1:
        return trilinear_pairing(K, trunc, c, b, a, quad)
    if which == 2:
        return trilinear_pairing(K, trunc, a, c, b, quad)
    raise ValueError("which must be 1 or 2")


def wbp_constant(K: BilinearKernel, trunc: TruncationSpec, cubes, quad: QuadratureSpec = QuadratureSpec()) -> float:
    """Max of ``|<T(1_I, 1_I), 1_I>| / |I|`` over 1-D cubes."""
    cubes = list(cubes)
    if not cubes:
        raise ValueError("empty cube list")
    best = 0.0
    for Q in cubes:
        tab = pairing_table(K, trunc, Q.L, _table_range(Q.side), quad)
        c0, c1 = Q.corner[0], Q.corner[0] + Q.side
        val = float(tab.box3(c0, c1, c0, c1, c0, c1))
        best = max(best, abs(val) / Q.volume)
    return best


def sharp_smooth_gap(K: BilinearKernel, eps: float, f: MeshFunction, g: MeshFunction,
                     quad: QuadratureSpec = QuadratureSpec(), phi: SmoothCutoff = SmoothCutoff()) -> MeshFunction:
    """Cellwise ``|T_eps(f, g) - T^phi_eps(f, g)|`` on the common box of f and g."""
    lo = min(f.origin[0], g.origin[0])
    hi = max(f.origin[0] + f.shape[0], g.origin[0] + g.shape[0])
    margin = int(np.ceil(eps / 2.0 ** (-f.L))) + 1
    origin, shape = (lo - margin,), (hi - lo + 2 * margin,)
    R = _table_range(shape[0] + 1)
    sharp = pairing_table(K, TruncationSpec("sharp", eps), f.L, R, quad).apply(f, g, origin, shape)
    smooth = pairing_table(K, TruncationSpec("smooth", eps, phi=phi), f.L, R, quad).apply(f, g, origin, shape)
    return (sharp - smooth).abs()


# ---------------------------------------------------------------------- BMO pairing
def _ring_nodes(ya, yb, za, zb, width, order, cuts=()):
    """Tensor Gauss nodes on a rectangle, pieces no longer than ``width / 2`` and split at ``cuts``."""
    gx, gw = _gauss(order)

    def axis(a, b):
        pts = sorted({a, b, *(c for c in cuts if a < c < b)})
        nodes, weights = [], []
        for lo, hi in zip(pts[:-1], pts[1:]):
            m = max(1, int(np.ceil((hi - lo) / (width / 2) - 1e-9)))
            edges = np.linspace(lo, hi, m + 1)
            for e0, e1 in zip(edges[:-1], edges[1:]):
                nodes.append(e0 + (e1 - e0) * gx)
                weights.append((e1 - e0) * gw)
        return np.concatenate(nodes), np.concatenate(weights)

    yn, yw = axis(ya, yb)
    zn, zw = axis(za, zb)
    Y, Z = np.meshgrid(yn, zn, indexing="ij")
    return Y, Z, yw[:, None] * zw[None, :]


def _far_ring(prof, xs, xw, c, inner, outer, order, kinked=False):
    """``sum_x xw * integral over ring of (K(x, y, z) - K(c, y, z))`` for the square ring
    ``outer \\ inner`` around ``c`` in the (y, z) plane (half-widths ``inner``, ``outer``).

    Kernels with kinks on ``y = x`` or ``z = x`` are integrated per x node with the
    rectangles split on those lines.
    """
    width = outer - inner
    rects = [
        (c - outer, c - inner, c - outer, c + outer),
        (c + inner, c + outer, c - outer, c + outer),
        (c - inner, c + inner, c - outer, c - inner),
        (c - inner, c + inner, c + inner, c + outer),
    ]
    total = 0.0
    for ya, yb, za, zb in rects:
        if not kinked:
            Y, Z, W = _ring_nodes(ya, yb, za, zb, width, order)
            kc = prof(c - Y, c - Z)
            for x, w in zip(xs, xw):
                total += w * float(np.sum((prof(x - Y, x - Z) - kc) * W))
            continue
        Y, Z, W = _ring_nodes(ya, yb, za, zb, width, order, cuts=(c,))
        base = float(np.sum(prof(c - Y, c - Z) * W))
        for x, w in zip(xs, xw):
            Y, Z, W = _ring_nodes(ya, yb, za, zb, width, order, cuts=(x,))
            total += w * (float(np.sum(prof(x - Y, x - Z) * W)) - base)
    return total


def bmo_pairing(K: BilinearKernel, trunc: TruncationSpec, phi_test: MeshFunction, R, C: int = 3,
                quad: QuadratureSpec = QuadratureSpec(), far_tol: float = 1e-8, max_rings: int = 80,
                bound_constant: float | None = None) -> dict:
    """Two-term value of ``<T(1, 1), phi>`` for ``phi`` supported in the cube ``R``.

    Near part: ``<T(1_CR, 1_CR), phi>`` from the mesh table.  Far part: the
    difference kernel ``K(x, y, z) - K(c_R, y, z)`` integrated over dyadic square rings
    ``2^(j+1) CR \\ 2^j CR`` in the (y, z) plane, until the Hölder tail bound of the
    rings not yet summed falls below ``far_tol * max(|value|, |R|)``.
    """
    if C < 3 or int(C) != C:
        raise ValueError("C must be an integer >= 3")
    side = R.side
    if ((C - 1) * side) % 2:
        raise ValueError("C R must be mesh aligned; use an odd C or an even cube side")
    h = 2.0 ** (-phi_test.L)
    ell = side * h
    band_eps = trunc.eps if trunc.eps2 is None else trunc.eps2
    if 0.5 * (C - 1) * ell <= band_eps:
        raise ValueError("need (C - 1) l(R) / 2 > eps")
    supp = phi_test.support_box()
    c0, c1 = R.corner[0], R.corner[0] + side
    if supp is not None and (supp[0][0] < c0 or supp[1][0] > c1):
        raise ValueError("test function must be supported in R")
    if supp is None:
        return {"value": 0.0, "near": 0.0, "far": 0.0, "rings": 0, "tail_bound": 0.0}
    if abs(phi_test.integral()) > 1e-12 * max(1.0, np.abs(phi_test.values).sum() * h):
        raise ValueError("test function must have zero integral")
    ext = (C - 1) * side // 2
    lo, hi = c0 - ext, c1 + ext
    one = MeshFunction(np.ones(hi - lo), phi_test.L, (lo,))
    phi = phi_test.embed((lo,), (hi - lo,))
    tab = pairing_table(K, trunc, phi_test.L, _table_range(hi - lo + 1), quad)
    near = tab.pairing(one, one, phi)
    far, rings, tail = bmo_far_part(K, trunc, phi, R, C, quad, far_tol, max_rings, bound_constant,
                                    running=near)
    return {"value": near + far, "near": near, "far": far, "rings": rings, "tail_bound": float(tail)}


def bmo_far_part(K: BilinearKernel, trunc: TruncationSpec, phi: MeshFunction, R, C: int = 3,
                 quad: QuadratureSpec = QuadratureSpec(), far_tol: float = 1e-8, max_rings: int = 80,
                 bound_constant: float | None = None, running: float = 0.0, prof=None, kinked=None):
    """Far-field ring sum of the two-term BMO pairing; returns ``(far, rings, tail_bound)``.

    The integrand involves the truncated kernel only where ``max(|x - y|, |x - z|)``
    exceeds ``(C - 1) l(R) / 2``, so sharp and smooth truncations share this part.
    ``prof`` overrides the truncated profile (used for the adjoint kernels).
    """
    h = 2.0 ** (-phi.L)
    ell = R.side * h
    c0 = R.corner[0]
    if prof is None:
        prof = truncated_profile(K, trunc)
    if kinked is None:
        kinked = K.kinked
    gx, gw = _gauss(max(quad.order, 4))
    nz = np.flatnonzero(phi.values)
    xs = ((phi.origin[0] + nz)[:, None] + gx[None, :]).ravel() * h
    xw = (phi.values[nz][:, None] * gw[None, :]).ravel() * h
    c = (c0 + R.side / 2) * h
    inner = C * ell / 2
    cK = bound_constant if bound_constant is not None else max(K.constants.cz_norm, 1.0)
    l1 = float(np.abs(phi.values).sum() * h)
    far = 0.0
    rings = 0
    tail = np.inf
    while rings < max_rings:
        outer = 2 * inner
        far += _far_ring(prof, xs, xw, c, inner, outer, 8, kinked)
        rings += 1
        inner = outer
        # Hölder tail: |K(x) - K(c)| <= cK (l/2)^a / s^(2+a) over s > inner, area ~ 8 s ds
        tail = cK * l1 * 8.0 * (ell / 2) / inner
        if tail <= far_tol * max(abs(running + far), ell):
            break
    return far, rings, float(tail)


def adjoint_profile(K: BilinearKernel, trunc: TruncationSpec, which: int):
    """Profile ``(x - y, x - z) -> kernel`` of the adjoint ``(T_trunc)^{which*}``.

    ``(T^{1*})`` has kernel ``K(y, x, z)`` and ``(T^{2*})`` has kernel ``K(z, y, x)``.
    """
    prof = truncated_profile(K, trunc)
    if which == 1:
        return lambda a, b: prof(-a, b - a)
    if which == 2:
        return lambda a, b: prof(a - b, -b)
    raise ValueError("which must be 1 or 2")


def bmo_adjoint_pairing(K: BilinearKernel, trunc: TruncationSpec, which: int, phi_test: MeshFunction, R,
                        C: int = 3, quad: QuadratureSpec = QuadratureSpec(), far_tol: float = 1e-8,
                        max_rings: int = 80) -> dict:
    """Two-term value of ``<T^{which*}(1, 1), phi>`` for the truncated operator.

    The near part is exact through the pairing identities.  The far part uses the
    adjoint profile, whose truncation boundary is not aligned with the quadrature
    cuts, so for the sharp truncation it is accurate to quadrature level only.
    """
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    side = R.side
    if C < 3 or ((C - 1) * side) % 2:
        raise ValueError("C must be >= 3 with C R mesh aligned")
    ell = side * 2.0 ** (-phi_test.L)
    band_eps = trunc.eps if trunc.eps2 is None else trunc.eps2
    if 0.5 * (C - 1) * ell <= band_eps:
        raise ValueError("need (C - 1) l(R) / 2 > eps")
    if phi_test.support_box() is None:
        return {"value": 0.0, "near": 0.0, "far": 0.0, "rings": 0, "tail_bound": 0.0}
    ext = (C - 1) * side // 2
    lo, hi = R.corner[0] - ext, R.corner[0] + side + ext
    one = MeshFunction(np.ones(hi - lo), phi_test.L, (lo,))
    phi = phi_test.embed((lo,), (hi - lo,))
    tab = pairing_table(K, trunc, phi_test.L, _table_range(hi - lo + 1), quad)
    near = tab.pairing(phi, one, one) if which == 1 else tab.pairing(one, phi, one)
    far, rings, tail = bmo_far_part(K, trunc, phi, R, C, quad, far_tol, max_rings, running=near,
                                    prof=adjoint_profile(K, trunc, which), kinked=True)
    return {"value": near + far, "near": near, "far": far, "rings": rings, "tail_bound": float(tail)}
