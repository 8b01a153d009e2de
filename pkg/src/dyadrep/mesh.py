"""Piecewise-constant functions on the level-L mesh and their Haar calculus.

A :class:`MeshFunction` stores one value per mesh cell of a box
``[origin, origin + shape)`` (integer cell coordinates).  Values outside the
box are zero.  Averages, Haar coefficients and conditional expectations are
exact finite sums over cells.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import DyadicCube, DyadicGrid, LevelError


class MisalignedCube(ValueError):
    pass


@dataclass(frozen=True)
class HaarIndex:
    cube: DyadicCube
    eta: tuple[int, ...]

    def __post_init__(self):
        eta = tuple(int(e) for e in self.eta)
        if len(eta) != self.cube.dim or any(e not in (0, 1) for e in eta):
            raise ValueError(f"bad sign pattern {self.eta}")
        object.__setattr__(self, "eta", eta)

    @property
    def cancellative(self) -> bool:
        return any(self.eta)


def cancellative_patterns(n: int) -> list[tuple[int, ...]]:
    return [eta for eta in itertools.product((0, 1), repeat=n) if any(eta)]


def child_signs(eta) -> np.ndarray:
    """Sign of ``h^eta`` on each child, children ordered by ``itertools.product``."""
    signs = []
    for bits in itertools.product((0, 1), repeat=len(eta)):
        s = 1
        for e, b in zip(eta, bits):
            if e:
                s *= 1 if b == 0 else -1
        signs.append(s)
    return np.array(signs, dtype=float)


class MeshFunction:
    def __init__(self, values, L: int, origin=None):
        values = np.asarray(values, dtype=float)
        if values.ndim not in (1, 2):
            raise ValueError("mesh functions live in dimension 1 or 2")
        self.values = values
        self.L = int(L)
        if origin is None:
            origin = (0,) * values.ndim
        self.origin = tuple(int(o) for o in np.atleast_1d(origin))
        if len(self.origin) != values.ndim:
            raise ValueError("origin dimension does not match the value array")

    # ------------------------------------------------------------------ basics
    @property
    def n(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def h(self) -> float:
        return 2.0 ** (-self.L)

    @property
    def cell_volume(self) -> float:
        return self.h ** self.n

    def __repr__(self):
        return f"MeshFunction(n={self.n}, L={self.L}, origin={self.origin}, shape={self.shape})"

    def _like(self, values) -> "MeshFunction":
        return MeshFunction(values, self.L, self.origin)

    def _check_compatible(self, other):
        if (self.L, self.origin, self.shape) != (other.L, other.origin, other.shape):
            raise ValueError("mesh functions live on different boxes; embed them first")

    def __add__(self, other):
        self._check_compatible(other)
        return self._like(self.values + other.values)

    def __sub__(self, other):
        self._check_compatible(other)
        return self._like(self.values - other.values)

    def __mul__(self, c):
        if isinstance(c, MeshFunction):
            self._check_compatible(c)
            return self._like(self.values * c.values)
        return self._like(self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.values)

    def abs(self) -> "MeshFunction":
        return self._like(np.abs(self.values))

    def copy(self) -> "MeshFunction":
        return self._like(self.values.copy())

    @classmethod
    def zeros(cls, L, origin, shape) -> "MeshFunction":
        return cls(np.zeros(tuple(shape)), L, origin)

    @classmethod
    def from_callable(cls, func, L: int, n: int = 1, origin=None, shape=None) -> "MeshFunction":
        """Sample ``func`` at left endpoints (corners) of the cells."""
        if origin is None:
            origin = (0,) * n
        if shape is None:
            shape = (1 << L,) * n
        axes = [(np.arange(s) + o) * 2.0 ** (-L) for o, s in zip(origin, shape)]
        pts = np.meshgrid(*axes, indexing="ij")
        return cls(func(*pts), L, origin)

    def embed(self, origin, shape) -> "MeshFunction":
        """Re-express on another box; the new box must contain the support."""
        origin = tuple(int(o) for o in np.atleast_1d(origin))
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        out = np.zeros(shape)
        src, dst = [], []
        for o_old, s_old, o_new, s_new in zip(self.origin, self.shape, origin, shape):
            lo, hi = max(o_old, o_new), min(o_old + s_old, o_new + s_new)
            if hi <= lo:
                src.append(slice(0, 0)); dst.append(slice(0, 0))
            else:
                src.append(slice(lo - o_old, hi - o_old)); dst.append(slice(lo - o_new, hi - o_new))
        out[tuple(dst)] = self.values[tuple(src)]
        lost = np.abs(self.values).sum() - np.abs(out).sum()
        if lost > 1e-12 * max(1.0, np.abs(self.values).sum()):
            raise ValueError("target box does not contain the support of the function")
        return MeshFunction(out, self.L, origin)

    def support_box(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Absolute cell box ``[lo, hi)`` of the nonzero values (None if zero)."""
        nz = np.nonzero(self.values)
        if len(nz[0]) == 0:
            return None
        lo = np.array([a.min() for a in nz]) + np.asarray(self.origin)
        hi = np.array([a.max() + 1 for a in nz]) + np.asarray(self.origin)
        return lo, hi

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def inner(self, other: "MeshFunction") -> float:
        self._check_compatible(other)
        return float((self.values * other.values).sum() * self.cell_volume)

    # ------------------------------------------------------------------ cube sums
    @cached_property
    def _prefix(self) -> np.ndarray:
        p = self.values
        for ax in range(self.n):
            p = np.cumsum(p, axis=ax)
        return np.pad(p, [(1, 0)] * self.n)

    def cube_integrals(self, corners, side: int) -> np.ndarray:
        """Integrals over the cubes ``[corner, corner + side)`` (absolute cells), vectorised.

        Parts of a cube outside the box contribute zero.
        """
        corners = np.atleast_2d(np.asarray(corners, dtype=np.int64))
        lo = corners - np.asarray(self.origin)
        hi = lo + side
        shape = np.asarray(self.shape)
        lo = np.clip(lo, 0, shape)
        hi = np.clip(hi, 0, shape)
        P = self._prefix
        total = np.zeros(len(corners))
        for bits in itertools.product((0, 1), repeat=self.n):
            idx = tuple(np.where(b, hi[:, a], lo[:, a]) for a, b in enumerate(bits))
            sign = (-1) ** (self.n - sum(bits))
            total += sign * P[idx]
        return total * self.cell_volume

    def cube_averages(self, corners, side: int) -> np.ndarray:
        return self.cube_integrals(corners, side) / (side * self.h) ** self.n

    def _check_cube(self, Q: DyadicCube):
        if Q.L != self.L:
            raise MisalignedCube(f"cube lives on mesh level {Q.L}, function on {self.L}")
        if Q.dim != self.n:
            raise MisalignedCube("cube and function dimensions differ")

    def average(self, Q: DyadicCube) -> float:
        self._check_cube(Q)
        return float(self.cube_averages(np.array([Q.corner]), Q.side)[0])

    def haar_coeffs(self, corners, level: int, eta) -> np.ndarray:
        """``<f, h_I^eta>`` for level-``level`` cubes with the given corners."""
        if level >= self.L and any(eta):
            raise LevelError("cancellative Haar functions need a level below the mesh level")
        side = 1 << (self.L - level)
        corners = np.atleast_2d(np.asarray(corners, dtype=np.int64))
        vol = (side * self.h) ** self.n
        if not any(eta):
            return self.cube_integrals(corners, side) / np.sqrt(vol)
        half = side // 2
        out = np.zeros(len(corners))
        for s, bits in zip(child_signs(eta), itertools.product((0, 1), repeat=self.n)):
            out += s * self.cube_integrals(corners + half * np.asarray(bits), half)
        return out / np.sqrt(vol)

    def haar_coeff(self, idx: HaarIndex) -> float:
        self._check_cube(idx.cube)
        return float(self.haar_coeffs(np.array([idx.cube.corner]), idx.cube.level, idx.eta)[0])

    # ------------------------------------------------------------------ projections
    def project(self, grid: DyadicGrid, k: int) -> "MeshFunction":
        """Conditional expectation onto the level-``k`` cubes of ``grid``."""
        if k >= self.L:
            return self.copy()
        side = grid.side(k)
        off = np.asarray(self.origin) - grid.offset(k)
        pad_lo = np.mod(off, side)
        total = pad_lo + np.asarray(self.shape)
        pad_hi = (-total) % side
        v = np.pad(self.values, [(int(a), int(b)) for a, b in zip(pad_lo, pad_hi)])
        blocks = v.shape
        if self.n == 1:
            m = v.reshape(-1, side).mean(axis=1)
            v = np.repeat(m, side)
        else:
            b0, b1 = blocks[0] // side, blocks[1] // side
            m = v.reshape(b0, side, b1, side).mean(axis=(1, 3))
            v = np.repeat(np.repeat(m, side, axis=0), side, axis=1)
        crop = tuple(slice(int(a), int(a) + s) for a, s in zip(pad_lo, self.shape))
        return self._like(v[crop])

    def level_difference(self, grid: DyadicGrid, k: int) -> "MeshFunction":
        """``sum over level-k cubes I of Delta_I f`` = ``E_{k+1} f - E_k f``."""
        return self.project(grid, k + 1) - self.project(grid, k)

    def restrict(self, Q: DyadicCube) -> "MeshFunction":
        mask = np.zeros(self.shape, dtype=bool)
        sl = []
        for c, o, s in zip(Q.corner, self.origin, self.shape):
            sl.append(slice(max(c - o, 0), max(min(c + Q.side - o, s), 0)))
        mask[tuple(sl)] = True
        return self._like(np.where(mask, self.values, 0.0))

    # ------------------------------------------------------------------ I/O
    def save(self, path) -> None:
        """Flat little-endian float64 array plus a JSON header next to it."""
        path = Path(path)
        self.values.astype("<f8").tofile(path.with_suffix(".bin"))
        header = {"n": self.n, "L": self.L, "box": {"origin": list(self.origin), "shape": list(self.shape)}}
        path.with_suffix(".json").write_text(json.dumps(header))

    @classmethod
    def load(cls, path) -> "MeshFunction":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(header["box"]["shape"])
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(shape)
        return cls(values, header["L"], header["box"]["origin"])

    def to_csv(self, path) -> None:
        h = self.h
        rows = ["x,value"] if self.n == 1 else ["x1,x2,value"]
        for idx in np.ndindex(*self.shape):
            xs = ",".join(repr((i + o) * h) for i, o in zip(idx, self.origin))
            rows.append(f"{xs},{self.values[idx]!r}")
        Path(path).write_text("\n".join(rows) + "\n")


# ---------------------------------------------------------------------- module functions
def indicator(Q: DyadicCube, origin, shape) -> MeshFunction:
    f = MeshFunction.zeros(Q.L, origin, shape)
    f.values[...] = 1.0
    return f.restrict(Q)


def haar_function(idx: HaarIndex, origin, shape) -> MeshFunction:
    """Materialise ``h_I^eta`` on the given box."""
    Q = idx.cube
    f = MeshFunction.zeros(Q.L, origin, shape)
    vol = Q.volume
    if not idx.cancellative:
        return indicator(Q, origin, shape) * (vol ** -0.5)
    from .grid import children
    out = f
    for s, ch in zip(child_signs(idx.eta), children(Q)):
        out = out + indicator(ch, origin, shape) * (s * vol ** -0.5)
    return out


def average(f: MeshFunction, Q: DyadicCube) -> float:
    return f.average(Q)


def haar_coeff(f: MeshFunction, idx: HaarIndex) -> float:
    return f.haar_coeff(idx)


def martingale_diff(f: MeshFunction, I: DyadicCube) -> MeshFunction:
    """``Delta_I f = sum over children I' of (<f>_I' - <f>_I) 1_I'``."""
    f._check_cube(I)
    if I.level >= f.L:
        raise LevelError("mesh cells have no martingale difference")
    lo = np.asarray(I.corner) - np.asarray(f.origin)
    if np.any(lo < 0) or np.any(lo + I.side > np.asarray(f.shape)):
        raise MisalignedCube("cube extends outside the function's box")
    from .grid import children
    out = MeshFunction.zeros(f.L, f.origin, f.shape)
    mean = f.average(I)
    for ch in children(I):
        out = out + indicator(ch, f.origin, f.shape) * (f.average(ch) - mean)
    return out


def project_scale(f: MeshFunction, grid: DyadicGrid, k: int) -> MeshFunction:
    return f.project(grid, k)


def dyadic_maximal(f: MeshFunction, grid: DyadicGrid) -> MeshFunction:
    """``M_D f`` truncated to the grid's scale range."""
    af = f.abs()
    out = af.values.copy()
    for k in range(grid.S, f.L):
        out = np.maximum(out, af.project(grid, k).values)
    return f._like(out)


def _box_averages(f: MeshFunction, centers, radius: float) -> np.ndarray:
    """Exact averages of |f| over the l-infinity balls (centers - r, centers + r)."""
    af = np.abs(f.values)
    h = f.h
    P = af
    for ax in range(f.n):
        P = np.cumsum(P, axis=ax)
    P = np.pad(P, [(1, 0)] * f.n) * f.cell_volume
    # the primitive is multilinear inside each cell, so interpolation is exact
    grids = [(np.arange(s + 1) + o) * h for o, s in zip(f.origin, f.shape)]
    lo = centers - radius
    hi = centers + radius

    def prim(pts):
        from scipy.interpolate import RegularGridInterpolator
        clipped = np.stack([np.clip(pts[..., a], grids[a][0], grids[a][-1]) for a in range(f.n)], axis=-1)
        return RegularGridInterpolator(grids, P, method="linear")(clipped)

    total = np.zeros(centers.shape[:-1])
    for bits in itertools.product((0, 1), repeat=f.n):
        pts = np.where(np.asarray(bits, dtype=bool), hi, lo)
        total += (-1) ** (f.n - sum(bits)) * prim(pts)
    return total / (2 * radius) ** f.n


def ball_ladder(f: MeshFunction) -> np.ndarray:
    diam = max(f.shape) * f.h
    radii = [f.h]
    while radii[-1] < diam:
        radii.append(radii[-1] * 2)
    return np.array(radii)


def bilinear_maximal(f: MeshFunction, g: MeshFunction, mode: str = "dyadic",
                     grid: DyadicGrid | None = None, ratio: float = 2.0) -> MeshFunction:
    """Cellwise bilinear maximal function.

    ``dyadic``: sup over grid cubes containing the cell of the product of averages.
    ``ball``: sup over a geometric ladder of radii (ratio ``ratio``) of the product
    of averages over the ball centred at the cell centre.
    """
    f._check_compatible(g)
    if mode == "dyadic":
        if grid is None:
            raise ValueError("dyadic mode needs a grid")
        af, ag = f.abs(), g.abs()
        out = af.values * ag.values
        for k in range(grid.S, f.L):
            out = np.maximum(out, af.project(grid, k).values * ag.project(grid, k).values)
        return f._like(out)
    if mode != "ball":
        raise ValueError(f"unknown maximal mode {mode!r}")
    axes = [(np.arange(s) + o + 0.5) * f.h for o, s in zip(f.origin, f.shape)]
    centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    out = np.zeros(f.shape)
    r = f.h / 2
    diam = max(f.shape) * f.h
    while r <= 2 * diam:
        out = np.maximum(out, _box_averages(f, centers, r) * _box_averages(g, centers, r))
        r *= ratio
    return f._like(out)


def lp_norm(f: MeshFunction, p) -> float:
    if p == np.inf or p == "inf":
        return float(np.abs(f.values).max()) if f.values.size else 0.0
    p = float(p)
    if p <= 0:
        raise ValueError("p must be positive")
    return float((np.sum(np.abs(f.values) ** p) * f.cell_volume) ** (1 / p))


def square_function(f: MeshFunction, grid: DyadicGrid) -> MeshFunction:
    """``(sum over grid cubes I with level < L of |Delta_I f|^2)^(1/2)``."""
    acc = np.zeros(f.shape)
    prev = f.project(grid, grid.S)
    for k in range(grid.S, f.L):
        nxt = f.project(grid, k + 1)
        acc += (nxt.values - prev.values) ** 2
        prev = nxt
    return f._like(np.sqrt(acc))
