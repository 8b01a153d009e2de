"""Dyadic cubes, shifted dyadic grids over a finite scale range, goodness.

Geometry is kept in integer units of the finest mesh cell ``2**-L`` so that
nesting, adjacency and distances between cubes are exact.  A grid covers the
levels ``S`` (coarsest, sidelength ``2**-S``) through ``L`` (the mesh cells).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class LevelError(ValueError):
    """A cube operation asked for a level outside the available range."""


@dataclass(frozen=True)
class DyadicCube:
    level: int
    corner: tuple[int, ...]
    L: int

    def __post_init__(self):
        if self.level > self.L:
            raise LevelError(f"level {self.level} finer than mesh level {self.L}")
        object.__setattr__(self, "corner", tuple(int(c) for c in self.corner))

    @property
    def dim(self) -> int:
        return len(self.corner)

    @property
    def side(self) -> int:
        """Sidelength in mesh cells."""
        return 1 << (self.L - self.level)

    @property
    def sidelength(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def volume(self) -> float:
        return self.sidelength ** self.dim

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=np.int64)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.side

    def contains(self, other: "DyadicCube") -> bool:
        return bool(np.all(self.lo <= other.lo) and np.all(other.hi <= self.hi))

    def intersects(self, other: "DyadicCube") -> bool:
        return bool(np.all(np.maximum(self.lo, other.lo) < np.minimum(self.hi, other.hi)))

    def to_json(self) -> dict:
        return {"level": self.level, "corner": list(self.corner)}


def children(Q: DyadicCube) -> list[DyadicCube]:
    """The ``2**n`` dyadic children of ``Q`` (mesh-aligned halves)."""
    if Q.level >= Q.L:
        raise LevelError(f"cube at level {Q.level} is a mesh cell and has no children")
    half = Q.side // 2
    out = []
    for bits in itertools.product((0, 1), repeat=Q.dim):
        corner = tuple(c + b * half for c, b in zip(Q.corner, bits))
        out.append(DyadicCube(Q.level + 1, corner, Q.L))
    return out


def cube_distance(A: DyadicCube, B: DyadicCube) -> float:
    """l-infinity distance between two cubes, in real units."""
    gap = np.maximum(0, np.maximum(A.lo - B.hi, B.lo - A.hi))
    return float(gap.max()) * 2.0 ** (-A.L)


def boundary_distance(I: DyadicCube, J: DyadicCube) -> float:
    """l-infinity distance ``d(I, boundary of J)`` in real units."""
    if J.contains(I):
        gap = np.minimum(I.lo - J.lo, J.hi - I.hi)
        return float(gap.min()) * 2.0 ** (-I.L)
    if not I.intersects(J):
        return cube_distance(I, J)
    return 0.0


@dataclass(frozen=True)
class GoodnessParams:
    r: int = 4
    gamma: float = 1 / 6
    alpha: float = 1.0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @classmethod
    def from_alpha(cls, alpha: float, n: int, r: int = 4) -> "GoodnessParams":
        return cls(r=r, gamma=float(gamma_of(alpha, n)), alpha=alpha)


def gamma_of(alpha, n: int) -> Fraction:
    """Goodness exponent ``alpha / (2 (2n + alpha))``, exact for rational alpha."""
    if n < 1:
        raise ValueError("dimension must be positive")
    a = Fraction(alpha).limit_denominator(10**6)
    if not 0 < a <= 1:
        raise ValueError(f"Hoelder exponent must lie in (0, 1], got {alpha}")
    return a / (2 * (2 * n + a))


class DyadicGrid:
    """Translated dyadic lattice ``D_0 + omega`` truncated to levels ``S..L``.

    ``omega[i - S]`` holds the shift bits for scale ``2**-i``.  A cube of level
    ``k`` in the standard grid is translated by ``sum_{i > k} 2**-i omega^i``,
    which is an integer number of mesh cells.
    """

    def __init__(self, n: int = 1, L: int = 10, S: int = 0, omega=None):
        if n not in (1, 2):
            raise ValueError("only dimensions 1 and 2 are supported")
        if S > L:
            raise ValueError("coarsest level S must not exceed the mesh level L")
        self.n, self.L, self.S = n, L, S
        if omega is None:
            omega = np.zeros((L - S + 1, n), dtype=np.int64)
        omega = np.asarray(omega, dtype=np.int64).reshape(L - S + 1, n)
        if np.any((omega != 0) & (omega != 1)):
            raise ValueError("shift bits must be 0 or 1")
        self.omega = omega
        # offsets[k - S] = sum_{i=k+1}^{L} 2**(L-i) omega^i
        offs = np.zeros((L - S + 1, n), dtype=np.int64)
        for k in range(L - 1, S - 1, -1):
            i = k + 1
            offs[k - S] = offs[k + 1 - S] + (1 << (L - i)) * omega[i - S]
        self._offsets = offs

    def __eq__(self, other):
        return (isinstance(other, DyadicGrid) and (self.n, self.L, self.S) == (other.n, other.L, other.S)
                and np.array_equal(self.omega, other.omega))

    def __repr__(self):
        return f"DyadicGrid(n={self.n}, L={self.L}, S={self.S}, omega={self.omega[:, 0].tolist() if self.n == 1 else self.omega.tolist()})"

    @property
    def scale_range(self) -> tuple[int, int]:
        return self.S, self.L

    def offset(self, k: int) -> np.ndarray:
        self._check_level(k)
        return self._offsets[k - self.S]

    def _check_level(self, k):
        if not self.S <= k <= self.L:
            raise LevelError(f"level {k} outside scale range [{self.S}, {self.L}]")

    def side(self, k: int) -> int:
        return 1 << (self.L - k)

    def cube_index(self, cells, k: int) -> np.ndarray:
        """Integer index ``m`` (per axis) of the level-``k`` cube containing each cell."""
        cells = np.asarray(cells, dtype=np.int64)
        return np.floor_divide(cells - self.offset(k), self.side(k))

    def corner_of(self, index, k: int) -> np.ndarray:
        return np.asarray(index, dtype=np.int64) * self.side(k) + self.offset(k)

    def cube_containing(self, cell, k: int) -> DyadicCube:
        cell = np.atleast_1d(np.asarray(cell, dtype=np.int64))
        corner = self.corner_of(self.cube_index(cell, k), k)
        return DyadicCube(k, tuple(corner), self.L)

    def contains_cube(self, Q: DyadicCube) -> bool:
        if Q.L != self.L or not self.S <= Q.level <= self.L or Q.dim != self.n:
            return False
        return bool(np.all((Q.lo - self.offset(Q.level)) % Q.side == 0))

    def ancestor(self, Q: DyadicCube, k: int) -> DyadicCube:
        """``Q^{(k)}``: the grid cube of sidelength ``2**k * l(Q)`` containing ``Q``."""
        if k < 0:
            raise ValueError("ancestor generation must be non-negative")
        level = Q.level - k
        if level < self.S:
            raise LevelError(f"ancestor at level {level} is coarser than the grid range (S={self.S})")
        return self.cube_containing(Q.corner, level)

    def cubes_meeting(self, k: int, lo, hi) -> list[DyadicCube]:
        """All level-``k`` cubes meeting the cell box ``[lo, hi)``."""
        lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.int64))
        first = self.cube_index(lo, k)
        last = self.cube_index(hi - 1, k)
        ranges = [range(a, b + 1) for a, b in zip(first, last)]
        return [DyadicCube(k, tuple(self.corner_of(np.array(m), k)), self.L)
                for m in itertools.product(*ranges)]

    def domain(self, lo=None, hi=None) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Cell box (origin, shape) of the union of top cubes meeting ``[lo, hi)``.

        Defaults to the unit reference box ``[0, 1)^n``.
        """
        if lo is None:
            lo = np.zeros(self.n, dtype=np.int64)
        if hi is None:
            hi = np.full(self.n, 1 << self.L, dtype=np.int64)
        lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.int64))
        first = self.corner_of(self.cube_index(lo, self.S), self.S)
        last = self.corner_of(self.cube_index(hi - 1, self.S), self.S) + self.side(self.S)
        return tuple(int(v) for v in first), tuple(int(v) for v in last - first)

    # ------------------------------------------------------------------ goodness
    def is_good(self, I: DyadicCube, params: GoodnessParams) -> bool:
        """Goodness of ``I`` with respect to all grid cubes ``J`` with ``l(J) >= 2**r l(I)``.

        Only the ancestors of ``I`` need checking: for a non-ancestor ``J`` of
        that size ``d(I, boundary J) >= d(I, boundary of the ancestor)``.
        """
        return bool(good_mask(self, params, I.level, np.asarray(I.corner)[None, :])[0])

    # ------------------------------------------------------------------ serialization
    def to_json(self) -> dict:
        return {"n": self.n, "L": self.L, "S": self.S, "omega": self.omega.tolist()}

    @classmethod
    def from_json(cls, obj) -> "DyadicGrid":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(n=obj["n"], L=obj["L"], S=obj["S"], omega=obj["omega"])


def good_mask(grid: DyadicGrid, params: GoodnessParams, level: int, corners) -> np.ndarray:
    """Vectorised goodness for level-``level`` cubes given by their corners (N, n)."""
    corners = np.atleast_2d(np.asarray(corners, dtype=np.int64))
    good = np.ones(len(corners), dtype=bool)
    h = 2.0 ** (-grid.L)
    side_i = grid.side(level)
    for j in range(grid.S, level - params.r + 1):
        side_j = grid.side(j)
        J_lo = grid.corner_of(grid.cube_index(corners, j), j)
        gap = np.minimum(corners - J_lo, J_lo + side_j - (corners + side_i)).min(axis=1)
        thr = (2.0 ** -level) ** params.gamma * (2.0 ** -j) ** (1 - params.gamma)
        good &= gap * h > thr
    return good


def sample_grid(rng_seed, scale_range=(0, 10), n: int = 1) -> DyadicGrid:
    """Draw every ``omega^i`` uniformly from ``{0,1}^n``; deterministic in the seed."""
    S, L = scale_range
    rng = np.random.default_rng(rng_seed)
    return DyadicGrid(n=n, L=L, S=S, omega=rng.integers(0, 2, size=(L - S + 1, n)))


def standard_grid(n: int = 1, L: int = 10, S: int = 0) -> DyadicGrid:
    return DyadicGrid(n=n, L=L, S=S)


@dataclass
class PiGoodEstimate:
    value: float
    stderr: float
    trials: int
    good: int
    base_level: int

    def interval(self, z: float = 3.0) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr


def estimate_pi_good(params: GoodnessParams, base_level: int, trials: int, rng_seed,
                     L: int = 10, S: int = 0, n: int = 1) -> PiGoodEstimate:
    """Monte Carlo probability that ``I + omega`` is good, ``I`` the level-``base_level``
    cube of the standard grid with corner at the origin."""
    if trials < 1:
        raise ValueError("need at least one trial")
    rng = np.random.default_rng(rng_seed)
    omegas = rng.integers(0, 2, size=(trials, L - S + 1, n))
    good = 0
    corner0 = np.zeros((1, n), dtype=np.int64)
    for t in range(trials):
        grid = DyadicGrid(n=n, L=L, S=S, omega=omegas[t])
        good += int(good_mask(grid, params, base_level, corner0 + grid.offset(base_level))[0])
    p = good / trials
    return PiGoodEstimate(p, math.sqrt(max(p * (1 - p), 0.0) / trials), trials, good, base_level)


def exact_pi_good(params: GoodnessParams, level: int, L: int, S: int, n: int = 1,
                  max_bits: int = 22) -> float:
    """Exact goodness probability of a level-``level`` cube by enumerating the
    shift bits it depends on (scales ``S+1..level``)."""
    nbits = max(level - S, 0) * n
    if level - params.r < S:
        return 1.0
    if nbits > max_bits:
        raise ValueError(f"{nbits} shift bits is too many to enumerate")
    count = 0
    corner0 = np.zeros((1, n), dtype=np.int64)
    for bits in range(1 << nbits):
        omega = np.zeros((L - S + 1, n), dtype=np.int64)
        vals = [(bits >> b) & 1 for b in range(nbits)]
        omega[1:level - S + 1] = np.array(vals, dtype=np.int64).reshape(level - S, n)
        grid = DyadicGrid(n=n, L=L, S=S, omega=omega)
        count += int(good_mask(grid, params, level, corner0 + grid.offset(level))[0])
    return count / (1 << nbits)
