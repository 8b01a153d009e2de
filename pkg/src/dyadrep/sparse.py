"""Sparse collections, stopping-time selection and sparse bounds for dyadic forms.

Cubes are one-dimensional grid cubes in mesh-cell units unless stated otherwise.
Sparseness is always checked with the canonical major sets
``E_Q = Q minus the maximal cubes of the family strictly inside Q``, counted in cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import DyadicCube, DyadicGrid, LevelError
from .kernels import (BilinearKernel, QuadratureSpec, TruncationSpec, bmo_adjoint_pairing, bmo_pairing,
                      measure_constants, trilinear_pairing, wbp_constant)
from .mesh import MeshFunction
from .models import ShiftSpec


class UnsupportedFamily(ValueError):
    pass


def stopping_constant(eta: float) -> int:
    """``C0(eta) = ceil(3 / (1 - eta))``: the stopping cubes then cover at most ``(1 - eta) |Q0|``."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    return math.ceil(3 / (1 - eta) - 1e-12)


def universal_constant(eta2: float, n: int = 1) -> int:
    """``C(eta2) = max(8^n, ceil((3 * 2^n / (1 - eta2))^3))``."""
    if not 0 < eta2 < 1:
        raise ValueError("eta must lie in (0, 1)")
    return max(8 ** n, math.ceil((3 * 2 ** n / (1 - eta2)) ** 3 - 1e-9))


# ---------------------------------------------------------------------- collections
@dataclass
class SparseCollection:
    cubes: list
    eta: float
    grid: DyadicGrid | None = None
    stages: list = field(default_factory=list)
    layers: dict = field(default_factory=dict)

    def __post_init__(self):
        seen, out = set(), []
        for Q in self.cubes:
            key = (Q.level, Q.corner)
            if key not in seen:
                seen.add(key)
                out.append(Q)
        self.cubes = sorted(out, key=lambda Q: (Q.level, Q.corner))

    def __len__(self):
        return len(self.cubes)

    def __contains__(self, Q):
        return any(Q == R for R in self.cubes)

    def to_json(self) -> dict:
        rep = verify_sparse(self)
        return {"eta": self.eta, "cubes": [Q.to_json() for Q in self.cubes],
                "major_ratio_min": rep.min_ratio}


@dataclass
class SparseReport:
    passed: bool
    min_ratio: float
    eta: float
    major_cells: dict

    def __bool__(self):
        return self.passed


def _laminar_parents(cubes: list) -> list:
    """Index of the smallest strictly larger cube containing each cube, or -1 (1-D, laminar families)."""
    order = sorted(range(len(cubes)), key=lambda i: (cubes[i].corner[0], -cubes[i].side))
    parent = [-1] * len(cubes)
    stack: list[int] = []
    for i in order:
        lo, hi = cubes[i].corner[0], cubes[i].corner[0] + cubes[i].side
        while stack and cubes[stack[-1]].corner[0] + cubes[stack[-1]].side <= lo:
            stack.pop()
        if stack:
            top = cubes[stack[-1]]
            if hi > top.corner[0] + top.side:
                raise UnsupportedFamily("family is not nested (two cubes overlap without containment)")
            parent[i] = stack[-1]
        stack.append(i)
    return parent


def verify_sparse(S: SparseCollection, eta: float | None = None) -> SparseReport:
    """Check ``|E_Q| >= eta |Q|`` for the canonical major sets, exactly in cell counts.

    The definition asks for ``|E_Q| > eta |Q|`` with some choice of sets; the
    canonical choice with ``>=`` is what the stopping-time constructions guarantee.
    """
    eta = S.eta if eta is None else eta
    cubes = S.cubes
    if not cubes:
        return SparseReport(True, 1.0, eta, {})
    if any(Q.dim != 1 for Q in cubes):
        raise UnsupportedFamily("major-set verification is implemented for 1-D families")
    if len({Q.L for Q in cubes}) != 1:
        raise UnsupportedFamily("cubes live on different meshes")
    parent = _laminar_parents(cubes)
    covered = [0] * len(cubes)
    for i, p in enumerate(parent):
        if p >= 0:
            covered[p] += cubes[i].side
    cells = {}
    ok = True
    worst = 1.0
    for i, Q in enumerate(cubes):
        major = Q.side - covered[i]
        cells[(Q.level, Q.corner)] = major
        # exact: major / side >= eta  <=>  major * den >= num * side for eta = num / den
        frac = _as_fraction(eta)
        ok &= major * frac[1] >= frac[0] * Q.side
        worst = min(worst, major / Q.side)
    return SparseReport(bool(ok), worst, eta, cells)


def _as_fraction(x: float) -> tuple[int, int]:
    from fractions import Fraction
    f = Fraction(x).limit_denominator(10**9)
    return f.numerator, f.denominator


def lambda_form(S: SparseCollection, f1: MeshFunction, f2: MeshFunction, f3: MeshFunction) -> float:
    """``sum_{Q in S} |Q| <|f1|>_Q <|f2|>_Q <|f3|>_Q``."""
    if not S.cubes:
        return 0.0
    a = [f.abs() for f in (f1, f2, f3)]
    total = 0.0
    by_side: dict[int, list] = {}
    for Q in S.cubes:
        if Q.L != f1.L:
            raise LevelError("sparse cubes and functions live on different meshes")
        by_side.setdefault(Q.side, []).append(Q.corner)
    for side, corners in sorted(by_side.items()):
        c = np.asarray(corners, dtype=np.int64)
        vol = (side * 2.0 ** (-f1.L)) ** f1.n
        prod = np.ones(len(c))
        for u in a:
            prod *= u.cube_averages(c, side)
        total += float(vol * prod.sum())
    return total


# ---------------------------------------------------------------------- stopping time
def _top_cube(grid: DyadicGrid, *fs: MeshFunction) -> DyadicCube:
    boxes = [f.support_box() for f in fs if f.support_box() is not None]
    if not boxes:
        return grid.cube_containing((0,), grid.S)
    lo = min(int(b[0][0]) for b in boxes)
    hi = max(int(b[1][0]) for b in boxes)
    for k in range(grid.L, grid.S - 1, -1):
        Q = grid.cube_containing((lo,), k)
        if Q.corner[0] + Q.side >= hi:
            return Q
    raise ValueError("the supports do not lie in one top cube of the grid")


def _stopping_cubes(grid: DyadicGrid, absf: list, root: DyadicCube, C0: float) -> list:
    """Maximal cubes ``R`` strictly inside ``root`` with ``max_j <|f_j|>_R / <|f_j|>_root > C0``."""
    base = [float(u.cube_averages(np.array([root.corner]), root.side)[0]) for u in absf]
    out = []
    covered = np.zeros(1, dtype=bool)
    for lev in range(root.level + 1, grid.L + 1):
        side = grid.side(lev)
        n = root.side // side
        corners = root.corner[0] + side * np.arange(n)
        covered = np.repeat(covered, 2) if lev > root.level + 1 else np.zeros(n, dtype=bool)
        exceed = np.zeros(n, dtype=bool)
        for u, b in zip(absf, base):
            if b > 0:
                exceed |= u.cube_averages(corners[:, None], side) > C0 * b
        new = exceed & ~covered
        out.extend(DyadicCube(lev, (int(c),), grid.L) for c in corners[new])
        covered |= new
    return out


def build_sparse(f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, eta: float,
                 grid: DyadicGrid) -> SparseCollection:
    """Iterated stopping-time family of the three functions.

    Starting from the smallest grid cube containing all supports, the maximal
    subcubes on which some normalised average exceeds ``C0(eta)`` become the roots
    of the next generation.  Every stage records its stopping measure, which is at
    most ``(1 - eta) |root|``.
    """
    if grid.n != 1:
        raise ValueError("build_sparse works in dimension one")
    C0 = stopping_constant(eta)
    absf = [f.abs() for f in (f1, f2, f3)]
    Q0 = _top_cube(grid, f1, f2, f3)
    cubes = [Q0]
    stages = []
    queue = [Q0]
    generation = 0
    max_generations = grid.L - Q0.level + 1
    while queue:
        if generation > max_generations:
            raise RuntimeError("stopping time did not terminate")
        nxt = []
        for root in queue:
            stop = _stopping_cubes(grid, absf, root, C0)
            measure = sum(R.side for R in stop)
            stages.append({"generation": generation, "root": root.to_json(), "stopping": len(stop),
                           "measure_cells": measure, "root_cells": root.side,
                           "bound_ok": measure * 1.0 <= (1 - eta) * root.side})
            nxt.extend(stop)
        cubes.extend(nxt)
        queue = nxt
        generation += 1
    return SparseCollection(cubes, eta, grid, stages)


def cz_decompose(f: MeshFunction, stopping: list, Q0: DyadicCube):
    """Calderón–Zygmund split ``f = g + sum_Q b_Q`` with ``b_Q = (f - <f>_Q) 1_Q``."""
    lo0, hi0 = Q0.corner[0], Q0.corner[0] + Q0.side
    iv = sorted((Q.corner[0], Q.corner[0] + Q.side) for Q in stopping)
    for (a0, a1), (b0, b1) in zip(iv, iv[1:]):
        if b0 < a1:
            raise ValueError("stopping cubes overlap")
    for a0, a1 in iv:
        if a0 < lo0 or a1 > hi0:
            raise ValueError("stopping cube outside Q0")
    g = f.copy()
    bad = {}
    for Q in stopping:
        a0 = Q.corner[0] - f.origin[0]
        if a0 < 0 or a0 + Q.side > f.shape[0]:
            raise ValueError("stopping cube outside the function's box")
        sl = slice(a0, a0 + Q.side)
        avg = float(f.values[sl].mean())
        b = MeshFunction.zeros(f.L, f.origin, f.shape)
        b.values[sl] = f.values[sl] - avg
        g.values[sl] = avg
        bad[Q] = b
    return g, bad


# ---------------------------------------------------------------------- rho forms
@dataclass
class RhoForm:
    """``sum_Q iiint K_Q f1 f2 f3`` with ``K_Q`` constant on level-``(Q + rho + 1)`` cell triples.

    ``tables[r]`` has shape ``(m, m, m)`` with ``m = 2^(rho + 1)`` and holds the kernel
    values of cube ``r``.  The size condition ``|K_Q| <= |Q|^-2`` is validated.
    """

    grid: DyadicGrid
    rho: int
    q_level: np.ndarray
    q_corner: np.ndarray
    tables: np.ndarray
    bound_B: float = 1.0
    exponents: tuple = (4.0, 4.0, 2.0)
    validate: bool = True

    def __post_init__(self):
        self.q_level = np.asarray(self.q_level, dtype=np.int64).ravel()
        self.q_corner = np.asarray(self.q_corner, dtype=np.int64).ravel()
        m = 1 << (self.rho + 1)
        self.tables = np.asarray(self.tables, dtype=float).reshape(len(self.q_level), m, m, m)
        if np.any(self.q_level > self.grid.L):
            raise LevelError("cube level finer than the mesh")
        if self.validate and len(self.q_level):
            vol = 2.0 ** (-self.q_level.astype(float))
            sup = np.abs(self.tables).reshape(len(vol), -1).max(axis=1)
            if np.any(sup > vol ** -2 * (1 + 1e-12)):
                raise ValueError("kernel exceeds the size bound |Q|^-2")

    def __len__(self):
        return len(self.q_level)


def _cell_integrals(f: MeshFunction, corners: np.ndarray, side: int, m: int) -> np.ndarray:
    if side < m:
        # kernel cells finer than the mesh: f is constant on each mesh cell
        split = m // side
        return np.repeat(_cell_integrals(f, corners, side, side), split, axis=1) / split
    sub = side // m
    c = (corners[:, None] + sub * np.arange(m)[None, :]).ravel()
    return f.cube_integrals(c[:, None], sub).reshape(len(corners), m)


def rho_form_eval(F: RhoForm, f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, subfamily=None) -> float:
    sel = np.ones(len(F), dtype=bool) if subfamily is None else np.asarray(subfamily)
    if sel.dtype != bool:
        mask = np.zeros(len(F), dtype=bool)
        mask[sel] = True
        sel = mask
    m = 1 << (F.rho + 1)
    total = 0.0
    for lev in np.unique(F.q_level[sel]):
        t = sel & (F.q_level == lev)
        side = F.grid.side(int(lev))
        a, b, c = (_cell_integrals(u, F.q_corner[t], side, m) for u in (f1, f2, f3))
        total += float(np.einsum("nabc,na,nb,nc->", F.tables[t], a, b, c))
    return total


def _slot_values(corner_q, side_q, m, cube_corner, cube_side, kind, h):
    """Values of a Haar (``h``) or normalised indicator (``h0``) function on the m cells of Q."""
    cells = corner_q + side_q * np.arange(m) / m
    inside = (cells >= cube_corner) & (cells < cube_corner + cube_side)
    amp = 1.0 / math.sqrt(cube_side * h)
    if kind == "h0":
        return inside * amp
    left = cells < cube_corner + cube_side // 2
    return inside * np.where(left, amp, -amp)


def shift_adapter(S: ShiftSpec, bound_B: float = 1.0) -> RhoForm:
    """The shift as a form with ``rho = max(i, j, k)``: each Haar function is constant on
    the level-``(Q + rho + 1)`` cells of ``Q`` (which may be finer than the mesh)."""
    grid = S.grid
    rho = max(S.levels)
    m = 1 << (rho + 1)
    h = 2.0 ** (-grid.L)
    keys = {}
    tabs = []
    for r in range(len(S)):
        ql = int(S.q_level[r])
        qc = int(S.q_corner[r, 0])
        key = (ql, qc)
        if key not in keys:
            keys[key] = len(tabs)
            tabs.append(np.zeros((m, m, m)))
        side_q = grid.side(ql)
        vs = [_slot_values(qc, side_q, m, int(S.corners[s][r, 0]), grid.side(ql + S.levels[s]), S.kinds[s], h)
              for s in range(3)]
        tabs[keys[key]] += S.coeffs[r] * np.einsum("a,b,c->abc", *vs)
    ql = np.array([k[0] for k in keys], dtype=np.int64)
    qc = np.array([k[1] for k in keys], dtype=np.int64)
    return RhoForm(grid, rho, ql, qc, np.array(tabs) if tabs else np.zeros((0, m, m, m)), bound_B)


def random_rho_form(grid: DyadicGrid, rho: int, rng, q_levels=None, density: float = 1.0) -> RhoForm:
    """Random kernels with ``|K_Q| <= |Q|^-2`` on the cubes of ``[0, 1)``."""
    if q_levels is None:
        q_levels = range(max(grid.S, 0), grid.L - rho)
    m = 1 << (rho + 1)
    ql, qc, tabs = [], [], []
    for lev in q_levels:
        for Q in grid.cubes_meeting(lev, (0,), (1 << grid.L,)):
            if rng.random() > density:
                continue
            ql.append(lev)
            qc.append(Q.corner[0])
            tabs.append(rng.uniform(-1, 1, (m, m, m)) * 2.0 ** (2 * lev))
    return RhoForm(grid, rho, np.array(ql), np.array(qc), np.array(tabs).reshape(len(ql), m, m, m))


@dataclass
class DominationReport:
    form: float
    sparse: float
    bound_B: float
    rho: int
    ratio: float
    cubes: int


def sparse_dominate(F: RhoForm, f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, eta: float):
    """Build the stopping family and return it with ``|form| / ((B + rho + 1) Lambda_S)``."""
    S = build_sparse(f1, f2, f3, eta, F.grid)
    val = rho_form_eval(F, f1, f2, f3)
    lam = lambda_form(S, f1, f2, f3)
    if lam == 0:
        ratio = 0.0 if val == 0 else math.inf
    else:
        ratio = abs(val) / ((F.bound_B + F.rho + 1) * lam)
    return S, DominationReport(val, lam, F.bound_B, F.rho, ratio, len(S))


# ---------------------------------------------------------------------- decomposition checks
def _good_family(F: RhoForm, stopping: list, Q0: DyadicCube) -> np.ndarray:
    """Cubes of the form inside ``Q0`` and not inside any stopping cube."""
    side = np.left_shift(1, F.grid.L - F.q_level)
    lo, hi = F.q_corner, F.q_corner + side
    inside = (lo >= Q0.corner[0]) & (hi <= Q0.corner[0] + Q0.side)
    for E in stopping:
        e0, e1 = E.corner[0], E.corner[0] + E.side
        inside &= ~((lo >= e0) & (hi <= e1))
    return inside


def mixed_terms(F: RhoForm, f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, stopping: list,
                Q0: DyadicCube) -> dict:
    """The seven terms of the good-family form with at least one bad function.

    Returns the terms keyed by pattern (``"bgg"`` = bad first slot) and the scale
    ``sum_Q iiint |K_Q| |f1| |f2| |f3|`` against which rounding should be judged.
    """
    parts = []
    for f in (f1, f2, f3):
        g, bad = cz_decompose(f, stopping, Q0)
        b = MeshFunction.zeros(f.L, f.origin, f.shape)
        for v in bad.values():
            b = b + v
        parts.append((g, b))
    fam = _good_family(F, stopping, Q0)
    out = {}
    for code in range(1, 8):
        args = [parts[j][(code >> j) & 1] for j in range(3)]
        label = "".join("b" if (code >> j) & 1 else "g" for j in range(3))
        out[label] = rho_form_eval(F, *args, subfamily=fam)
    absF = RhoForm(F.grid, F.rho, F.q_level, F.q_corner, np.abs(F.tables), F.bound_B, validate=False)
    scale = rho_form_eval(absF, f1.abs(), f2.abs(), f3.abs(), subfamily=fam)
    return {"terms": out, "scale": scale}


def single_parent_check(F: RhoForm, f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, stopping: list,
                        Q0: DyadicCube, tol: float = 1e-10) -> dict:
    """For every residue class of levels mod rho and every stopping cube ``Q``, count the cubes
    ``R`` of the class with ``Q`` strictly inside ``R`` and ``S_R(b_Q, h2, h3) != 0``.

    A value counts as nonzero when it exceeds ``tol`` times the same form evaluated
    with absolute values everywhere (cancellation in ``int b_Q = 0`` leaves rounding only).
    """
    if F.rho < 1:
        raise ValueError("the single-parent property concerns rho >= 1")
    fam = _good_family(F, stopping, Q0)
    _, bad = cz_decompose(f1, stopping, Q0)
    absF = RhoForm(F.grid, F.rho, F.q_level, F.q_corner, np.abs(F.tables), F.bound_B, validate=False)
    side = np.left_shift(1, F.grid.L - F.q_level)
    worst = 0
    for cls in range(F.rho):
        in_cls = fam & (np.mod(F.q_level, F.rho) == cls)
        for Q, bQ in bad.items():
            q0, q1 = Q.corner[0], Q.corner[0] + Q.side
            cand = np.flatnonzero(in_cls & (F.q_corner <= q0) & (F.q_corner + side >= q1) & (F.q_level < Q.level))
            count = 0
            for r in cand:
                mask = np.zeros(len(F), dtype=bool)
                mask[r] = True
                val = rho_form_eval(F, bQ, f2, f3, subfamily=mask)
                bound = rho_form_eval(absF, bQ.abs(), f2.abs(), f3.abs(), subfamily=mask)
                if bound > 0 and abs(val) > tol * bound:
                    count += 1
            worst = max(worst, count)
    return {"max_parents": worst, "ok": worst <= 1}


# ---------------------------------------------------------------------- universal family
def _maximal_above(grid: DyadicGrid, absf: list, root: DyadicCube, threshold: float) -> list:
    """Maximal cubes strictly inside ``root`` with ``prod_j <|f_j|>_R > threshold``."""
    out = []
    covered = np.zeros(2, dtype=bool)
    for lev in range(root.level + 1, grid.L + 1):
        side = grid.side(lev)
        n = root.side // side
        corners = root.corner[0] + side * np.arange(n)
        if lev > root.level + 1:
            covered = np.repeat(covered, 2)
        p = np.ones(n)
        for u in absf:
            p *= u.cube_averages(corners[:, None], side)
        new = (p > threshold) & ~covered
        out.extend(DyadicCube(lev, (int(c),), grid.L) for c in corners[new])
        covered |= new
    return out


def universal_sparse(f1: MeshFunction, f2: MeshFunction, f3: MeshFunction, eta2: float,
                     grid: DyadicGrid) -> SparseCollection:
    """Layers ``U_k`` of maximal cubes with ``prod_j <|f_j|>_Q > b C^k``, ``C = C(eta2)``.

    The data live in one top cube ``Q0``.  Its parent in an unbounded grid would have
    product ``p(Q0) / 8^n``, so the thresholds are based at ``b = p(Q0) / 8^n``: then
    ``Q0`` forms ``U_0`` and every layer satisfies the parent bound the sparseness
    argument relies on.  Rescaling the thresholds is the same as rescaling ``f1``.
    """
    if grid.n != 1:
        raise ValueError("universal_sparse works in dimension one")
    C = universal_constant(eta2, grid.n)
    absf = [f.abs() for f in (f1, f2, f3)]
    Q0 = _top_cube(grid, f1, f2, f3)
    p0 = 1.0
    for u in absf:
        p0 *= u.average(Q0)
    if p0 == 0:
        return SparseCollection([], eta2, grid)
    base = p0 / 8.0 ** grid.n
    layers = {0: [Q0]}
    k = 0
    while layers[k]:
        nxt = []
        for Q in layers[k]:
            nxt.extend(_maximal_above(grid, absf, Q, base * float(C) ** (k + 1)))
        k += 1
        layers[k] = nxt
    layers.pop(k)
    cubes = [Q for v in layers.values() for Q in v]
    return SparseCollection(cubes, eta2, grid, layers=layers)


def layer_multiplicity(U: SparseCollection) -> int:
    """Largest number of layers any single cube belongs to (the construction gives 1)."""
    count: dict = {}
    for cubes in U.layers.values():
        for Q in cubes:
            count[(Q.level, Q.corner)] = count.get((Q.level, Q.corner), 0) + 1
    return max(count.values()) if count else 0


def universal_dominates(S: SparseCollection, U: SparseCollection, f1, f2, f3) -> dict:
    lam_s = lambda_form(S, f1, f2, f3)
    lam_u = lambda_form(U, f1, f2, f3)
    if lam_u == 0:
        return {"ratio": 0.0 if lam_s == 0 else math.inf, "violation": lam_s > 0, "lambda_S": lam_s, "lambda_U": 0.0}
    return {"ratio": lam_s / lam_u, "violation": False, "lambda_S": lam_s, "lambda_U": lam_u}


def random_sparse_family(grid: DyadicGrid, eta: float, rng, max_depth: int | None = None) -> SparseCollection:
    """Random nested family: each cube picks random disjoint subcubes covering at most ``(1 - eta)`` of it."""
    top = grid.cubes_meeting(grid.S, (0,), (1 << grid.L,))
    cubes = []
    queue = [Q for Q in top if rng.random() < 0.9] or top[:1]
    while queue:
        Q = queue.pop()
        cubes.append(Q)
        if Q.level >= grid.L or (max_depth is not None and Q.level - grid.S >= max_depth):
            continue
        budget = int((1 - eta) * Q.side)
        used = 0
        for _ in range(int(rng.integers(0, 5))):
            lev = int(rng.integers(Q.level + 1, grid.L + 1))
            side = grid.side(lev)
            if used + side > budget:
                continue
            corner = Q.corner[0] + side * int(rng.integers(0, Q.side // side))
            R = DyadicCube(lev, (corner,), grid.L)
            if any(_overlap(R, P) for P in queue if _inside(P, Q)) or any(_overlap(R, P) for P in cubes if _inside(P, Q) and P != Q):
                continue
            used += side
            queue.append(R)
    return SparseCollection(cubes, eta, grid)


def _inside(P: DyadicCube, Q: DyadicCube) -> bool:
    return Q.corner[0] <= P.corner[0] and P.corner[0] + P.side <= Q.corner[0] + Q.side and P != Q


def _overlap(A: DyadicCube, B: DyadicCube) -> bool:
    return A.corner[0] < B.corner[0] + B.side and B.corner[0] < A.corner[0] + A.side


# ---------------------------------------------------------------------- one-third trick
@dataclass(frozen=True)
class ThirdGrid:
    """Grid ``{2^-k ([0, 1) + m + (-1)^k t / 3)}`` in units ``1 / (3 * 2^M)``."""

    t: int
    M: int

    def side(self, k: int) -> int:
        return 3 << (self.M - k)

    def offset(self, k: int) -> int:
        return (-1) ** (k % 2) * self.t * (1 << (self.M - k))

    def cube_containing(self, a, k: int):
        side, off = self.side(k), self.offset(k)
        m = np.floor_divide(np.asarray(a) - off, side)
        return m * side + off, side


def threegrid_family(M: int, n: int = 1) -> list[ThirdGrid]:
    if n != 1:
        raise ValueError("the one-third grids are implemented in dimension one")
    return [ThirdGrid(t, M) for t in range(3 ** n)]


def threegrid_cover(lo, length, M: int, kmin: int | None = None):
    """Smallest cube of the three shifted grids containing ``[lo, lo + length)`` (units ``1/(3 2^M)``).

    Vectorised over arrays; returns ``(grid index, corner, side)`` with ``side = -1``
    where no cube was found.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
    length = np.atleast_1d(np.asarray(length, dtype=np.int64))
    if np.any(length <= 0):
        raise ValueError("cube lengths must be positive")
    hi = lo + length
    best_side = np.full(lo.shape, -1, dtype=np.int64)
    best_corner = np.zeros(lo.shape, dtype=np.int64)
    best_grid = np.full(lo.shape, -1, dtype=np.int64)
    grids = threegrid_family(M)
    kmin = -8 if kmin is None else kmin
    for k in range(M, kmin - 1, -1):
        todo = best_side < 0
        if not todo.any():
            break
        for gi, G in enumerate(grids):
            corner, side = G.cube_containing(lo, k)
            ok = todo & (hi <= corner + side) & (best_side < 0)
            best_side[ok] = side
            best_corner[ok] = corner[ok]
            best_grid[ok] = gi
    return best_grid, best_corner, best_side


# ---------------------------------------------------------------------- end to end
def corollary_constant(K: BilinearKernel, eps_ladder, L: int, quad: QuadratureSpec = QuadratureSpec(),
                       bmo_levels=(3,), samples: int = 100_000) -> dict:
    """``C_est = ||K||_CZ + BMO(T) + BMO(T^1*) + BMO(T^2*) + WBP`` from sweeps over the eps ladder."""
    if K.is_zero:
        return {"cz": 0.0, "bmo": [0.0, 0.0, 0.0], "wbp": 0.0, "C_est": 0.0}
    cz = measure_constants(K, samples=samples)["cz_norm"]
    wbp = 0.0
    bmo = [0.0, 0.0, 0.0]
    cubes = [DyadicCube(k, (0,), L) for k in range(0, L + 1)]
    for eps in eps_ladder:
        tr = TruncationSpec("sharp", float(eps))
        wbp = max(wbp, wbp_constant(K, tr, cubes, quad))
        for lev in bmo_levels:
            side = 1 << (L - lev)
            ell = side * 2.0 ** -L
            C = max(3, int(math.ceil(2 * eps / ell)) + 2)
            if ((C - 1) * side) % 2:
                C += 1
            v = np.r_[np.ones(side // 2), -np.ones(side // 2)]
            phi = MeshFunction(v, L, (side,))
            R = DyadicCube(lev, (side,), L)
            vals = [bmo_pairing(K, tr, phi, R, C=C, quad=quad)["value"],
                    bmo_adjoint_pairing(K, tr, 1, phi, R, C=C, quad=quad)["value"],
                    bmo_adjoint_pairing(K, tr, 2, phi, R, C=C, quad=quad)["value"]]
            for j, v_ in enumerate(vals):
                bmo[j] = max(bmo[j], abs(v_) / ell)
    return {"cz": float(cz), "bmo": bmo, "wbp": wbp, "C_est": float(cz + sum(bmo) + wbp)}


def default_eps_ladder(points: int = 8, base: float = 2.0 ** -5) -> list[float]:
    return [base * 2.0 ** (j / 2) for j in range(points)]


def corollary_check(K: BilinearKernel, eps_ladder, f: MeshFunction, g: MeshFunction, h: MeshFunction,
                    eta: float, grid: DyadicGrid | None = None, constant: dict | None = None,
                    quad: QuadratureSpec = QuadratureSpec()) -> dict:
    """``sup_eps |<T_eps(f, g), h>|`` against ``C_est Lambda_S`` for one stopping family ``S``."""
    if grid is None:
        grid = DyadicGrid(1, f.L, 0)
    if constant is None:
        constant = corollary_constant(K, eps_ladder, f.L, quad)
    S = build_sparse(f, g, h, eta, grid)
    lam = lambda_form(S, f, g, h)
    vals = [trilinear_pairing(K, TruncationSpec("sharp", float(e)), f, g, h, quad) for e in eps_ladder]
    sup = max(abs(v) for v in vals) if vals else 0.0
    denom = constant["C_est"] * lam
    ratio = 0.0 if sup == 0 else (sup / denom if denom > 0 else math.inf)
    return {"sup": sup, "values": vals, "lambda": lam, "C_est": constant["C_est"], "ratio": ratio,
            "cubes": len(S), "sparse_ok": bool(verify_sparse(S))}
