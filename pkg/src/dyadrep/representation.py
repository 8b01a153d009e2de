"""Martingale decomposition of ``<T(f, g), h>`` and extraction of its dyadic representation.

Everything here works on one fixed (translated) grid in dimension one.  The
functions are viewed on the union ``D`` of the top cubes of the grid that meet
their supports, and the constant function ``1`` of the continuous theory is
realised as ``1_D``.  Pairings of indicator boxes come from the box sums of a
:class:`~dyadrep.kernels.PairingTable`, so every coefficient is a finite sum of
the same cell integrals that the dense pairing uses.

The three sums are processed by one code path.  For sum ``s`` the trilinear form
is rewritten as ``P'(A, B, C)`` where ``C`` carries the smallest scale:

* ``s = 1``: ``P' = <T(A, B), C>`` with ``(A, B, C) = (f, g, h)``,
* ``s = 2``: ``P' = <T^{1*}(A, B), C>`` with ``(A, B, C) = (h, g, f)``,
* ``s = 3``: ``P' = <T^{2*}(A, B), C>`` with ``(A, B, C) = (f, h, g)``,

and the sum reads ``sum_k P'(E_{k+1-l1} A, E_{k+1-l2} B, D_k C)`` with lags
``(l1, l2) = (0, 0), (1, 0), (1, 1)``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .grid import DyadicCube, DyadicGrid, GoodnessParams, exact_pi_good, good_mask, sample_grid
from .kernels import (BilinearKernel, QuadratureSpec, TruncationSpec, bmo_pairing, measure_constants,
                      pairing_table, trilinear_pairing, wbp_constant, _table_range)
from .mesh import MeshFunction
from .models import ParaproductSpec, ShiftSpec, paraproduct_form, shift_adjoint, shift_form

log = logging.getLogger(__name__)

# sum index -> (lag of A, lag of B, roles of (A, B, C))
SUMS = {1: (0, 0, ("f", "g", "h")), 2: (1, 0, ("h", "g", "f")), 3: (1, 1, ("f", "h", "g"))}
BUCKETS = ("separated", "diagonal", "nested")
SAFETY = 2.0


class DecompositionError(RuntimeError):
    pass


# ---------------------------------------------------------------------- common setup
@dataclass
class _Setup:
    grid: DyadicGrid
    origin: int
    size: int
    funcs: dict
    table: object
    h: float

    def proj(self, name: str, k: int) -> MeshFunction:
        key = (name, k)
        if key not in self.funcs:
            base = self.funcs[name]
            self.funcs[key] = base if k >= self.grid.L else base.project(self.grid, k)
        return self.funcs[key]

    def level_corners(self, k: int) -> np.ndarray:
        side = self.grid.side(k)
        return self.origin + side * np.arange(self.size // side, dtype=np.int64)


def _setup(K: BilinearKernel, trunc: TruncationSpec, grid: DyadicGrid, f, g, h, quad) -> _Setup:
    if grid.n != 1:
        raise ValueError("the representation engine works in dimension one")
    boxes = [u.support_box() for u in (f, g, h)]
    boxes = [b for b in boxes if b is not None]
    if boxes:
        lo = min(int(b[0][0]) for b in boxes)
        hi = max(int(b[1][0]) for b in boxes)
    else:
        lo, hi = 0, 1 << grid.L
    (origin,), (size,) = grid.domain((lo,), (hi,))
    funcs = {}
    for name, u in (("f", f), ("g", g), ("h", h)):
        if u.L != grid.L:
            raise ValueError("functions and grid live on different meshes")
        funcs[name] = u.embed((origin,), (size,))
    tab = pairing_table(K, trunc, grid.L, _table_range(size + 1), quad)
    return _Setup(grid, origin, size, funcs, tab, 2.0 ** (-grid.L))


def _pair(setup: _Setup, s: int, a: MeshFunction, b: MeshFunction, c: MeshFunction) -> float:
    tab = setup.table
    if s == 1:
        return tab.pairing(a, b, c)
    if s == 2:
        return tab.pairing(c, b, a)
    return tab.pairing(a, c, b)


def _boxp(setup: _Setup, s: int, c0, c1, a0, a1, b0, b1) -> np.ndarray:
    """``<T'(1_a, 1_b), 1_c>`` for the form of sum ``s``."""
    box3 = setup.table.box3
    if s == 1:
        return box3(c0, c1, a0, a1, b0, b1)
    if s == 2:
        return box3(a0, a1, c0, c1, b0, b1)
    return box3(b0, b1, a0, a1, c0, c1)


def _good_cells(setup: _Setup, params: GoodnessParams, k: int, corners: np.ndarray) -> np.ndarray:
    """Goodness of the level-k cubes with the given corners."""
    return good_mask(setup.grid, params, k, corners[:, None])


def _masked_difference(setup: _Setup, name: str, k: int, keep: np.ndarray | None) -> MeshFunction:
    """``sum over kept level-k cubes K of Delta_K`` applied to function ``name``."""
    d = setup.proj(name, k + 1) - setup.proj(name, k)
    if keep is None:
        return d
    side = setup.grid.side(k)
    return MeshFunction(d.values * np.repeat(keep, side), d.L, d.origin)


# ---------------------------------------------------------------------- decomposition
@dataclass
class DecompositionReport:
    sigma1: float
    sigma2: float
    sigma3: float
    remainder: float
    total: float
    reference: float
    per_scale: list = field(default_factory=list)

    @property
    def abs_error(self) -> float:
        return abs(self.total - self.reference)

    @property
    def rel_error(self) -> float:
        return self.abs_error / max(abs(self.reference), 1e-300)

    def to_json(self) -> dict:
        return {"sigma1": self.sigma1, "sigma2": self.sigma2, "sigma3": self.sigma3,
                "remainder": self.remainder, "total": self.total, "reference": self.reference,
                "rel_error": self.rel_error, "per_scale": self.per_scale}

    def csv_rows(self) -> list[list]:
        rows = [["part", "level", "value"]]
        for r in self.per_scale:
            rows.append([r["sum"], r["level"], repr(r["value"])])
        rows.append(["remainder", "", repr(self.remainder)])
        rows.append(["total", "", repr(self.total)])
        rows.append(["reference", "", repr(self.reference)])
        return rows


def _sum_levels(setup: _Setup, s: int, params: GoodnessParams | None) -> list[float]:
    """Per-level values of sum ``s``; with ``params`` only good output cubes are kept."""
    l1, l2, (a, b, c) = SUMS[s]
    g = setup.grid
    out = []
    for k in range(g.S, g.L):
        keep = None
        if params is not None:
            keep = _good_cells(setup, params, k, setup.level_corners(k))
            if not keep.any():
                out.append(0.0)
                continue
        dc = _masked_difference(setup, c, k, keep)
        out.append(_pair(setup, s, setup.proj(a, k + 1 - l1), setup.proj(b, k + 1 - l2), dc))
    return out


def martingale_split(K: BilinearKernel, trunc: TruncationSpec, grid: DyadicGrid, f: MeshFunction,
                     g: MeshFunction, h: MeshFunction, quad: QuadratureSpec = QuadratureSpec(),
                     tol: float = 1e-9, check: bool = True) -> DecompositionReport:
    """Split ``<T(f, g), h>`` into the three martingale sums and the coarse remainder.

    Telescoping ``E_{k+1} f x E_{k+1} g x E_{k+1} h - E_k f x E_k g x E_k h`` over the
    levels gives ``sum_k [P(E_{k+1}f, E_{k+1}g, D_k h) + P(D_k f, E_{k+1}g, E_k h)
    + P(E_k f, D_k g, E_k h)]``; the remainder is ``P(E_S f, E_S g, E_S h)``.
    """
    setup = _setup(K, trunc, grid, f, g, h, quad)
    parts = {s: _sum_levels(setup, s, None) for s in (1, 2, 3)}
    S = grid.S
    remainder = setup.table.pairing(setup.proj("f", S), setup.proj("g", S), setup.proj("h", S))
    reference = setup.table.pairing(setup.funcs["f"], setup.funcs["g"], setup.funcs["h"])
    sig = {s: float(np.sum(v)) for s, v in parts.items()}
    total = sig[1] + sig[2] + sig[3] + remainder
    per_scale = [{"sum": f"sigma{s}", "level": S + i, "value": v}
                 for s in (1, 2, 3) for i, v in enumerate(parts[s])]
    rep = DecompositionReport(sig[1], sig[2], sig[3], remainder, total, reference, per_scale)
    if check and rep.abs_error > tol * max(abs(reference), 1e-300):
        lines = "; ".join(f"{r['sum']}@{r['level']}={r['value']:.3e}" for r in per_scale)
        raise DecompositionError(f"decomposition misses the pairing by {rep.rel_error:.3e} (relative): {lines}")
    return rep


# ---------------------------------------------------------------------- classification
@dataclass(frozen=True)
class TripleBucket:
    """Bucket of a triple; nested triples split further into an error and a paraproduct part."""

    tag: str
    witness: DyadicCube | None = None

    @property
    def parts(self) -> tuple[str, ...]:
        return ("error", "paraproduct") if self.tag == "nested" else (self.tag,)


def _gap(a0, a1, b0, b1):
    """Distance in cells between the intervals ``[a0, a1)`` and ``[b0, b1)``."""
    return np.maximum(0, np.maximum(b0 - a1, a0 - b1))


def _classify(k, Kc, sK, Ic, sI, Jc, sJ, ell_ref_level, gamma, h, k_equal_i):
    """Vectorised bucket codes: 0 separated, 1 diagonal, 2 nested."""
    dKI = _gap(Kc, Kc + sK, Ic, Ic + sI)
    dKJ = _gap(Kc, Kc + sK, Jc, Jc + sJ)
    thr = (2.0 ** -k) ** gamma * (2.0 ** -ell_ref_level) ** (1 - gamma)
    sep = np.maximum(dKI, dKJ) * h > thr
    overlap_I = (Kc < Ic + sI) & (Ic < Kc + sK)
    overlap_J = (Kc < Jc + sJ) & (Jc < Kc + sK)
    diag = ~overlap_I | k_equal_i | ~overlap_J
    return np.where(sep, 0, np.where(diag, 1, 2)), np.maximum(dKI, dKJ)


def classify_triple(I: DyadicCube, J: DyadicCube, K: DyadicCube, grid: DyadicGrid,
                    params: GoodnessParams) -> TripleBucket:
    """Bucket of a triple with ``l(K) <= l(I) = 2 l(J)``."""
    for Q in (I, J, K):
        if not grid.contains_cube(Q):
            raise ValueError(f"{Q} is not a cube of the grid")
    if J.level != I.level + 1 or K.level < I.level:
        raise ValueError("need l(K) <= l(I) = 2 l(J)")
    code, _ = _classify(K.level, np.int64(K.corner[0]), K.side, np.int64(I.corner[0]), I.side,
                        np.int64(J.corner[0]), J.side, J.level, params.gamma, 2.0 ** -grid.L,
                        np.bool_(K == I))
    tag = BUCKETS[int(code)]
    witness = None
    if tag != "nested":
        try:
            witness = minimal_parent(I, J, K, grid)
        except LookupError:
            witness = None
    else:
        witness = I
    return TripleBucket(tag, witness)


def _minimal_parent_levels(grid: DyadicGrid, top_level, *corners) -> np.ndarray:
    """Level of the minimal common grid cube (vectorised); ``S - 1`` when none exists."""
    out = np.full(np.broadcast(*corners).shape, grid.S - 1, dtype=np.int64)
    todo = np.ones(out.shape, dtype=bool)
    for q in range(int(top_level), grid.S - 1, -1):
        idx = [np.reshape(grid.cube_index(c, q), out.shape) for c in corners]
        same = np.ones(out.shape, dtype=bool)
        for a in idx[1:]:
            same &= a == idx[0]
        hit = todo & same
        out[hit] = q
        todo &= ~hit
        if not todo.any():
            break
    return out


def minimal_parent(I: DyadicCube, J: DyadicCube, K: DyadicCube, grid: DyadicGrid) -> DyadicCube:
    """The smallest grid cube containing ``I``, ``J`` and ``K``."""
    top = min(I.level, J.level, K.level)
    q = int(_minimal_parent_levels(grid, top, np.int64(I.corner[0]), np.int64(J.corner[0]),
                                   np.int64(K.corner[0])))
    if q < grid.S:
        raise LookupError("the cubes have no common ancestor within the scale range")
    return grid.cube_containing(K.corner, q)


def parent_separation_constant(I: DyadicCube, J: DyadicCube, K: DyadicCube, grid: DyadicGrid,
                               params: GoodnessParams) -> float:
    """``max(d(K, I), d(K, J)) / (l(K)^gamma l(Q)^(1-gamma))`` for the minimal parent ``Q``."""
    Q = minimal_parent(I, J, K, grid)
    h = 2.0 ** -grid.L
    d = max(_gap(K.corner[0], K.corner[0] + K.side, I.corner[0], I.corner[0] + I.side),
            _gap(K.corner[0], K.corner[0] + K.side, J.corner[0], J.corner[0] + J.side)) * h
    return float(d / (K.sidelength ** params.gamma * Q.sidelength ** (1 - params.gamma)))


def key_cancellation(f: MeshFunction, g: MeshFunction, grid: DyadicGrid, J: DyadicCube) -> tuple[float, float]:
    """Both sides of ``<D f>_J <g>_J + <f>_P <D g>_J = <f>_J <g>_J - <f>_P <g>_P`` with ``P`` the parent of J."""
    P = grid.ancestor(J, 1)
    fJ, gJ, fP, gP = f.average(J), g.average(J), f.average(P), g.average(P)
    lhs = (fJ - fP) * gJ + fP * (gJ - gP)
    rhs = fJ * gJ - fP * gP
    return lhs, rhs


# ---------------------------------------------------------------------- kernel constants
@dataclass
class RepresentationConstants:
    cz: float
    wbp: float
    bmo: float
    safety: float = SAFETY

    @property
    def separated(self) -> float:
        return self.safety * self.cz

    @property
    def diagonal(self) -> float:
        return self.safety * (self.cz + self.wbp)

    @property
    def error(self) -> float:
        return self.safety * self.cz

    @property
    def paraproduct(self) -> float:
        return self.safety * (self.cz + self.bmo)

    def divisor(self, bucket: str) -> float:
        return {"separated": self.separated, "diagonal": self.diagonal, "nested": self.error,
                "error": self.error, "paraproduct": self.paraproduct}[bucket]

    def to_json(self) -> dict:
        return {"cz": self.cz, "wbp": self.wbp, "bmo": self.bmo, "safety": self.safety,
                "divisors": {b: self.divisor(b) for b in ("separated", "diagonal", "error", "paraproduct")}}


def bmo_estimate(K: BilinearKernel, trunc: TruncationSpec, L: int, levels=(2, 3), C: int = 3,
                 quad: QuadratureSpec = QuadratureSpec()) -> float:
    """Largest ``|<T(1, 1), a>|`` over normalised Haar atoms ``a = h_R / |R|^(1/2)`` in a small sweep.

    An atom has ``||a||_inf <= 1 / |R|`` and zero mean, so this is a lower estimate
    of the BMO norm of ``T(1, 1)`` up to the atomic normalisation.
    """
    if K.is_zero:
        return 0.0
    best = 0.0
    eps = trunc.eps if trunc.eps2 is None else trunc.eps2
    for lev in levels:
        side = 1 << (L - lev)
        ell = side * 2.0 ** -L
        c = max(C, int(np.ceil(2 * eps / ell)) + 2)
        if ((c - 1) * side) % 2:
            c += 1
        for corner in (0, side):
            R = DyadicCube(lev, (corner,), L)
            v = np.zeros(side)
            v[: side // 2] = 1.0
            v[side // 2:] = -1.0
            atom = MeshFunction(v / (side * 2.0 ** -L), L, (corner,))
            res = bmo_pairing(K, trunc, atom, R, C=c, quad=quad)
            best = max(best, abs(res["value"]))
    return best


def representation_constants(K: BilinearKernel, trunc: TruncationSpec, grid: DyadicGrid,
                             quad: QuadratureSpec = QuadratureSpec(), samples: int = 100_000,
                             seed: int = 0, bmo: float | None = None) -> RepresentationConstants:
    """Measured kernel, weak boundedness and BMO constants of the truncated operator."""
    if K.is_zero:
        return RepresentationConstants(0.0, 0.0, 0.0)
    cz = measure_constants(K, samples=samples, seed=seed, trunc=trunc)["cz_norm"]
    cubes = [DyadicCube(k, (0,), grid.L) for k in range(max(grid.S, 0), grid.L + 1)]
    wbp = wbp_constant(K, trunc, cubes, quad)
    if bmo is None:
        bmo = bmo_estimate(K, trunc, grid.L, quad=quad)
    return RepresentationConstants(float(cz), float(wbp), float(bmo))


# ---------------------------------------------------------------------- extraction
def _haar_pieces(c, side, h):
    """Indicator pieces ``(lo, hi, weight)`` of the cancellative Haar function on ``[c, c + side)``."""
    w = 1.0 / np.sqrt(side * h)
    return [(c, c + side // 2, w), (c + side // 2, c + side, -w)]


def _avg_pieces(c, side, h):
    return [(c, c + side, 1.0 / np.sqrt(side * h))]


def _form(setup, s, A, B, C):
    """``<T'(sum of pieces A, sum of pieces B), sum of pieces C>``, vectorised over the triples."""
    total = 0.0
    for c0, c1, wc in C:
        for a0, a1, wa in A:
            for b0, b1, wb in B:
                total = total + wa * wb * wc * _boxp(setup, s, c0, c1, a0, a1, b0, b1)
    return total


@dataclass
class _Records:
    """Coefficient records of one group (sum, bucket, relative levels, kinds)."""

    q_level: list = field(default_factory=list)
    q_corner: list = field(default_factory=list)
    cubes: tuple = field(default_factory=lambda: ([], [], []))
    coeffs: list = field(default_factory=list)

    def add(self, q_level, q_corner, a, b, c, coeffs):
        self.q_level.append(q_level)
        self.q_corner.append(q_corner)
        for lst, v in zip(self.cubes, (a, b, c)):
            lst.append(v)
        self.coeffs.append(coeffs)

    def arrays(self):
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
        return (cat(self.q_level).astype(np.int64), cat(self.q_corner).astype(np.int64),
                tuple(cat(c).astype(np.int64) for c in self.cubes), cat(self.coeffs))


@dataclass
class ExtractedRepresentation:
    """Weighted shifts and paraproducts plus the residual of one fixed grid.

    ``shifts`` holds pairs ``(spec, weight)`` with every spec in ``(f, g, h)`` slot
    order; the weighted forms plus the paraproducts plus ``residual`` reproduce
    ``target`` (the good-restricted sums).
    """

    grid: DyadicGrid
    params: GoodnessParams
    constants: RepresentationConstants
    shifts: list
    paraproducts: list
    residual: float
    target: float
    target_by_sum: dict
    report: dict

    def evaluate(self, f: MeshFunction, g: MeshFunction, h: MeshFunction) -> float:
        total = self.residual
        for spec, w in self.shifts:
            total += w * shift_form(spec, f, g, h)
        for spec, w in self.paraproducts:
            total += w * paraproduct_form(spec, f, g, h)
        return total

    @property
    def coefficient_count(self) -> int:
        return int(sum(len(s) for s, _ in self.shifts) + sum(len(p) for p, _ in self.paraproducts))


def extract_representation(K: BilinearKernel, trunc: TruncationSpec, grid: DyadicGrid,
                           params: GoodnessParams, f: MeshFunction, g: MeshFunction, h: MeshFunction,
                           quad: QuadratureSpec = QuadratureSpec(),
                           constants: RepresentationConstants | None = None,
                           strict: bool = True) -> ExtractedRepresentation:
    """Emit normalised shift and paraproduct coefficients for the good-restricted sums.

    With ``strict`` a coefficient exceeding its normalisation bound raises
    :class:`~dyadrep.models.NormalizationError`; otherwise the specs are built
    without the gate and the ratios are only reported.
    """
    setup = _setup(K, trunc, grid, f, g, h, quad)
    if constants is None:
        constants = representation_constants(K, trunc, grid, quad)
    h_mesh = setup.h
    alpha = params.alpha
    gamma = params.gamma
    S, L = grid.S, grid.L
    D0, D1 = setup.origin, setup.origin + setup.size

    counts = {s: {b: {"all": 0, "good": 0} for b in BUCKETS} for s in SUMS}
    total_triples = {s: 0 for s in SUMS}
    ratios = {b: [] for b in ("separated", "diagonal", "error")}
    worst = {b: None for b in ("separated", "diagonal", "error")}
    cmin = np.inf
    cap_violations = 0
    no_parent = 0
    residual = 0.0
    groups: dict[tuple, _Records] = {}
    para = {s: ([], [], []) for s in SUMS}
    target_by_sum = {}
    residual_by_sum = {}

    def bound(q_lev, lev_a, lev_b, lev_c):
        vol = lambda lev: 2.0 ** (-np.asarray(lev, dtype=float))
        return np.sqrt(vol(lev_a) * vol(lev_b) * vol(lev_c)) / vol(q_lev) ** 2

    def record_ratio(bucket, coef, q_lev, la, lb, lc, div, where):
        nonlocal worst
        if coef.size == 0:
            return
        scale = div * (2.0 ** (-(lc - q_lev).astype(float))) ** (alpha / 2) * bound(q_lev, la, lb, lc)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(scale > 0, np.abs(coef) / scale, np.where(np.abs(coef) > 0, np.inf, 0.0))
        ratios[bucket].append(r)
        i = int(np.argmax(r))
        if worst[bucket] is None or r[i] > worst[bucket]["ratio"]:
            worst[bucket] = {"ratio": float(r[i]), **{k: (int(v[i]) if np.ndim(v) else v) for k, v in where.items()}}

    for s, (l1, l2, (na, nb, nc)) in SUMS.items():
        A, B, C = setup.funcs[na], setup.funcs[nb], setup.funcs[nc]
        res_s = 0.0
        for k in range(S, L):
            sK = grid.side(k)
            Kc = setup.level_corners(k)
            goodK = _good_cells(setup, params, k, Kc)
            Cd = C.haar_coeffs(Kc[:, None], k, (1,))
            # ---- sigma^1-type: Haar of A at level m, average of B at level m + 1
            for m in range(S, k - l1 + 1):
                sI, sJ = grid.side(m), grid.side(m + 1)
                Ic, Jc = setup.level_corners(m), setup.level_corners(m + 1)
                Ad = A.haar_coeffs(Ic[:, None], m, (1,))
                Bd = B.haar_coeffs(Jc[:, None], m + 1, (0,))
                kk, ii, jj = np.meshgrid(np.arange(len(Kc)), np.arange(len(Ic)), np.arange(len(Jc)), indexing="ij")
                kk, ii, jj = kk.ravel(), ii.ravel(), jj.ravel()
                Kx, Ix, Jx = Kc[kk], Ic[ii], Jc[jj]
                code, dmax = _classify(k, Kx, sK, Ix, sI, Jx, sJ, m + 1, gamma, h_mesh, (k == m) & (Kx == Ix))
                total_triples[s] += code.size
                g_mask = goodK[kk]
                for b_i, b in enumerate(BUCKETS):
                    counts[s][b]["all"] += int(np.sum(code == b_i))
                    counts[s][b]["good"] += int(np.sum((code == b_i) & g_mask))
                data = Ad[ii] * Bd[jj] * Cd[kk]
                # separated and diagonal
                sel = g_mask & (code < 2)
                if sel.any():
                    Kx_, Ix_, Jx_, code_ = Kx[sel], Ix[sel], Jx[sel], code[sel]
                    coef = _form(setup, s, _haar_pieces(Ix_, sI, h_mesh), _avg_pieces(Jx_, sJ, h_mesh),
                                 _haar_pieces(Kx_, sK, h_mesh))
                    q = _minimal_parent_levels(grid, m, Ix_, Jx_, Kx_)
                    has_q = q >= S
                    no_parent += int(np.sum(~has_q & (data[sel] != 0)))
                    res_s += float(np.sum((coef * data[sel])[~has_q]))
                    diag_cap = (code_ == 1) & (k - m > params.r)
                    cap_violations += int(diag_cap.sum())
                    sep_q = (code_ == 0) & has_q
                    if sep_q.any():
                        qs = 2.0 ** -q[sep_q].astype(float)
                        c_here = dmax[sel][sep_q] * h_mesh / ((2.0 ** -k) ** gamma * qs ** (1 - gamma))
                        cmin = min(cmin, float(c_here.min()))
                    for b_i, b in ((0, "separated"), (1, "diagonal")):
                        t = has_q & (code_ == b_i)
                        if not t.any():
                            continue
                        div = constants.divisor(b)
                        ql = q[t]
                        record_ratio(b, coef[t], ql, np.full(ql.shape, m), np.full(ql.shape, m + 1),
                                     np.full(ql.shape, k), div,
                                     {"sum": s, "K_level": k, "K": Kx_[t], "I": Ix_[t], "J": Jx_[t], "Q_level": ql})
                        nz = data[sel][t] != 0
                        if nz.any() and div > 0:
                            for qlev in np.unique(ql[nz]):
                                u = nz & (ql == qlev)
                                key = (s, b, (m - qlev, m + 1 - qlev, k - qlev), ("h", "h0", "h"))
                                rec = groups.setdefault(key, _Records())
                                qc = grid.corner_of(grid.cube_index(Kx_[t][u], int(qlev)), int(qlev))
                                w = div * 2.0 ** (-alpha * (k - qlev) / 2)
                                rec.add(np.full(u.sum(), qlev), qc, Ix_[t][u], Jx_[t][u], Kx_[t][u], coef[t][u] / w)
                # nested: K inside J inside I, error part (Q = I)
                sel = g_mask & (code == 2)
                if sel.any():
                    Kx_, Ix_, Jx_ = Kx[sel], Ix[sel], Jx[sel]
                    cI = np.where(Jx_ == Ix_, 1.0, -1.0) / np.sqrt(sI * h_mesh)
                    sib = np.where(Jx_ == Ix_, Ix_ + sJ, Ix_)
                    s_J = [(sib, sib + sJ, -2 * cI), (np.full_like(Ix_, D0), Ix_, -cI), (Ix_ + sI, np.full_like(Ix_, D1), -cI)]
                    one_J = [(Jx_, Jx_ + sJ, 1.0)]
                    one_D = [(np.full_like(Ix_, D0), np.full_like(Ix_, D1), 1.0)]
                    comp_J = [(np.full_like(Ix_, D0), Jx_, 1.0), (Jx_ + sJ, np.full_like(Ix_, D1), 1.0)]
                    hK = _haar_pieces(Kx_, sK, h_mesh)
                    coef = (_form(setup, s, s_J, one_J, hK) - cI * _form(setup, s, one_D, comp_J, hK)) / np.sqrt(sJ * h_mesh)
                    ql = np.full(coef.shape, m)
                    div = constants.error
                    record_ratio("error", coef, ql, ql, ql + 1, np.full(ql.shape, k), div,
                                 {"sum": s, "K_level": k, "K": Kx_, "I": Ix_, "J": Jx_, "Q_level": ql})
                    nz = data[sel] != 0
                    if nz.any() and div > 0:
                        key = (s, "error", (0, 1, k - m), ("h", "h0", "h"))
                        w = div * 2.0 ** (-alpha * (k - m) / 2)
                        groups.setdefault(key, _Records()).add(ql[nz], Ix_[nz], Ix_[nz], Jx_[nz], Kx_[nz], coef[nz] / w)
            # ---- sigma^2-type: average of A and Haar of B on the same level m
            for m in range(S, k - l2 + 1):
                sm = grid.side(m)
                Mc = setup.level_corners(m)
                Ad0 = A.haar_coeffs(Mc[:, None], m, (0,))
                Bd = B.haar_coeffs(Mc[:, None], m, (1,))
                kk, aa, bb = np.meshgrid(np.arange(len(Kc)), np.arange(len(Mc)), np.arange(len(Mc)), indexing="ij")
                kk, aa, bb = kk.ravel(), aa.ravel(), bb.ravel()
                Kx, Ax, Bx = Kc[kk], Mc[aa], Mc[bb]
                code, dmax = _classify(k, Kx, sK, Bx, sm, Ax, sm, m, gamma, h_mesh, (k == m) & (Kx == Bx))
                total_triples[s] += code.size
                g_mask = goodK[kk]
                for b_i, b in enumerate(BUCKETS):
                    counts[s][b]["all"] += int(np.sum(code == b_i))
                    counts[s][b]["good"] += int(np.sum((code == b_i) & g_mask))
                data = Ad0[aa] * Bd[bb] * Cd[kk]
                sel = g_mask & (code < 2)
                if sel.any():
                    Kx_, Ax_, Bx_, code_ = Kx[sel], Ax[sel], Bx[sel], code[sel]
                    coef = _form(setup, s, _avg_pieces(Ax_, sm, h_mesh), _haar_pieces(Bx_, sm, h_mesh),
                                 _haar_pieces(Kx_, sK, h_mesh))
                    q = _minimal_parent_levels(grid, m, Ax_, Bx_, Kx_)
                    has_q = q >= S
                    no_parent += int(np.sum(~has_q & (data[sel] != 0)))
                    res_s += float(np.sum((coef * data[sel])[~has_q]))
                    cap_violations += int(np.sum((code_ == 1) & (k - m > params.r)))
                    sep_q = (code_ == 0) & has_q
                    if sep_q.any():
                        qs = 2.0 ** -q[sep_q].astype(float)
                        c_here = dmax[sel][sep_q] * h_mesh / ((2.0 ** -k) ** gamma * qs ** (1 - gamma))
                        cmin = min(cmin, float(c_here.min()))
                    for b_i, b in ((0, "separated"), (1, "diagonal")):
                        t = has_q & (code_ == b_i)
                        if not t.any():
                            continue
                        div = constants.divisor(b)
                        ql = q[t]
                        record_ratio(b, coef[t], ql, np.full(ql.shape, m), np.full(ql.shape, m),
                                     np.full(ql.shape, k), div,
                                     {"sum": s, "K_level": k, "K": Kx_[t], "I": Ax_[t], "J": Bx_[t], "Q_level": ql})
                        nz = data[sel][t] != 0
                        if nz.any() and div > 0:
                            for qlev in np.unique(ql[nz]):
                                u = nz & (ql == qlev)
                                key = (s, b, (m - qlev, m - qlev, k - qlev), ("h0", "h", "h"))
                                rec = groups.setdefault(key, _Records())
                                qc = grid.corner_of(grid.cube_index(Kx_[t][u], int(qlev)), int(qlev))
                                w = div * 2.0 ** (-alpha * (k - qlev) / 2)
                                rec.add(np.full(u.sum(), qlev), qc, Ax_[t][u], Bx_[t][u], Kx_[t][u], coef[t][u] / w)
                sel = g_mask & (code == 2)
                if sel.any():
                    Kx_, Bx_ = Kx[sel], Bx[sel]
                    half = sm // 2
                    left = Kx_ < Bx_ + half
                    c = np.where(left, 1.0, -1.0) / np.sqrt(sm * h_mesh)
                    sib = np.where(left, Bx_ + half, Bx_)
                    dlo, dhi = np.full_like(Bx_, D0), np.full_like(Bx_, D1)
                    s_p = [(sib, sib + half, -2 * c), (dlo, Bx_, -c), (Bx_ + sm, dhi, -c)]
                    one_B = [(Bx_, Bx_ + sm, 1.0)]
                    comp_B = [(dlo, Bx_, 1.0), (Bx_ + sm, dhi, 1.0)]
                    one_D = [(dlo, dhi, 1.0)]
                    hK = _haar_pieces(Kx_, sK, h_mesh)
                    coef = (_form(setup, s, one_B, s_p, hK) - c * _form(setup, s, comp_B, one_D, hK)) / np.sqrt(sm * h_mesh)
                    ql = np.full(coef.shape, m)
                    div = constants.error
                    record_ratio("error", coef, ql, ql, ql, np.full(ql.shape, k), div,
                                 {"sum": s, "K_level": k, "K": Kx_, "I": Bx_, "J": Bx_, "Q_level": ql})
                    nz = data[sel] != 0
                    if nz.any() and div > 0:
                        key = (s, "error", (0, 0, k - m), ("h0", "h", "h"))
                        w = div * 2.0 ** (-alpha * (k - m) / 2)
                        groups.setdefault(key, _Records()).add(ql[nz], Bx_[nz], Bx_[nz], Bx_[nz], Kx_[nz], coef[nz] / w)
            # ---- paraproduct: <T'(1, 1), h_K> <A>_K <B>_K, minus the top-cube term
            if goodK.any():
                Kg = Kc[goodK]
                dlo, dhi = np.full_like(Kg, D0), np.full_like(Kg, D1)
                pc = _form(setup, s, [(dlo, dhi, 1.0)], [(dlo, dhi, 1.0)], _haar_pieces(Kg, sK, h_mesh))
                para[s][0].append(np.full(Kg.shape, k))
                para[s][1].append(Kg)
                para[s][2].append(pc)
                top = grid.corner_of(grid.cube_index(Kg, S), S)
                sS = grid.side(S)
                avgA = A.cube_averages(top[:, None], sS)
                avgB = B.cube_averages(top[:, None], sS)
                res_s -= float(np.sum(pc * avgA * avgB * Cd[goodK]))
            # ---- top term E_S A x E_S B against the good part of D_k C
            if goodK.any():
                dc = _masked_difference(setup, nc, k, goodK)
                res_s += _pair(setup, s, setup.proj(na, S), setup.proj(nb, S), dc)
        residual_by_sum[s] = res_s
        residual += res_s
        target_by_sum[s] = float(np.sum(_sum_levels(setup, s, params)))

    # ---- build specs
    shifts = []
    worst_gate = 0.0
    for key in sorted(groups, key=lambda t: (t[0], t[1], t[2], t[3])):
        s, b, levels, kinds = key
        ql, qc, cubes, co = groups[key].arrays()
        spec = ShiftSpec(grid, levels, kinds, ql, qc[:, None], tuple(c[:, None] for c in cubes), co,
                         label=f"sum{s}-{b}-S^{{{levels[0]},{levels[1]},{levels[2]}}}", validate=False)
        spec.check_structure()
        if len(spec):
            worst_gate = max(worst_gate, float(spec.ratios().max()))
        if strict:
            spec.check_normalization()
        if s == 2:
            spec = shift_adjoint(spec, 1)
        elif s == 3:
            spec = shift_adjoint(spec, 2)
        k_rel = levels[2]
        shifts.append((spec, constants.divisor(b) * 2.0 ** (-alpha * k_rel / 2)))
    paraproducts = []
    carleson = {}
    for s, flavor in ((1, "direct"), (2, "adjoint-1"), (3, "adjoint-2")):
        lv, kc, pc = (np.concatenate(x) if x else np.zeros(0) for x in para[s])
        div = constants.paraproduct
        coeffs = pc / div if div > 0 else np.zeros_like(pc)
        if div == 0 and np.any(pc != 0):
            raise ValueError("nonzero paraproduct coefficients with a zero divisor")
        P = ParaproductSpec(grid, lv.astype(np.int64), kc.astype(np.int64)[:, None], coeffs, flavor,
                            validate=strict, label=f"sum{s}-paraproduct")
        carleson[flavor] = P.carleson_max
        paraproducts.append((P, div))

    all_r = {b: (np.concatenate(v) if v else np.zeros(0)) for b, v in ratios.items()}
    max_ratio = {b: float(v.max()) if v.size else 0.0 for b, v in all_r.items()}
    target = float(sum(target_by_sum.values()))
    report = {
        "triples": {str(s): total_triples[s] for s in SUMS},
        "buckets": {str(s): counts[s] for s in SUMS},
        "coefficients_checked": {b: int(v.size) for b, v in all_r.items()},
        "max_ratio": max_ratio,
        "max_ratio_overall": max(max_ratio.values()) if max_ratio else 0.0,
        "worst": worst,
        "carleson": carleson,
        "gate_ratio_emitted": worst_gate,
        "parent_constant_min": float(cmin) if np.isfinite(cmin) else None,
        "diagonal_cap_violations": cap_violations,
        "no_parent_terms": no_parent,
        "residual_by_sum": {str(s): v for s, v in residual_by_sum.items()},
        "constants": constants.to_json(),
    }
    rep = ExtractedRepresentation(grid, params, constants, shifts, paraproducts, residual, target,
                                  target_by_sum, report)
    if no_parent:
        log.info("%d triple terms without a common parent were routed to the residual", no_parent)
    return rep


def reassembly_error(rep: ExtractedRepresentation, f: MeshFunction, g: MeshFunction, h: MeshFunction) -> float:
    """Relative gap between the re-assembled representation and the good-restricted sums."""
    val = rep.evaluate(f, g, h)
    return abs(val - rep.target) / max(abs(rep.target), 1e-300)


def good_restricted_sums(K: BilinearKernel, trunc: TruncationSpec, grid: DyadicGrid, params: GoodnessParams,
                         f: MeshFunction, g: MeshFunction, h: MeshFunction,
                         quad: QuadratureSpec = QuadratureSpec()) -> dict:
    """Per-sum totals with and without the goodness restriction on the output cube."""
    setup = _setup(K, trunc, grid, f, g, h, quad)
    return {s: {"good": _sum_levels(setup, s, params), "full": _sum_levels(setup, s, None)} for s in SUMS}


# ---------------------------------------------------------------------- goodness average
@dataclass
class GoodnessAverageReport:
    good_mean: float
    good_se: float
    full_mean: float
    full_se: float
    trials: int
    pi_by_level: dict
    good_samples: np.ndarray
    full_samples: np.ndarray

    @property
    def combined_se(self) -> float:
        return float(np.hypot(self.good_se, self.full_se))

    @property
    def agree(self) -> bool:
        return abs(self.good_mean - self.full_mean) <= 3 * self.combined_se + 1e-14 * abs(self.full_mean)

    def to_json(self) -> dict:
        return {"good_mean": self.good_mean, "good_se": self.good_se, "full_mean": self.full_mean,
                "full_se": self.full_se, "combined_se": self.combined_se, "agree": self.agree,
                "trials": self.trials, "pi_by_level": {str(k): v for k, v in self.pi_by_level.items()}}


def goodness_average(K: BilinearKernel, trunc: TruncationSpec, params: GoodnessParams, f: MeshFunction,
                     g: MeshFunction, h: MeshFunction, trials: int, rng_seed, S: int = 0,
                     quad: QuadratureSpec = QuadratureSpec()) -> GoodnessAverageReport:
    """Monte Carlo comparison of the goodness-reweighted first sum with the unrestricted one.

    For each random grid the level-``k`` part of the first sum restricted to good
    output cubes is divided by the exact probability ``pi(k)`` that a level-``k`` cube
    is good (the goodness of a cube is independent of the finer grid bits that fix
    the summand).  Levels with ``pi(k) = 0`` and nonzero unrestricted terms make the
    reweighting undefined and raise.
    """
    if trials < 30:
        raise ValueError("goodness_average needs at least 30 trials")
    L = f.L
    pis = {k: exact_pi_good(params, k, L, S) for k in range(S, L)}
    rng = np.random.default_rng(rng_seed)
    good = np.zeros(trials)
    full = np.zeros(trials)
    for t in range(trials):
        grid = DyadicGrid(1, L, S, rng.integers(0, 2, size=(L - S + 1, 1)))
        setup = _setup(K, trunc, grid, f, g, h, quad)
        lv_full = _sum_levels(setup, 1, None)
        lv_good = _sum_levels(setup, 1, params)
        for i, k in enumerate(range(S, L)):
            full[t] += lv_full[i]
            if pis[k] > 0:
                good[t] += lv_good[i] / pis[k]
            elif lv_full[i] != 0.0:
                raise ValueError(f"no cube of level {k} is good (pi = 0); the reweighting is undefined")
    se = lambda v: float(v.std(ddof=1) / np.sqrt(len(v)))
    return GoodnessAverageReport(float(good.mean()), se(good), float(full.mean()), se(full), trials,
                                 {k: float(v) for k, v in pis.items()}, good, full)


# ---------------------------------------------------------------------- eps2 limit
def _joint_diameter(*fs: MeshFunction) -> float:
    boxes = [u.support_box() for u in fs if u.support_box() is not None]
    if not boxes:
        return 0.0
    lo = min(b[0][0] for b in boxes)
    hi = max(b[1][0] for b in boxes)
    return (hi - lo) * 2.0 ** (-fs[0].L)


def eps2_limit_check(K: BilinearKernel, phi, eps1: float, f: MeshFunction, g: MeshFunction, h: MeshFunction,
                     eps2_ladder, quad: QuadratureSpec = QuadratureSpec(), tail_cube: DyadicCube | None = None,
                     tol: float = 1e-9) -> dict:
    """Band pairings ``<T^phi_{eps1, eps2}(f, g), h>`` along a ladder of ``eps2`` values.

    The band kernel differs from the single truncation by ``phi(s / eps2) K`` with
    ``s = |x - y| + |x - z|``, which vanishes once ``eps2 >= 2 s_max``; on the joint
    support ``s_max <= 2 diam``.  Entries from that point on must equal the single
    truncation.  With ``tail_cube`` the paraproduct tail ``<T^phi_{eps2}(1, 1), h_K>``
    is evaluated through the two-term BMO pairing.
    """
    ladder = [float(e) for e in eps2_ladder]
    if any(e <= eps1 for e in ladder):
        raise ValueError("every eps2 must exceed eps1")
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("the eps2 ladder must be increasing")
    single = trilinear_pairing(K, TruncationSpec("smooth", eps1, phi=phi), f, g, h, quad)
    diam = _joint_diameter(f, g, h)
    exact_from = 4.0 * diam
    rows = []
    ok = True
    for e2 in ladder:
        band = trilinear_pairing(K, TruncationSpec("smooth-band", eps1, e2, phi=phi), f, g, h, quad)
        gap = abs(band - single)
        exact = e2 >= exact_from
        passed = (gap <= tol * max(abs(single), 1e-300)) if exact else True
        ok &= passed
        row = {"eps2": e2, "band": band, "gap": gap, "exact_expected": exact, "pass": bool(passed)}
        if tail_cube is not None:
            side = tail_cube.side
            ell = side * 2.0 ** (-f.L)
            C = int(np.ceil(2 * e2 / ell)) + 2
            if ((C - 1) * side) % 2:
                C += 1
            v = np.zeros(side)
            v[: side // 2], v[side // 2:] = 1.0, -1.0
            hK = MeshFunction(v / np.sqrt(ell), f.L, tail_cube.corner)
            row["tail"] = abs(bmo_pairing(K, TruncationSpec("smooth", e2, phi=phi), hK, tail_cube, C=C,
                                          quad=quad)["value"])
        rows.append(row)
    gaps = [r["gap"] for r in rows]
    monotone = all(b <= a + tol * max(abs(single), 1e-300) for a, b in zip(gaps, gaps[1:]))
    return {"single": single, "diameter": diam, "exact_from": exact_from, "rows": rows,
            "exact_ok": bool(ok), "monotone": bool(monotone)}


# ---------------------------------------------------------------------- reports
def representation_csv(rep: ExtractedRepresentation) -> str:
    """One row per (sum, bucket) with triple counts and the largest normalisation ratio."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sum", "bucket", "triples", "good_triples"])
    for s, per in rep.report["buckets"].items():
        for b, c in per.items():
            w.writerow([s, b, c["all"], c["good"]])
    w.writerow([])
    w.writerow(["bucket", "coefficients", "max_ratio"])
    for b, v in rep.report["max_ratio"].items():
        w.writerow([b, rep.report["coefficients_checked"][b], repr(v)])
    for flavor, v in rep.report["carleson"].items():
        w.writerow([f"paraproduct-{flavor}", "", repr(v)])
    return buf.getvalue()


def representation_json(rep: ExtractedRepresentation) -> str:
    out = {"grid": rep.grid.to_json(),
           "params": {"r": rep.params.r, "gamma": float(rep.params.gamma), "alpha": rep.params.alpha},
           "residual": rep.residual, "target": rep.target,
           "target_by_sum": {str(k): v for k, v in rep.target_by_sum.items()},
           "report": rep.report,
           "shift_groups": [{"label": s.label, "levels": list(s.levels), "kinds": list(s.kinds),
                             "records": len(s), "weight": w} for s, w in rep.shifts]}
    return json.dumps(out, indent=1, sort_keys=True, default=float)
