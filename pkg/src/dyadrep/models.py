"""Cancellative bilinear shifts, bilinear paraproducts and an empirical norm harness.

A shift is stored as three Haar "slots", one per argument of the trilinear form
``<S(f, g), h>``: slot ``f`` and slot ``g`` are tested against the inputs and slot
``h`` carries the output Haar function.  Every record holds the four cubes
``Q, I, J, K`` (corners, per-record level of ``Q``) and a coefficient.  Taking an
adjoint just exchanges two slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import DyadicGrid, LevelError
from .mesh import MeshFunction, lp_norm

KINDS = ("h", "h0")


class NormalizationError(ValueError):
    pass


def _haar_data(F: MeshFunction, corners, levels, kind, eta=None) -> np.ndarray:
    """``<F, h_I>`` or ``<F, h_I^0>`` for cubes given by corners (N, n) and levels (N,)."""
    corners = np.asarray(corners, dtype=np.int64).reshape(len(levels), -1)
    out = np.zeros(len(levels))
    if eta is None:
        eta = np.ones((len(levels), F.n), dtype=np.int64)
    for lev in np.unique(levels):
        for pat in {tuple(e) for e in np.asarray(eta)[levels == lev]}:
            sel = (levels == lev) & np.all(np.asarray(eta) == pat, axis=1)
            use = pat if kind == "h" else (0,) * F.n
            out[sel] = F.haar_coeffs(corners[sel], int(lev), use)
    return out


@dataclass
class ShiftSpec:
    """Coefficient records of a bilinear shift ``S^{i,j,k}`` (or one of its adjoints).

    ``levels`` = relative depths of the f-, g- and h-slot cubes below ``Q``;
    ``kinds`` = Haar kind of each slot ("h" cancellative, "h0" normalised indicator).
    """

    grid: DyadicGrid
    levels: tuple[int, int, int]
    kinds: tuple[str, str, str]
    q_level: np.ndarray
    q_corner: np.ndarray
    corners: tuple[np.ndarray, np.ndarray, np.ndarray]
    coeffs: np.ndarray
    etas: tuple | None = None
    label: str = ""
    validate: bool = True

    def __post_init__(self):
        self.q_level = np.asarray(self.q_level, dtype=np.int64).ravel()
        N = len(self.q_level)
        n = self.grid.n
        self.q_corner = np.asarray(self.q_corner, dtype=np.int64).reshape(N, n)
        self.corners = tuple(np.asarray(c, dtype=np.int64).reshape(N, n) for c in self.corners)
        self.coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if self.etas is None:
            self.etas = tuple(np.ones((N, n), dtype=np.int64) for _ in range(3))
        self.levels = tuple(int(v) for v in self.levels)
        self.kinds = tuple(self.kinds)
        if any(k not in KINDS for k in self.kinds):
            raise ValueError(f"unknown Haar kind in {self.kinds}")
        if len(self.coeffs) != N:
            raise ValueError("one coefficient per record")
        if self.validate:
            self.check_structure()
            self.check_normalization()

    # ------------------------------------------------------------------ properties
    @property
    def i(self):
        return self.levels[0]

    @property
    def j(self):
        return self.levels[1]

    @property
    def k(self):
        return self.levels[2]

    @property
    def rho(self) -> int:
        return max(self.levels)

    def __len__(self):
        return len(self.coeffs)

    def slot_levels(self, s: int) -> np.ndarray:
        return self.q_level + self.levels[s]

    def bounds(self) -> np.ndarray:
        """``|I|^{1/2} |J|^{1/2} |K|^{1/2} / |Q|^2`` per record."""
        n = self.grid.n
        ql = self.q_level.astype(float)
        vol = lambda lev: 2.0 ** (-n * lev)
        return np.sqrt(vol(ql + self.i) * vol(ql + self.j) * vol(ql + self.k)) / vol(ql) ** 2

    def ratios(self) -> np.ndarray:
        return np.abs(self.coeffs) / self.bounds() if len(self) else np.zeros(0)

    # ------------------------------------------------------------------ validation
    def check_structure(self):
        g = self.grid
        for s in range(3):
            lev = self.slot_levels(s)
            if np.any(lev > g.L - (1 if self.kinds[s] == "h" else 0)):
                raise LevelError("a Haar function of the shift lies below the mesh scale")
            side_q = np.left_shift(1, g.L - self.q_level)[:, None]
            side_s = np.left_shift(1, g.L - lev)[:, None]
            c = self.corners[s]
            inside = (c >= self.q_corner) & (c + side_s <= self.q_corner + side_q)
            if not np.all(inside):
                raise ValueError("slot cube not contained in Q")

    def check_normalization(self, tol: float = 1e-12):
        if not len(self):
            return
        r = self.ratios()
        bad = np.flatnonzero(r > 1 + tol)
        if bad.size:
            b = int(bad[np.argmax(r[bad])])
            raise NormalizationError(
                f"{self.label or 'shift'}: record {b} has |alpha| / bound = {r[b]:.6g} > 1 "
                f"(Q level {self.q_level[b]}, corner {self.q_corner[b].tolist()})")

    # ------------------------------------------------------------------ evaluation
    def slot_data(self, F: MeshFunction, s: int) -> np.ndarray:
        return _haar_data(F, self.corners[s], self.slot_levels(s), self.kinds[s], self.etas[s])


def shift_form(S: ShiftSpec, f: MeshFunction, g: MeshFunction, h: MeshFunction) -> float:
    if not len(S):
        return 0.0
    return float(np.sum(S.coeffs * S.slot_data(f, 0) * S.slot_data(g, 1) * S.slot_data(h, 2)))


def _accumulate_haar(out: MeshFunction, corners, levels, kind, etas, weights):
    """Add ``sum_r weights[r] * h_{cube_r}`` (kind h or h0) to ``out`` in place."""
    L = out.L
    n = out.n
    if n == 1:
        acc = np.zeros(out.shape[0] + 1)
        lo = corners[:, 0] - out.origin[0]
        side = np.left_shift(1, L - levels)
        amp = weights / np.sqrt(side * out.h)
        clip = lambda idx: np.clip(idx, 0, out.shape[0])
        if kind == "h0":
            np.add.at(acc, clip(lo), amp)
            np.add.at(acc, clip(lo + side), -amp)
        else:
            np.add.at(acc, clip(lo), amp)
            np.add.at(acc, clip(lo + side // 2), -2 * amp)
            np.add.at(acc, clip(lo + side), amp)
        out.values += np.cumsum(acc)[:-1]
        return
    from .mesh import child_signs
    import itertools
    for c, lev, eta, w in zip(corners, levels, etas, weights):
        side = 1 << (L - int(lev))
        vol = (side * out.h) ** n
        lo = c - np.asarray(out.origin)
        if kind == "h0":
            out.values[lo[0]:lo[0] + side, lo[1]:lo[1] + side] += w / np.sqrt(vol)
            continue
        half = side // 2
        for s, bits in zip(child_signs(eta), itertools.product((0, 1), repeat=n)):
            a = lo + half * np.asarray(bits)
            out.values[a[0]:a[0] + half, a[1]:a[1] + half] += s * w / np.sqrt(vol)


def shift_apply(S: ShiftSpec, f: MeshFunction, g: MeshFunction) -> MeshFunction:
    """``S(f, g)`` as a mesh function on the box of ``f``."""
    out = MeshFunction.zeros(f.L, f.origin, f.shape)
    if not len(S):
        return out
    w = S.coeffs * S.slot_data(f, 0) * S.slot_data(g, 1)
    _accumulate_haar(out, S.corners[2], S.slot_levels(2), S.kinds[2], S.etas[2], w)
    return out


def shift_block(S: ShiftSpec, f: MeshFunction, g: MeshFunction, q_index: int) -> MeshFunction:
    """The single block ``A_Q(f, g)`` for the records whose ``Q`` is the ``q_index``-th distinct Q."""
    keys = np.concatenate([S.q_level[:, None], S.q_corner], axis=1)
    uniq = np.unique(keys, axis=0)
    sel = np.all(keys == uniq[q_index], axis=1)
    sub = ShiftSpec(S.grid, S.levels, S.kinds, S.q_level[sel], S.q_corner[sel],
                    tuple(c[sel] for c in S.corners), S.coeffs[sel], tuple(e[sel] for e in S.etas),
                    validate=False)
    return shift_apply(sub, f, g)


def distinct_q(S: ShiftSpec) -> np.ndarray:
    keys = np.concatenate([S.q_level[:, None], S.q_corner], axis=1)
    return np.unique(keys, axis=0)


def shift_adjoint(S: ShiftSpec, which: int) -> ShiftSpec:
    """Exchange the output slot with the f-slot (``which = 1``) or the g-slot (``which = 2``)."""
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    perm = (2, 1, 0) if which == 1 else (0, 2, 1)
    return ShiftSpec(S.grid, tuple(S.levels[p] for p in perm), tuple(S.kinds[p] for p in perm),
                     S.q_level.copy(), S.q_corner.copy(), tuple(S.corners[p].copy() for p in perm),
                     S.coeffs.copy(), tuple(S.etas[p].copy() for p in perm),
                     label=f"adjoint-{which} of {S.label}" if S.label else f"adjoint-{which}")


# ---------------------------------------------------------------------- serialization
def shift_to_json(S: ShiftSpec) -> dict:
    recs = []
    for r in range(len(S)):
        recs.append({
            "q_level": int(S.q_level[r]), "Q": S.q_corner[r].tolist(),
            "cubes": [S.corners[s][r].tolist() for s in range(3)],
            "eta": [S.etas[s][r].tolist() for s in range(3)],
            "alpha": float(S.coeffs[r]).hex(),
        })
    return {"type": "shift", "label": S.label, "levels": list(S.levels), "kinds": list(S.kinds),
            "grid": S.grid.to_json(), "records": recs}


def shift_from_json(obj: dict) -> ShiftSpec:
    grid = DyadicGrid.from_json(obj["grid"])
    recs = obj["records"]
    n = grid.n
    ql = np.array([r["q_level"] for r in recs], dtype=np.int64)
    qc = np.array([r["Q"] for r in recs], dtype=np.int64).reshape(len(recs), n)
    cs = tuple(np.array([r["cubes"][s] for r in recs], dtype=np.int64).reshape(len(recs), n) for s in range(3))
    es = tuple(np.array([r["eta"][s] for r in recs], dtype=np.int64).reshape(len(recs), n) for s in range(3))
    al = np.array([float.fromhex(r["alpha"]) for r in recs])
    return ShiftSpec(grid, tuple(obj["levels"]), tuple(obj["kinds"]), ql, qc, cs, al, es, label=obj.get("label", ""))


# ---------------------------------------------------------------------- paraproducts
FLAVORS = ("direct", "adjoint-1", "adjoint-2")


@dataclass
class ParaproductSpec:
    """``Pi_alpha(f, g) = sum_K alpha_K <f>_K <g>_K h_K`` and its two adjoints."""

    grid: DyadicGrid
    k_level: np.ndarray
    k_corner: np.ndarray
    coeffs: np.ndarray
    flavor: str = "direct"
    eta: np.ndarray | None = None
    validate: bool = True
    label: str = ""
    carleson_max: float = field(default=0.0, init=False)

    def __post_init__(self):
        n = self.grid.n
        self.k_level = np.asarray(self.k_level, dtype=np.int64).ravel()
        N = len(self.k_level)
        self.k_corner = np.asarray(self.k_corner, dtype=np.int64).reshape(N, n)
        self.coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if self.eta is None:
            self.eta = np.ones((N, n), dtype=np.int64)
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown paraproduct flavor {self.flavor!r}")
        if np.any(self.k_level >= self.grid.L):
            raise LevelError("paraproduct Haar functions must lie above the mesh scale")
        self.carleson_max = carleson_constant(self.grid, self.k_level, self.k_corner, self.coeffs)
        if self.validate and self.carleson_max > 1 + 1e-12:
            raise NormalizationError(
                f"{self.label or 'paraproduct'}: Carleson sum {self.carleson_max:.6g} exceeds 1")

    def __len__(self):
        return len(self.coeffs)


def carleson_constant(grid: DyadicGrid, levels, corners, coeffs) -> float:
    """``max over K0 of |K0|^{-1} sum_{K subset K0} |alpha_K|^2`` over all grid cubes K0."""
    if len(coeffs) == 0:
        return 0.0
    n = grid.n
    mass: dict[tuple, float] = {}
    for lev, c, a in zip(levels, corners, coeffs):
        key = (int(lev), *grid.cube_index(c, int(lev)).tolist())
        mass[key] = mass.get(key, 0.0) + float(a) ** 2
    best = 0.0
    for lev in range(int(max(levels)), grid.S - 1, -1):
        layer = [(k, v) for k, v in mass.items() if k[0] == lev]
        for key, v in layer:
            best = max(best, v * 2.0 ** (n * lev))
            if lev > grid.S:
                corner = grid.corner_of(np.array(key[1:]), lev)
                pkey = (lev - 1, *grid.cube_index(corner, lev - 1).tolist())
                mass[pkey] = mass.get(pkey, 0.0) + v
    return best


def _avg_data(F: MeshFunction, corners, levels) -> np.ndarray:
    out = np.zeros(len(levels))
    for lev in np.unique(levels):
        sel = levels == lev
        out[sel] = F.cube_averages(corners[sel], 1 << (F.L - int(lev)))
    return out


def paraproduct_form(P: ParaproductSpec, f: MeshFunction, g: MeshFunction, h: MeshFunction) -> float:
    if not len(P):
        return 0.0
    A, B, C = {"direct": (f, g, h), "adjoint-1": (h, g, f), "adjoint-2": (f, h, g)}[P.flavor]
    a = _avg_data(A, P.k_corner, P.k_level)
    b = _avg_data(B, P.k_corner, P.k_level)
    c = _haar_data(C, P.k_corner, P.k_level, "h", P.eta)
    return float(np.sum(P.coeffs * a * b * c))


def paraproduct_apply(P: ParaproductSpec, f: MeshFunction, g: MeshFunction) -> MeshFunction:
    out = MeshFunction.zeros(f.L, f.origin, f.shape)
    if not len(P):
        return out
    if P.flavor == "direct":
        w = P.coeffs * _avg_data(f, P.k_corner, P.k_level) * _avg_data(g, P.k_corner, P.k_level)
        _accumulate_haar(out, P.k_corner, P.k_level, "h", P.eta, w)
        return out
    # adjoints: the Haar function tests one input, the output carries 1_K / |K| = h_K^0 / |K|^{1/2}
    haar_in, avg_in = (f, g) if P.flavor == "adjoint-1" else (g, f)
    vol = 2.0 ** (-f.n * P.k_level.astype(float))
    w = (P.coeffs * _haar_data(haar_in, P.k_corner, P.k_level, "h", P.eta)
         * _avg_data(avg_in, P.k_corner, P.k_level) / np.sqrt(vol))
    _accumulate_haar(out, P.k_corner, P.k_level, "h0", P.eta, w)
    return out


def paraproduct_to_json(P: ParaproductSpec) -> dict:
    return {"type": "paraproduct", "flavor": P.flavor, "label": P.label, "grid": P.grid.to_json(),
            "records": [{"level": int(l), "K": c.tolist(), "eta": e.tolist(), "alpha": float(a).hex()}
                        for l, c, e, a in zip(P.k_level, P.k_corner, P.eta, P.coeffs)]}


def paraproduct_from_json(obj: dict) -> ParaproductSpec:
    grid = DyadicGrid.from_json(obj["grid"])
    recs = obj["records"]
    n = grid.n
    return ParaproductSpec(grid, np.array([r["level"] for r in recs], dtype=np.int64),
                           np.array([r["K"] for r in recs], dtype=np.int64).reshape(len(recs), n),
                           np.array([float.fromhex(r["alpha"]) for r in recs]), obj["flavor"],
                           np.array([r["eta"] for r in recs], dtype=np.int64).reshape(len(recs), n),
                           label=obj.get("label", ""))


def save_specs(path, specs) -> None:
    out = []
    for s in specs:
        out.append(shift_to_json(s) if isinstance(s, ShiftSpec) else paraproduct_to_json(s))
    Path(path).write_text(json.dumps(out, indent=1, sort_keys=True))


def load_specs(path) -> list:
    out = []
    for obj in json.loads(Path(path).read_text()):
        out.append(shift_from_json(obj) if obj["type"] == "shift" else paraproduct_from_json(obj))
    return out


# ---------------------------------------------------------------------- random specs
def _cubes_in(grid: DyadicGrid, Q_level: int, Q_corner, depth: int):
    side = 1 << (grid.L - Q_level - depth)
    m = 1 << depth
    offs = np.stack(np.meshgrid(*[np.arange(m)] * grid.n, indexing="ij"), axis=-1).reshape(-1, grid.n)
    return np.asarray(Q_corner) + offs * side


def random_shift(grid: DyadicGrid, i: int, j: int, k: int, rng, kinds=("h", "h0", "h"),
                 q_levels=None, box=None, density: float = 1.0, max_records: int = 20000) -> ShiftSpec:
    """Random admissible shift: every coefficient uniform in ``[-1, 1]`` times its bound."""
    if q_levels is None:
        q_levels = range(grid.S, grid.L - max(i + (kinds[0] == "h"), j + (kinds[1] == "h"),
                                              k + (kinds[2] == "h")) + 1)
    lo, hi = box if box is not None else (np.zeros(grid.n, dtype=np.int64), np.full(grid.n, 1 << grid.L))
    ql, qc, cs = [], [], ([], [], [])
    for q in q_levels:
        for Q in grid.cubes_meeting(q, lo, hi):
            subs = [_cubes_in(grid, q, Q.corner, d) for d in (i, j, k)]
            for a in subs[0]:
                for b in subs[1]:
                    for c in subs[2]:
                        if density < 1.0 and rng.random() > density:
                            continue
                        ql.append(q); qc.append(Q.corner)
                        cs[0].append(a); cs[1].append(b); cs[2].append(c)
                        if len(ql) >= max_records:
                            break
    N = len(ql)
    n = grid.n
    spec = ShiftSpec(grid, (i, j, k), kinds, np.array(ql, dtype=np.int64), np.array(qc).reshape(N, n),
                     tuple(np.array(c, dtype=np.int64).reshape(N, n) for c in cs), np.zeros(N),
                     label=f"random S^{{{i},{j},{k}}}")
    spec.coeffs = rng.uniform(-1.0, 1.0, N) * spec.bounds()
    spec.check_normalization()
    return spec


# ---------------------------------------------------------------------- norm harness
def random_test_function(L: int, rng, kind: str | None = None) -> MeshFunction:
    """Random Haar polynomial (levels <= L - 2) or a sum of at most 8 scaled indicators on [0, 1)."""
    M = 1 << L
    if kind is None:
        kind = "haar" if rng.random() < 0.5 else "indicators"
    if kind == "haar":
        v = np.full(M, rng.uniform(-1, 1))
        for lev in range(0, L - 1):
            side = M >> lev
            c = rng.uniform(-1, 1, 1 << lev) * 2.0 ** (lev / 2)
            pattern = np.concatenate([np.ones(side // 2), -np.ones(side // 2)])
            v += np.kron(c, pattern)
        return MeshFunction(v, L)
    v = np.zeros(M)
    for _ in range(int(rng.integers(1, 9))):
        a, b = sorted(rng.integers(0, M + 1, 2))
        if b == a:
            b = a + 1
        v[a:b] += rng.uniform(-1, 1)
    return MeshFunction(v, L)


@dataclass
class NormReport:
    max_ratio: float
    ratios: np.ndarray
    p: float
    q: float
    r: float


def norm_harness(apply, L: int, p: float, q: float, trials: int, rng_seed) -> NormReport:
    """Max over random test pairs of ``||op(f, g)||_r / (||f||_p ||g||_q)``."""
    if not (1 < p < np.inf and 1 < q < np.inf):
        raise ValueError("need 1 < p, q < infinity")
    r = 1.0 / (1.0 / p + 1.0 / q)
    rng = np.random.default_rng(rng_seed)
    ratios = np.zeros(trials)
    for t in range(trials):
        f = random_test_function(L, rng)
        g = random_test_function(L, rng)
        den = lp_norm(f, p) * lp_norm(g, q)
        if den == 0:
            continue
        ratios[t] = lp_norm(apply(f, g), r) / den
    return NormReport(float(ratios.max()) if trials else 0.0, ratios, p, q, r)
