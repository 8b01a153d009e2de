import numpy as np
import pytest

from dyadrep.grid import DyadicCube, standard_grid
from dyadrep.kernels import builtin_kernel
from dyadrep.mesh import MeshFunction
from dyadrep.models import random_shift, random_test_function, shift_form
from dyadrep.sparse import (RhoForm, SparseCollection, UnsupportedFamily, build_sparse, corollary_check,
                            cz_decompose, default_eps_ladder, lambda_form, layer_multiplicity, mixed_terms,
                            random_rho_form, random_sparse_family, rho_form_eval, shift_adapter,
                            single_parent_check, sparse_dominate, stopping_constant, threegrid_cover,
                            threegrid_family, universal_constant, universal_dominates, universal_sparse,
                            verify_sparse)

L = 4


def _cube(level, corner, L=L):
    return DyadicCube(level, (corner,), L)


def test_constant_oracles():
    assert stopping_constant(0.5) == 6
    assert universal_constant(0.5) == 1728
    assert universal_constant(0.5, n=1) == max(8, int(np.ceil(12.0 ** 3)))
    with pytest.raises(ValueError):
        stopping_constant(1.0)


def test_lambda_form_values():
    one = MeshFunction(np.ones(16), L)
    assert lambda_form(SparseCollection([_cube(0, 0)], 0.5), one, one, one) == 1.0
    assert lambda_form(SparseCollection([_cube(0, 0)], 0.5), one, one, one * 0.0) == 0.0
    f = MeshFunction(np.r_[np.ones(4), np.zeros(12)], L)
    S = SparseCollection([_cube(0, 0), _cube(2, 0)], 0.5)
    # |Q0| (1/4)^1 * 1 * 1 + |Q1| * 1 * 1 * 1
    assert lambda_form(S, f, one, one) == pytest.approx(0.25 + 0.25, abs=1e-15)


def test_verify_sparse_examples():
    anti = SparseCollection([_cube(2, c) for c in (0, 4, 8, 12)], 0.9)
    rep = verify_sparse(anti)
    assert rep.passed and rep.min_ratio == 1.0
    tree = SparseCollection([_cube(k, c) for k in range(0, 3) for c in range(0, 16, 16 >> k)], 0.01)
    assert not verify_sparse(tree).passed
    with pytest.raises(UnsupportedFamily):
        verify_sparse(SparseCollection([DyadicCube(1, (0,), L), DyadicCube(1, (4,), L)], 0.5))


def test_build_sparse_constants():
    one = MeshFunction(np.ones(16), L)
    S = build_sparse(one, one, one, 0.5, standard_grid(1, L, 0))
    assert S.cubes == [_cube(0, 0)]


def _brute_stopping(f, root, C0, grid):
    base = np.abs(f.values).mean()
    hits = []
    for lev in range(root.level + 1, grid.L + 1):
        for Q in grid.cubes_meeting(lev, root.corner, (root.corner[0] + root.side,)):
            if np.abs(f.values[Q.corner[0]:Q.corner[0] + Q.side]).mean() > C0 * base:
                if not any(P.contains(Q) for P in hits):
                    hits.append(Q)
    return hits


def test_build_sparse_tall_bump_against_brute_force():
    Lb = 6
    grid = standard_grid(1, Lb, 0)
    v = np.full(64, 0.01)
    v[37] = 50.0
    f = MeshFunction(v, Lb)
    one = MeshFunction(np.ones(64), Lb)
    S = build_sparse(f, one, one, 0.5, grid)
    first = [Q for Q in S.cubes if Q.level > 0]
    expected = _brute_stopping(f, _cube(0, 0, Lb), 6, grid)
    assert expected and set(expected) <= set(first)
    assert verify_sparse(S).passed
    assert all(st["bound_ok"] for st in S.stages)


def test_cz_decompose():
    rng = np.random.default_rng(3)
    f = MeshFunction(rng.standard_normal(16), L)
    g, bad = cz_decompose(f, [], _cube(0, 0))
    assert np.array_equal(g.values, f.values) and not bad
    stop = [_cube(2, 0), _cube(3, 8)]
    g, bad = cz_decompose(f, stop, _cube(0, 0))
    total = g
    for Q, b in bad.items():
        assert abs(b.integral()) < 1e-15
        total = total + b
    assert np.allclose(total.values, f.values, atol=1e-15)
    assert np.all(g.values[0:4] == f.values[0:4].mean())
    with pytest.raises(ValueError):
        cz_decompose(f, [_cube(1, 0), _cube(2, 4)], _cube(0, 0))


def test_good_part_bound():
    rng = np.random.default_rng(4)
    grid = standard_grid(1, 6, 0)
    v = np.abs(rng.standard_cauchy(64))
    f = MeshFunction(v, 6)
    one = MeshFunction(np.ones(64), 6)
    S = build_sparse(f, one, one, 0.5, grid)
    stop = [Q for Q in S.cubes if Q.level > 0 and not any(P.contains(Q) and P != Q and P.level > 0 for P in S.cubes)]
    g, _ = cz_decompose(f, stop, _cube(0, 0, 6))
    assert np.abs(g.values).max() <= 6 * 2 * np.abs(v).mean() * (1 + 1e-12)


def test_shift_adapter_matches_shift_form():
    rng = np.random.default_rng(6)
    grid = standard_grid(1, 6, 0)
    S = random_shift(grid, 2, 3, 1, rng)
    F = shift_adapter(S)
    assert F.rho == 3
    fs = [random_test_function(6, rng) for _ in range(3)]
    assert rho_form_eval(F, *fs) == pytest.approx(shift_form(S, *fs), rel=1e-12, abs=1e-12)


def test_rho_form_size_gate():
    grid = standard_grid(1, 4, 0)
    with pytest.raises(ValueError):
        RhoForm(grid, 0, [1], [0], np.full((1, 2, 2, 2), 4.0 ** 1 * 1.01))
    zero = RhoForm(grid, 0, [1], [0], np.zeros((1, 2, 2, 2)))
    one = MeshFunction(np.ones(16), 4)
    assert rho_form_eval(zero, one, one, one) == 0.0


def test_sparse_dominate_scaling_invariant():
    rng = np.random.default_rng(8)
    grid = standard_grid(1, 6, 0)
    F = shift_adapter(random_shift(grid, 1, 1, 0, rng))
    fs = [random_test_function(6, rng) for _ in range(3)]
    _, a = sparse_dominate(F, *fs, 0.5)
    _, b = sparse_dominate(F, fs[0] * 7.0, fs[1], fs[2], 0.5)
    assert a.ratio == pytest.approx(b.ratio, rel=1e-12)
    zero = RhoForm(grid, 0, [0], [0], np.zeros((1, 2, 2, 2)))
    assert sparse_dominate(zero, *fs, 0.5)[1].ratio == 0.0


def test_mixed_terms_vanish_for_rho_zero():
    rng = np.random.default_rng(9)
    grid = standard_grid(1, 6, 0)
    F = random_rho_form(grid, 0, rng)
    fs = [MeshFunction(np.abs(rng.standard_cauchy(64)) ** 2, 6) for _ in range(3)]
    Q0 = _cube(0, 0, 6)
    stop = [Q for Q in build_sparse(*fs, 0.5, grid).cubes if Q.level > 0]
    stop = [Q for Q in stop if not any(P != Q and P.contains(Q) for P in stop)]
    res = mixed_terms(F, *fs, stop, Q0)
    assert stop
    assert all(abs(v) <= 1e-12 * res["scale"] for v in res["terms"].values())


@pytest.mark.parametrize("rho", [1, 2, 3])
def test_single_parent_property(rho):
    rng = np.random.default_rng(10 + rho)
    grid = standard_grid(1, 6, 0)
    F = random_rho_form(grid, rho, rng)
    fs = [MeshFunction(np.abs(rng.standard_cauchy(64)) ** 2, 6) for _ in range(3)]
    stop = [Q for Q in build_sparse(*fs, 0.5, grid).cubes if Q.level > 0]
    stop = [Q for Q in stop if not any(P != Q and P.contains(Q) for P in stop)]
    assert single_parent_check(F, *fs, stop, _cube(0, 0, 6))["ok"]


def test_universal_sparse_constants_and_layers():
    grid = standard_grid(1, 6, 0)
    one = MeshFunction(np.ones(64), 6)
    U = universal_sparse(one, one, one, 0.5, grid)
    assert U.cubes == [_cube(0, 0, 6)]
    rng = np.random.default_rng(11)
    fs = [MeshFunction(np.abs(rng.standard_cauchy(64)) ** 3, 6) for _ in range(3)]
    U = universal_sparse(*fs, 0.5, grid)
    assert verify_sparse(U).passed and layer_multiplicity(U) == 1


def test_universal_dominates_examples():
    grid = standard_grid(1, 6, 0)
    rng = np.random.default_rng(12)
    fs = [random_test_function(6, rng) for _ in range(3)]
    U = universal_sparse(*fs, 0.5, grid)
    assert universal_dominates(U, U, *fs)["ratio"] == pytest.approx(1.0)
    sub = SparseCollection(U.cubes[:1], 0.5)
    assert universal_dominates(sub, U, *fs)["ratio"] <= 1.0


def test_random_sparse_families_are_sparse():
    rng = np.random.default_rng(13)
    grid = standard_grid(1, 8, 0)
    for _ in range(20):
        assert verify_sparse(random_sparse_family(grid, 0.5, rng)).passed


def test_threegrid_cover():
    assert len(threegrid_family(6)) == 3
    M = 6
    # a cube of the standard grid is covered by itself or its parent
    lo = np.array([0, 3 * 16, 3 * 40])
    ln = np.array([3 * 64, 3 * 16, 3 * 8])
    _, corner, side = threegrid_cover(lo, ln, M)
    assert np.all(side <= 2 * ln) and np.all(corner <= lo) and np.all(lo + ln <= corner + side)


def test_corollary_zero_function():
    K = builtin_kernel("beurling-re")
    z = MeshFunction(np.zeros(64), 6)
    one = MeshFunction(np.ones(64), 6)
    const = {"C_est": 30.0}
    res = corollary_check(K, default_eps_ladder(), z, one, one, 0.5, constant=const)
    assert res["sup"] == 0.0 and res["lambda"] == 0.0 and res["ratio"] == 0.0


def test_corollary_ratio_scale_invariant():
    K = builtin_kernel("beurling-re")
    rng = np.random.default_rng(14)
    fs = [random_test_function(5, rng) for _ in range(3)]
    ladder = [1 / 16, 1 / 8, 1 / 4]
    const = {"C_est": 30.0}
    a = corollary_check(K, ladder, *fs, 0.5, constant=const)
    # the same values on a mesh twice as fine, i.e. f(2x), with the ladder halved
    small = [MeshFunction(f.values, 6) for f in fs]
    b = corollary_check(K, [e / 2 for e in ladder], *small, 0.5, constant=const)
    assert b["ratio"] == pytest.approx(a["ratio"], rel=1e-9)
