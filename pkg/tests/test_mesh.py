import numpy as np
import pytest

from dyadrep.grid import DyadicCube, LevelError, sample_grid, standard_grid
from dyadrep.mesh import (HaarIndex, MeshFunction, MisalignedCube, bilinear_maximal, dyadic_maximal,
                          haar_function, indicator, lp_norm, martingale_diff, square_function)


def test_average_of_identity_oracle():
    f = MeshFunction.from_callable(lambda x: x, 10)
    assert f.average(DyadicCube(1, (0,), 10)) == 0.24951171875


def test_haar_coefficient_of_identity_oracle():
    f = MeshFunction.from_callable(lambda x: x, 10)
    assert f.haar_coeff(HaarIndex(DyadicCube(0, (0,), 10), (1,))) == pytest.approx(-0.25, abs=1e-15)


def test_haar_functions_orthonormal():
    L = 5
    idx = [HaarIndex(Q, (1,)) for k in range(L) for Q in standard_grid(1, L, 0).cubes_meeting(k, (0,), (32,))]
    H = np.array([haar_function(i, (0,), (32,)).values for i in idx])
    gram = H @ H.T * 2.0 ** -L
    assert np.allclose(gram, np.eye(len(idx)), atol=1e-13)


def test_reconstruction_and_parseval(rng):
    L = 8
    grid = sample_grid(2, (0, L))
    origin, shape = grid.domain()
    f = MeshFunction(rng.standard_normal(64 * 4), L).embed(origin, shape)
    total = f.project(grid, 0)
    energy = lp_norm(total, 2) ** 2
    for k in range(L):
        d = f.level_difference(grid, k)
        total = total + d
        corners = np.array([Q.corner for Q in grid.cubes_meeting(k, origin, (origin[0] + shape[0],))])
        energy += np.sum(f.haar_coeffs(corners, k, (1,)) ** 2)
    assert np.allclose(total.values, f.values, rtol=0, atol=1e-12)
    assert energy == pytest.approx(lp_norm(f, 2) ** 2, rel=1e-12)


def test_martingale_diff_is_local_level_difference(rng):
    L = 6
    grid = standard_grid(1, L, 0)
    f = MeshFunction(rng.standard_normal(64), L)
    I = DyadicCube(3, (16,), L)
    d = martingale_diff(f, I)
    ref = f.level_difference(grid, 3).restrict(I)
    assert np.allclose(d.values, ref.values, atol=1e-14)
    assert abs(d.integral()) < 1e-14
    with pytest.raises(LevelError):
        martingale_diff(f, DyadicCube(6, (0,), L))


def test_square_function_energy(rng):
    L = 7
    grid = standard_grid(1, L, 0)
    f = MeshFunction(rng.standard_normal(128), L)
    Sf = square_function(f, grid)
    assert lp_norm(Sf, 2) ** 2 == pytest.approx(lp_norm(f - f.project(grid, 0), 2) ** 2, rel=1e-12)


def test_maximal_functions_dominate(rng):
    L = 6
    grid = standard_grid(1, L, 0)
    f = MeshFunction(rng.standard_normal(64), L)
    g = MeshFunction(rng.standard_normal(64), L)
    assert np.all(dyadic_maximal(f, grid).values >= np.abs(f.values) - 1e-15)
    M = bilinear_maximal(f, g, "dyadic", grid)
    assert np.all(M.values >= np.abs(f.values * g.values) - 1e-15)
    B = bilinear_maximal(f, g, "ball")
    assert np.all(B.values >= np.abs(f.values * g.values) * (1 - 1e-12))


def test_indicator_and_restrict():
    Q = DyadicCube(2, (16,), 6)
    one = indicator(Q, (0,), (64,))
    assert one.integral() == 0.25
    assert one.average(Q) == 1.0


def test_embed_rejects_lost_support():
    f = MeshFunction(np.ones(8), 3)
    with pytest.raises(ValueError):
        f.embed((2,), (4,))
    assert f.embed((-4,), (16,)).integral() == 1.0


def test_save_load_roundtrip(tmp_path, rng):
    f = MeshFunction(rng.standard_normal(32), 5, (-8,))
    f.save(tmp_path / "f")
    g = MeshFunction.load(tmp_path / "f")
    assert g.origin == f.origin and np.array_equal(g.values, f.values)


def test_misaligned_cube():
    f = MeshFunction(np.ones(8), 3)
    with pytest.raises(MisalignedCube):
        f.average(DyadicCube(1, (0,), 4))
