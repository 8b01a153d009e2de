from fractions import Fraction

import numpy as np
import pytest

from dyadrep.grid import (DyadicCube, DyadicGrid, GoodnessParams, LevelError, boundary_distance, children,
                          estimate_pi_good, exact_pi_good, gamma_of, good_mask, sample_grid, standard_grid)


def test_gamma_of_oracles():
    assert gamma_of(1, 1) == Fraction(1, 6)
    assert gamma_of(1, 2) == Fraction(1, 10)
    assert gamma_of(Fraction(1, 2), 1) == Fraction(1, 10)
    with pytest.raises(ValueError):
        gamma_of(1.5, 1)


def test_cube_basics():
    Q = DyadicCube(2, (8,), 5)
    assert Q.side == 8 and Q.sidelength == 0.25
    kids = children(Q)
    assert [c.corner for c in kids] == [(8,), (12,)]
    assert all(Q.contains(c) for c in kids)
    with pytest.raises(LevelError):
        DyadicCube(6, (0,), 5)


def test_standard_grid_cubes():
    g = standard_grid(1, 6, 0)
    Q = g.cube_containing((37,), 3)
    assert Q.corner == (32,) and Q.side == 8
    assert g.ancestor(Q, 2).corner == (32,) and g.ancestor(Q, 3).corner == (0,)
    assert g.contains_cube(Q)
    assert not g.contains_cube(DyadicCube(3, (4,), 6))
    with pytest.raises(LevelError):
        g.ancestor(Q, 4)


def test_shifted_grid_nests():
    g = sample_grid(3, (0, 8))
    for k in range(0, 8):
        for Q in g.cubes_meeting(k + 1, (0,), (256,)):
            P = g.cube_containing(Q.corner, k)
            assert P.contains(Q)


def test_sample_grid_deterministic_and_json():
    a, b = sample_grid(7, (-2, 6)), sample_grid(7, (-2, 6))
    assert a == b
    assert DyadicGrid.from_json(a.to_json()) == a


def test_domain_covers_unit_box():
    g = sample_grid(1, (0, 6))
    origin, shape = g.domain()
    assert origin[0] <= 0 and origin[0] + shape[0] >= 64
    assert shape[0] % 64 == 0


def _brute_good(grid, I, params):
    h = 2.0 ** -grid.L
    for j in range(grid.S, I.level - params.r + 1):
        for J in grid.cubes_meeting(j, I.corner, (I.corner[0] + I.side,)):
            if not J.contains(I):
                continue
            d = min(I.corner[0] - J.corner[0], J.corner[0] + J.side - I.corner[0] - I.side) * h
            if d <= I.sidelength ** params.gamma * J.sidelength ** (1 - params.gamma):
                return False
    return True


def test_good_mask_matches_brute_force():
    params = GoodnessParams(r=2, gamma=1 / 6)
    g = sample_grid(11, (0, 8))
    for lev in range(2, 8):
        cubes = g.cubes_meeting(lev, (0,), (256,))
        corners = np.array([c.corner for c in cubes])
        mask = good_mask(g, params, lev, corners)
        assert list(mask) == [_brute_good(g, c, params) for c in cubes]


def test_boundary_distance():
    I, J = DyadicCube(3, (8,), 5), DyadicCube(1, (0,), 5)
    assert boundary_distance(I, J) == pytest.approx(4 / 32)


def test_exact_pi_good_known_values():
    # r = 4 at the unit-scale defaults leaves no good cube once ancestors are checked
    params = GoodnessParams(r=4, gamma=1 / 6)
    assert exact_pi_good(params, 3, 6, 0) == 1.0
    assert all(exact_pi_good(params, k, 6, 0) == 0.0 for k in range(4, 6))
    p7 = GoodnessParams(r=7, gamma=1 / 6)
    assert exact_pi_good(p7, 5, 6, -2) == 0.09375
    assert exact_pi_good(p7, 4, 6, -2) == 1.0


def test_estimate_pi_good_matches_exact():
    p7 = GoodnessParams(r=7, gamma=1 / 6)
    est = estimate_pi_good(p7, 5, 4000, 0, L=6, S=-2)
    lo, hi = est.interval(3.0)
    assert lo <= 0.09375 <= hi
