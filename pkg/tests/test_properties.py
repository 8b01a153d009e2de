"""Property-based checks of the exact identities."""

from fractions import Fraction

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dyadrep.grid import DyadicGrid, GoodnessParams, gamma_of, good_mask, standard_grid
from dyadrep.mesh import MeshFunction, lp_norm
from dyadrep.models import random_shift, shift_form
from dyadrep.sparse import (SparseCollection, build_sparse, lambda_form, random_sparse_family, rho_form_eval,
                            shift_adapter, threegrid_cover, universal_sparse, verify_sparse)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
values6 = arrays(np.float64, 64, elements=finite)
bits = st.lists(st.integers(0, 1), min_size=7, max_size=7)


@given(values6, bits)
@settings(max_examples=50, deadline=None)
def test_parseval_on_random_grids(v, omega):
    grid = DyadicGrid(1, 6, 0, omega)
    origin, shape = grid.domain()
    f = MeshFunction(v, 6).embed(origin, shape)
    energy = lp_norm(f.project(grid, 0), 2) ** 2
    for k in range(6):
        corners = np.array([[c] for c in range(origin[0], origin[0] + shape[0], grid.side(k))])
        energy += np.sum(f.haar_coeffs(corners, k, (1,)) ** 2)
    assert abs(energy - lp_norm(f, 2) ** 2) <= 1e-9 * max(1.0, lp_norm(f, 2) ** 2)


@given(values6, values6, st.floats(-10, 10))
@settings(max_examples=50, deadline=None)
def test_cube_averages_linear(a, b, c):
    f, g = MeshFunction(a, 6), MeshFunction(b, 6)
    corners = np.arange(0, 64, 8)[:, None]
    lhs = (f + g * c).cube_averages(corners, 8)
    rhs = f.cube_averages(corners, 8) + c * g.cube_averages(corners, 8)
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


@given(st.fractions(min_value=0.01, max_value=1), st.integers(1, 2))
def test_gamma_in_range(alpha, n):
    g = gamma_of(alpha, n)
    assert 0 < g <= Fraction(1, 6)


@given(bits, st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_goodness_monotone_in_r(omega, r):
    grid = DyadicGrid(1, 6, 0, omega)
    corners = np.arange(0, 64, 2)[:, None] + grid.offset(5)
    strict = good_mask(grid, GoodnessParams(r=r), 5, corners)
    loose = good_mask(grid, GoodnessParams(r=r + 1), 5, corners)
    assert np.all(loose | ~strict)


positive6 = arrays(np.float64, 64, elements=st.floats(0, 1e3, allow_nan=False))


@given(positive6, positive6, positive6, st.sampled_from([0.25, 0.5, 0.75]))
@settings(max_examples=40, deadline=None)
def test_built_families_are_sparse(a, b, c, eta):
    if not (a.any() and b.any() and c.any()):
        return
    grid = standard_grid(1, 6, 0)
    fs = [MeshFunction(v, 6) for v in (a, b, c)]
    S = build_sparse(*fs, eta, grid)
    assert verify_sparse(S).passed
    assert all(s["bound_ok"] for s in S.stages)
    U = universal_sparse(*fs, eta, grid)
    assert verify_sparse(U).passed


@given(positive6, positive6, positive6, st.floats(0.1, 100))
@settings(max_examples=30, deadline=None)
def test_lambda_homogeneous(a, b, c, lam):
    fs = [MeshFunction(v, 6) for v in (a, b, c)]
    S = SparseCollection([standard_grid(1, 6, 0).cube_containing((0,), 0)], 0.5)
    assert np.isclose(lambda_form(S, fs[0] * lam, fs[1], fs[2]), lam * lambda_form(S, *fs), rtol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.7]))
@settings(max_examples=30, deadline=None)
def test_random_sparse_family_passes(seed, eta):
    S = random_sparse_family(standard_grid(1, 7, 0), eta, np.random.default_rng(seed))
    assert verify_sparse(S).passed


@given(st.integers(0, 3 * 2**10 - 1), st.integers(1, 3 * 2**10))
def test_threegrid_cover_property(lo, length):
    M = 10
    g, corner, side = threegrid_cover(lo, length, M)
    assert side[0] > 0 and corner[0] <= lo and lo + length <= corner[0] + side[0]
    assert side[0] <= 6 * length


@given(st.integers(0, 2**32 - 1), st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)))
@settings(max_examples=20, deadline=None)
def test_shift_adapter_two_paths(seed, ijk):
    rng = np.random.default_rng(seed)
    grid = standard_grid(1, 5, 0)
    S = random_shift(grid, *ijk, rng)
    fs = [MeshFunction(rng.standard_normal(32), 5) for _ in range(3)]
    a, b = rho_form_eval(shift_adapter(S), *fs), shift_form(S, *fs)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(b))
