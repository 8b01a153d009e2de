import numpy as np
import pytest

from dyadrep.grid import DyadicCube
from dyadrep.kernels import (QuadratureSpec, SmoothCutoff, TruncationSpec, adjoint_pairing, bmo_adjoint_pairing,
                             bmo_pairing, builtin_kernel, measure_constants, sharp_smooth_gap, trilinear_pairing,
                             wbp_constant)
from dyadrep.mesh import MeshFunction, bilinear_maximal
from dyadrep.models import random_test_function


def test_beurling_value_oracle():
    K = builtin_kernel("beurling-re")
    assert K(0.0, 1.0, 0.0) == 1.0
    assert K(0.0, 0.0, 1.0) == -1.0


def test_cutoff_oracle():
    phi = SmoothCutoff()
    assert phi(0.75) == 0.5
    assert phi(0.5) == 0.0 and phi(1.0) == 1.0 and phi(2.0) == 1.0
    assert phi.max_derivative == pytest.approx(np.max(phi.derivative(np.linspace(0.5, 1, 1001))), rel=1e-3)


def test_truncation_validation():
    with pytest.raises(ValueError):
        TruncationSpec("smooth-band", 0.25, 0.125)
    with pytest.raises(ValueError):
        TruncationSpec("sharp", 0.0)


def test_measured_constants_beurling():
    c = measure_constants(builtin_kernel("beurling-re"), samples=20_000)
    # sup of |k(a, b)| (|a| + |b|)^2 is 3 sqrt(3) / 4 for this kernel
    assert c["size"] == pytest.approx(3 * np.sqrt(3) / 4, rel=1e-3)
    assert c["cz_norm"] < 32


def test_zero_kernel_pairings(rng):
    K = builtin_kernel("zero")
    f, g, h = (random_test_function(5, rng) for _ in range(3))
    tr = TruncationSpec("smooth", 0.125)
    assert trilinear_pairing(K, tr, f, g, h) == 0.0
    assert wbp_constant(K, tr, [DyadicCube(2, (0,), 5)]) == 0.0


def test_adjoint_identities(rng, beurling, smooth8):
    f, g, h = (random_test_function(5, rng) for _ in range(3))
    ref = trilinear_pairing(beurling, smooth8, f, g, h)
    assert adjoint_pairing(1, beurling, smooth8, h, g, f) == pytest.approx(ref, rel=1e-10)
    assert adjoint_pairing(2, beurling, smooth8, f, h, g) == pytest.approx(ref, rel=1e-10)


def test_pairing_trilinear(rng, beurling, smooth8):
    f, f2, g, h = (random_test_function(5, rng) for _ in range(4))
    a = trilinear_pairing(beurling, smooth8, f + 2.0 * f2, g, h)
    b = trilinear_pairing(beurling, smooth8, f, g, h) + 2 * trilinear_pairing(beurling, smooth8, f2, g, h)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_quadrature_convergence(rng, beurling, smooth8):
    f, g, h = (random_test_function(5, rng, "indicators") for _ in range(3))
    a = trilinear_pairing(beurling, smooth8, f, g, h, QuadratureSpec(4))
    b = trilinear_pairing(beurling, smooth8, f, g, h, QuadratureSpec(8))
    assert abs(a - b) <= 1e-3 * max(abs(b), 1e-12)


def test_wbp_invariant_under_duplication(beurling, smooth8):
    cubes = [DyadicCube(k, (0,), 6) for k in range(2, 6)]
    assert wbp_constant(beurling, smooth8, cubes) == wbp_constant(beurling, smooth8, cubes + cubes[::-1])


def test_wbp_beurling_im_stabilizes():
    K = builtin_kernel("beurling-im")
    tr = TruncationSpec("smooth", 1 / 32)
    vals = [wbp_constant(K, tr, [DyadicCube(k, (0,), 6) for k in range(2, top + 1)]) for top in (5, 6)]
    assert abs(vals[1] - vals[0]) <= 0.1 * max(vals[1], 1e-12) + 1e-12


def _haar_atom(level, corner, L):
    side = 1 << (L - level)
    v = np.r_[np.ones(side // 2), -np.ones(side // 2)]
    return MeshFunction(v, L, (corner,)), DyadicCube(level, (corner,), L)


def test_bmo_zero_test_function(beurling, smooth8):
    phi = MeshFunction(np.zeros(8), 6, (8,))
    assert bmo_pairing(beurling, smooth8, phi, DyadicCube(3, (8,), 6), C=5)["value"] == 0.0


def test_bmo_independent_of_C(beurling):
    tr = TruncationSpec("smooth", 1 / 16)
    phi, R = _haar_atom(3, 8, 6)
    a = bmo_pairing(beurling, tr, phi, R, C=3)
    b = bmo_pairing(beurling, tr, phi, R, C=5)
    budget = a["tail_bound"] + b["tail_bound"]
    assert abs(a["value"] - b["value"]) <= 1e-6 * max(abs(a["value"]), abs(b["value"])) + budget + 1e-6 * R.volume


def test_bmo_preconditions(beurling, smooth8):
    phi, R = _haar_atom(3, 8, 6)
    with pytest.raises(ValueError):
        bmo_pairing(beurling, smooth8, phi, R, C=3)  # (C - 1) l(R) / 2 = eps
    with pytest.raises(ValueError):
        bmo_pairing(beurling, smooth8, MeshFunction(np.ones(8), 6, (8,)), R, C=5)


def test_bmo_adjoint_vanishes_for_symmetric_kernel(beurling):
    tr = TruncationSpec("smooth", 1 / 16)
    phi, R = _haar_atom(3, 8, 6)
    for which in (1, 2):
        assert abs(bmo_adjoint_pairing(beurling, tr, which, phi, R, C=3)["value"]) < 1e-8


def test_sharp_smooth_gap_dominated_by_maximal(rng, beurling):
    f, g = (random_test_function(5, rng) for _ in range(2))
    gap = sharp_smooth_gap(beurling, 0.125, f, g)
    M = bilinear_maximal(f.embed(gap.origin, gap.shape), g.embed(gap.origin, gap.shape), "ball")
    inside = M.values > 0
    assert np.all(gap.values[~inside] < 1e-12)
    assert np.max(gap.values[inside] / M.values[inside]) < 64
