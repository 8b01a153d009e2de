import numpy as np
import pytest

from dyadrep.grid import LevelError, standard_grid
from dyadrep.mesh import MeshFunction
from dyadrep.models import (NormalizationError, ParaproductSpec, ShiftSpec, carleson_constant, load_specs,
                            norm_harness, paraproduct_apply, paraproduct_form, random_shift, random_test_function,
                            save_specs, shift_adjoint, shift_apply, shift_form)


def _one_record(coeff, L=4):
    g = standard_grid(1, L, 0)
    z = np.zeros((1, 1), dtype=np.int64)
    return ShiftSpec(g, (0, 0, 0), ("h", "h0", "h"), [0], z, (z, z, z), [coeff])


def test_single_coefficient_shift_value():
    S = _one_record(0.5)
    L = 4
    hq = MeshFunction(np.r_[np.ones(8), -np.ones(8)], L)
    one = MeshFunction(np.ones(16), L)
    # <f, h_Q> = <g, h_Q^0> = <h, h_Q> = 1 on the unit cube
    assert shift_form(S, hq, one, hq) == pytest.approx(0.5, abs=1e-15)
    assert shift_form(S, one, one, hq) == 0.0


def test_normalization_gate():
    with pytest.raises(NormalizationError):
        _one_record(1.01)
    _one_record(1.0)


def test_structure_gate():
    g = standard_grid(1, 4, 0)
    z = np.zeros((1, 1), dtype=np.int64)
    with pytest.raises(LevelError):
        ShiftSpec(g, (4, 0, 0), ("h", "h0", "h"), [0], z, (z, z, z), [0.0])


def test_rho_of_shift(rng):
    S = random_shift(standard_grid(1, 6, 0), 2, 3, 1, rng)
    assert S.rho == 3


def test_apply_matches_form(rng):
    g = standard_grid(1, 6, 0)
    S = random_shift(g, 1, 0, 2, rng)
    f, gg, h = (random_test_function(6, rng) for _ in range(3))
    assert shift_apply(S, f, gg).inner(h) == pytest.approx(shift_form(S, f, gg, h), rel=1e-12)


def test_shift_adjoints(rng):
    g = standard_grid(1, 6, 0)
    S = random_shift(g, 1, 2, 0, rng)
    f, gg, h = (random_test_function(6, rng) for _ in range(3))
    ref = shift_form(S, f, gg, h)
    assert shift_form(shift_adjoint(S, 1), h, gg, f) == pytest.approx(ref, rel=1e-12)
    assert shift_form(shift_adjoint(S, 2), f, h, gg) == pytest.approx(ref, rel=1e-12)
    assert shift_form(shift_adjoint(shift_adjoint(S, 1), 1), f, gg, h) == pytest.approx(ref, rel=1e-12)


def test_carleson_rejection_example():
    g = standard_grid(1, 4, 0)
    # every level-k cube inside [0, 1/2) carries |alpha|^2 = |K| / 2: each level adds 1/2 per |K0|
    lv, cs, al = [], [], []
    for k in range(1, 4):
        side = 1 << (4 - k)
        for c in range(0, 8, side):
            lv.append(k); cs.append(c); al.append(np.sqrt(2.0 ** -k / 2))
    assert carleson_constant(g, np.array(lv), np.array(cs)[:, None], np.array(al)) == pytest.approx(1.5)
    with pytest.raises(NormalizationError):
        ParaproductSpec(g, lv, np.array(cs)[:, None], al)
    P = ParaproductSpec(g, lv[:3], np.array(cs[:3])[:, None], al[:3])
    assert P.carleson_max == pytest.approx(1.0)


@pytest.mark.parametrize("flavor", ["direct", "adjoint-1", "adjoint-2"])
def test_paraproduct_apply_matches_form(flavor, rng):
    g = standard_grid(1, 5, 0)
    lv = np.array([1, 2, 3])
    cs = np.array([[0], [8], [12]])
    al = np.array([0.3, -0.2, 0.1])
    P = ParaproductSpec(g, lv, cs, al, flavor)
    f, gg, h = (random_test_function(5, rng) for _ in range(3))
    # forms are in (f, g, h) slot order for every flavor: <P(f, g), h>
    assert paraproduct_apply(P, f, gg).inner(h) == pytest.approx(paraproduct_form(P, f, gg, h), rel=1e-12)


def test_spec_json_roundtrip(tmp_path, rng):
    g = standard_grid(1, 5, 0)
    S = random_shift(g, 1, 1, 0, rng)
    P = ParaproductSpec(g, [1], [[0]], [0.25], "adjoint-2")
    save_specs(tmp_path / "specs.json", [S, P])
    S2, P2 = load_specs(tmp_path / "specs.json")
    assert np.array_equal(S2.coeffs, S.coeffs) and S2.levels == S.levels
    assert P2.flavor == "adjoint-2" and np.array_equal(P2.coeffs, P.coeffs)


def test_norm_harness_finite(rng):
    g = standard_grid(1, 6, 0)
    S = random_shift(g, 0, 1, 1, rng)
    rep = norm_harness(lambda a, b: shift_apply(S, a, b), 6, 4.0, 4.0, 20, 0)
    assert rep.r == 2.0 and np.isfinite(rep.max_ratio) and rep.max_ratio > 0
