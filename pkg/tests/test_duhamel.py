import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nlhk import duhamel as D
from nlhk import estimates as E
from nlhk.coefficients import rescale
from nlhk.kernels import gaussian_radial, stable_constant

from conftest import A1, coef


@pytest.fixture(scope="module")
def half_a_small(half_a):
    return D.build_series(half_a, D.SpaceTimeGrid(0.05, K=16))


def test_grid_defaults_and_validation():
    g = D.SpaceTimeGrid(0.25)
    assert g.dx == pytest.approx(0.5 / 16) and g.L == pytest.approx(4.0)
    assert g.m == 128 and g.lattice.size == 257
    np.testing.assert_allclose(g.times, 0.25 * np.arange(1, 49) / 48)
    with pytest.raises(ValueError):
        D.SpaceTimeGrid(0.25, L=2.0)
    img = g.scaled(4.0)
    assert (img.T, img.dx, img.m) == (1.0, pytest.approx(2 * g.dx), g.m)


@pytest.mark.parametrize("spec,expected", [
    ({"family": "zero"}, 1.0),
    ({"family": "constant", "params": {"c": 0.5 * A1}}, 0.25),
    ({"family": "indicator", "params": {"M": 1.0, "lambda": 1.0}}, (0.25 / math.pi) ** 2),
    ({"family": "indicator", "params": {"M": -0.2, "r_min": 1.0, "lambda": 2.0}},
     (0.25 / math.pi / 0.2) ** 2),
])
def test_base_horizon(spec, expected):
    assert D.choose_base_horizon(coef(spec)) == pytest.approx(expected, rel=1e-12)


def test_horizon_beyond_base_is_rejected(half_a):
    with pytest.raises(ValueError):
        D.build_series(half_a, D.SpaceTimeGrid(0.5))


def test_noncontraction_is_raised():
    c = coef({"family": "constant", "params": {"c": 20 * A1}})
    with pytest.raises(D.NonContraction):
        D.build_series(c, D.SpaceTimeGrid(1.0, K=16), a0=100.0)


def test_zero_coefficient_extension_stays_gaussian(zero):
    table, _ = D.build_to_time(zero, 0.2, K=16)
    for i, t in enumerate(table.times):
        p0 = gaussian_radial(t, np.abs(table.offsets))
        assert np.max(np.abs(table.values[i] - p0)) < 1e-12 * p0.max()


def test_series_terms_shrink(half_a_small):
    ratios = half_a_small.meta["sup_ratios"]
    assert max(ratios[1:]) < 0.6


def test_first_residual_and_mass(half_a, half_a_small):
    res, _ = D.duhamel_residual(half_a_small, half_a, "first")
    assert res < 1e-9
    assert E.check_conservativeness(half_a_small, half_a).passed


def test_semigroup_and_generator(half_a, half_a_small):
    one = D.apply_semigroup(half_a_small, np.ones_like, 0.05, 0.0, c=half_a)
    assert one[0] == pytest.approx(1.0, abs=2e-3)
    f = lambda x: np.exp(-x ** 2)
    lap = lambda x: (4 * x ** 2 - 2) * np.exp(-x ** 2)
    assert D.generator_check(half_a_small, half_a, f, lap) < 1e-3


def test_x_dependent_build_mass():
    p = coef({"family": "product", "params": {"amplitude": {"mean": 0.2, "osc": 0.1, "freq": 1.0},
                                               "profile": {"kind": "constant"}}})
    tab = D.build_series(p, D.SpaceTimeGrid(0.05, K=16))
    assert not tab.translation_invariant and tab.values.shape == (16, 257, 257)
    assert E.check_conservativeness(tab, p).passed
    res, _ = D.duhamel_residual(tab, p, "first")
    assert res < 1e-9


def test_two_dimensional_build_mass():
    c = coef({"family": "constant", "params": {"c": 0.5 * stable_constant(2, 1.0)}}, d=2)
    tab = D.build_series(c, D.SpaceTimeGrid(0.05, K=8, d=2))
    assert tab.values.shape[1:] == (193, 193)
    assert E.check_conservativeness(tab, c).passed


def test_scaling_transfer_rejects_foreign_grid(half_a):
    lam = 4.0
    image = D.build_series(rescale(half_a, lam), D.SpaceTimeGrid(0.05, K=8).scaled(lam))
    with pytest.raises(D.GridMismatch):
        D.scaling_transfer(image, lam, D.SpaceTimeGrid(0.05, K=16))


def test_extension_rejects_bad_target(half_a_small):
    with pytest.raises(ValueError):
        D.extend_time(half_a_small, 0.2)


def test_table_file_round_trip(tmp_path, half_a_small):
    p = tmp_path / "q.nlhk"
    half_a_small.save(p)
    back = D.KernelTable.load(p)
    assert p.read_bytes()[:4] == b"NLHK"
    np.testing.assert_array_equal(back.values, half_a_small.values)
    np.testing.assert_array_equal(back.times, half_a_small.times)
    assert (back.dx, back.m, back.d, back.beta) == (half_a_small.dx, half_a_small.m, 1, 1.0)


def test_table_rejects_foreign_bytes(half_a_small):
    blob = half_a_small.to_bytes()
    with pytest.raises(ValueError):
        D.KernelTable.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        D.KernelTable.from_bytes(blob[:4] + (99).to_bytes(4, "little") + blob[8:])


def test_csv_slices(tmp_path, half_a_small):
    p = tmp_path / "q.csv"
    half_a_small.to_csv(p, every=8)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert p.read_text().splitlines()[0] == "t,x,y,q"
    assert data.shape[1] == 4 and data[:, 0].min() > 0


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 6), K=st.integers(1, 4), ti=st.booleans(), data=st.data())
def test_round_trip_property(m, K, ti, data):
    n = 4 * m + 1 if ti else 2 * m + 1
    vals = data.draw(arrays(np.float64, (K, n, n) if not ti else (K, n),
                            elements=st.floats(-1e6, 1e6, allow_nan=False)))
    times = np.sort(data.draw(arrays(np.float64, K, elements=st.floats(1e-6, 1.0),
                                     unique=True)))
    tab = D.KernelTable(times, 0.1, m, 1, 1.0, vals, ti)
    back = D.KernelTable.from_bytes(tab.to_bytes())
    np.testing.assert_array_equal(back.values, vals)
    np.testing.assert_array_equal(back.times, times)
    assert back.translation_invariant == ti
