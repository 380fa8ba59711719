import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bwh.errors import ConfigError
from bwh.fields import (
    CellMedium,
    PeriodicField,
    analyze_grid,
    build_lattice,
    free_medium,
    mathieu_medium,
    medium_from_dict,
    synth_grid,
)


def test_lattice_shape_and_size():
    lat = build_lattice(2, 3)
    assert lat.side == 7
    assert lat.flat_size == 49
    assert lat.modes.shape == (49, 2)
    assert lat.grid_shape() == (7, 7)


def test_lattice_index_round_trip():
    lat = build_lattice(2, 4)
    for mode in [(-4, -4), (0, 0), (3, -2), (4, 4)]:
        assert lat.mode_of(lat.flat_index(mode)) == mode


@settings(derandomize=True, max_examples=25, deadline=None)
@given(st.integers(min_value=-3, max_value=3), st.integers(min_value=-3, max_value=3))
def test_lattice_index_round_trip_property(m1, m2):
    lat = build_lattice(2, 3)
    assert lat.mode_of(lat.flat_index((m1, m2))) == (m1, m2)


def test_synth_analyze_round_trip_1d():
    rng = np.random.default_rng(0)
    cut = 3
    coeffs = rng.normal(size=2 * cut + 1) + 1j * rng.normal(size=2 * cut + 1)
    grid = synth_grid(coeffs, cut, 32, 1)
    back = analyze_grid(grid, cut, 1)
    np.testing.assert_allclose(back, coeffs, atol=1e-13)


def test_synth_analyze_round_trip_2d():
    rng = np.random.default_rng(1)
    cut = 2
    coeffs = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    grid = synth_grid(coeffs, cut, 16, 2)
    back = analyze_grid(grid, cut, 2)
    np.testing.assert_allclose(back, coeffs, atol=1e-13)


@settings(derandomize=True, max_examples=25, deadline=None)
@given(st.lists(st.floats(min_value=-2, max_value=2), min_size=10, max_size=10))
def test_synth_analyze_round_trip_property(vals):
    cut = 2
    coeffs = np.asarray(vals[:5]) + 1j * np.asarray(vals[5:])
    back = analyze_grid(synth_grid(coeffs, cut, 16, 1), cut, 1)
    np.testing.assert_allclose(back, coeffs, atol=1e-12)


def test_synth_grid_stride_places_modes_on_supercell():
    # one cell-frequency mode becomes a p-th supercell harmonic
    coeffs = np.zeros(3, dtype=complex)
    coeffs[2] = 1.0  # mode +1 of the cell
    p = 3
    direct = synth_grid(coeffs, 1, 48, 1, stride=p)
    x = np.arange(48) / 48.0
    np.testing.assert_allclose(direct, np.exp(2j * np.pi * 3 * x), atol=1e-12)


def test_from_callable_cosine():
    lat = build_lattice(1, 4)
    f = PeriodicField.from_callable(lat, lambda y: np.cos(2 * np.pi * y))
    assert abs(f.coeffs[lat.cutoff + 1] - 0.5) < 1e-12
    assert abs(f.coeffs[lat.cutoff - 1] - 0.5) < 1e-12
    assert abs(f.mean()) < 1e-13
    assert f.is_real()


def test_mean_is_zero_mode():
    lat = build_lattice(1, 2)
    coeffs = np.zeros(5, dtype=complex)
    coeffs[2] = 1.75
    f = PeriodicField(lat, coeffs)
    assert f.mean() == pytest.approx(1.75)


def test_free_medium_is_identity_and_zero():
    med = free_medium(dim=1, cutoff=4)
    assert med.A.coeffs[0, 0, 4] == pytest.approx(1.0)
    assert np.all(med.V.coeffs == 0)
    med.validate()


def test_mathieu_medium_coefficients():
    med = mathieu_medium(cutoff=8, amplitude=2.0)
    assert med.V.coeffs[9] == pytest.approx(1.0)
    assert med.V.coeffs[7] == pytest.approx(1.0)
    med.validate()


def test_medium_from_dict_constants_and_fourier():
    med = medium_from_dict(
        {
            "dim": 1,
            "cutoff": 4,
            "A": 2.0,
            "V": {"kind": "fourier", "data": [[1, 0.5, 0.0], [-1, 0.5, 0.0]]},
            "U": 0.25,
        }
    )
    assert med.A.coeffs[0, 0, 4] == pytest.approx(2.0)
    assert med.V.coeffs[5] == pytest.approx(0.5)
    assert med.U.mean() == pytest.approx(0.25)


def test_medium_from_dict_missing_cutoff():
    with pytest.raises(ConfigError):
        medium_from_dict({"dim": 1})


def test_medium_from_dict_mode_outside_cutoff():
    with pytest.raises(ConfigError):
        medium_from_dict({"dim": 1, "cutoff": 2, "V": {"kind": "fourier", "data": [[3, 1.0, 0.0]]}})


def test_medium_from_dict_rejects_complex_valued_field():
    # a lone +1 mode breaks the conjugate symmetry of a real field
    with pytest.raises(ConfigError):
        medium_from_dict({"dim": 1, "cutoff": 2, "V": {"kind": "fourier", "data": [[1, 1.0, 0.0]]}})


def test_medium_grid_kind_round_trip():
    x = np.arange(32) / 32.0
    med = medium_from_dict(
        {
            "dim": 1,
            "cutoff": 4,
            "V": {"kind": "grid", "data": list(np.cos(2 * np.pi * x))},
        }
    )
    assert med.V.coeffs[5] == pytest.approx(0.5, abs=1e-12)


def test_non_coercive_medium_rejected():
    lat = build_lattice(1, 2)
    a = PeriodicField.constant(lat, -1.0 * np.eye(1), "matrix")
    v = PeriodicField.constant(lat, 0.0)
    with pytest.raises((ConfigError, Exception)):
        CellMedium(A=a, V=v, U=v, coercivity=1.0).validate()
