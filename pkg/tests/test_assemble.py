import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from bwh.assemble import (
    QuasiPeriodicSpec,
    assemble_periodic,
    assemble_quasiperiodic,
    check_frequency_matrix,
    deformed_operator,
    periodic_operator,
)
from bwh.bands import lowest_bands
from bwh.errors import ConfigError, NumericalError
from bwh.fields import PeriodicField, build_lattice, free_medium, mathieu_medium, medium_from_dict
from bwh.stochastic import build_perturbed_identity

FOUR_PI_SQ = 4.0 * np.pi**2
GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def tridiagonal_oracle(theta, amplitude, cutoff):
    """Independent Mathieu ground energy: tridiagonal plane-wave matrix.

    Built directly from the quadratic symbol and the two cosine modes,
    without the table assembly path.
    """
    m = np.arange(-cutoff, cutoff + 1)
    diag = FOUR_PI_SQ * (m + theta) ** 2
    off = np.full(2 * cutoff, amplitude / 2.0)
    w = scipy.linalg.eigh_tridiagonal(diag, off, select="i", select_range=(0, 0))[0]
    return float(w[0])


def test_free_diagonal_entry_quarter_theta():
    med = free_medium(dim=1, cutoff=4)
    lat = build_lattice(1, 4)
    H = periodic_operator(med, [0.25], lat).matrix()
    zero = lat.flat_index((0,))
    assert H[zero, zero] == pytest.approx(np.pi**2 / 4.0, abs=1e-12)


def test_free_spectrum_closed_form():
    med = free_medium(dim=1, cutoff=6)
    lat = build_lattice(1, 6)
    theta = 0.31
    H = periodic_operator(med, [theta], lat).matrix()
    w = np.linalg.eigvalsh(H)
    expected = np.sort(FOUR_PI_SQ * (lat.modes[:, 0] + theta) ** 2)
    np.testing.assert_allclose(w, expected, atol=1e-9)


def test_mathieu_off_diagonal_coupling():
    med = mathieu_medium(cutoff=6, amplitude=1.0)
    lat = build_lattice(1, 6)
    H = periodic_operator(med, [0.0], lat).matrix()
    r, c = lat.flat_index((1,)), lat.flat_index((0,))
    assert H[r, c] == pytest.approx(0.5, abs=1e-13)
    assert H[c, r] == pytest.approx(0.5, abs=1e-13)


def test_mathieu_matches_tridiagonal_oracle():
    cutoff = 12
    med = mathieu_medium(cutoff=cutoff, amplitude=1.0)
    lat = build_lattice(1, cutoff)
    for theta in [0.0, 0.3, -0.45]:
        bm = assemble_periodic(med, [theta], lat)
        lam = lowest_bands(bm, 1)[0].lam
        assert lam == pytest.approx(tridiagonal_oracle(theta, 1.0, cutoff), abs=1e-11)


def test_theta_integer_shift_invariance():
    med = mathieu_medium(cutoff=16, amplitude=1.0)
    lat = build_lattice(1, 16)
    lam0 = lowest_bands(assemble_periodic(med, [0.2], lat), 1)[0].lam
    lam1 = lowest_bands(assemble_periodic(med, [1.2], lat), 1)[0].lam
    assert abs(lam1 - lam0) < 1e-10


def test_truncation_doubling_stability():
    lam = {}
    for cutoff in (12, 24):
        med = mathieu_medium(cutoff=cutoff, amplitude=1.0)
        lat = build_lattice(1, cutoff)
        lam[cutoff] = lowest_bands(assemble_periodic(med, [0.1], lat), 1)[0].lam
    assert abs(lam[12] - lam[24]) < 1e-10


def test_dtheta_matches_hellmann_feynman():
    med = mathieu_medium(cutoff=10, amplitude=1.0)
    lat = build_lattice(1, 10)
    theta, h = 0.17, 1e-5
    op = periodic_operator(med, [theta], lat)
    pt = lowest_bands(op.bloch(), 1)[0]
    hf = np.real(np.vdot(pt.coeffs, op.dtheta(0) @ pt.coeffs))
    lam_p = lowest_bands(assemble_periodic(med, [theta + h], lat), 1)[0].lam
    lam_m = lowest_bands(assemble_periodic(med, [theta - h], lat), 1)[0].lam
    assert hf == pytest.approx((lam_p - lam_m) / (2 * h), abs=1e-5)


def test_d2theta_free_medium():
    med = free_medium(dim=1, cutoff=4)
    lat = build_lattice(1, 4)
    op = periodic_operator(med, [0.1], lat)
    d2 = op.d2theta(0, 0)
    assert np.allclose(np.diag(d2), 2 * FOUR_PI_SQ)


@settings(derandomize=True, max_examples=20, deadline=None)
@given(
    st.floats(min_value=-0.49, max_value=0.49),
    st.floats(min_value=-1.5, max_value=1.5),
    st.floats(min_value=-1.5, max_value=1.5),
)
def test_assembled_matrix_hermitian_property(theta, re1, re2):
    med = medium_from_dict(
        {
            "dim": 1,
            "cutoff": 4,
            "V": {"kind": "fourier", "data": [[1, re1 / 2, 0.0], [-1, re1 / 2, 0.0], [2, re2 / 2, 0.0], [-2, re2 / 2, 0.0]]},
        }
    )
    lat = build_lattice(1, 4)
    H = periodic_operator(med, [theta], lat).matrix()
    assert np.max(np.abs(H - H.conj().T)) < 1e-12 * max(1.0, np.max(np.abs(H)))


def test_supercell_folds_cell_bands():
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    cell_lat = build_lattice(1, 8)
    sup_lat = build_lattice(1, 16)
    folded = sorted(
        [lowest_bands(assemble_periodic(med, [0.0], cell_lat), 2)[j].lam for j in range(2)]
        + [lowest_bands(assemble_periodic(med, [0.5], cell_lat), 2)[j].lam for j in range(2)]
    )
    sup = [b.lam for b in lowest_bands(assemble_periodic(med, [0.0], sup_lat, period=2), 4)]
    np.testing.assert_allclose(sup, folded, atol=1e-9)


# ---------------------------------------------------------------------------
# deformed assembly


def _flow_spec(amplitude=0.3):
    return build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "period": 1, "profile": "sine_flow", "amplitude": amplitude}
    )


def test_deformed_at_zero_equals_periodic():
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    lat = build_lattice(1, 8)
    real = _flow_spec().sample_realization()
    H0 = deformed_operator(med, real, 0.0, [0.2], lat).matrix()
    Hp = periodic_operator(med, [0.2], lat).matrix()
    assert np.max(np.abs(H0 - Hp)) < 1e-12


def test_deformed_free_medium_spectrum_invariant():
    # a periodic change of variables cannot move the free spectrum
    med = free_medium(dim=1, cutoff=8)
    lat = build_lattice(1, 8)
    real = _flow_spec(0.4).sample_realization()
    for theta in [0.0, 0.3]:
        op = deformed_operator(med, real, 0.35, [theta], lat)
        bm = op.bloch()
        lam = lowest_bands(bm, 1)[0].lam
        assert lam == pytest.approx(FOUR_PI_SQ * theta**2, abs=1e-9)


def test_deformed_truncation_doubling():
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    real = _flow_spec().sample_realization()
    lam = {}
    for cutoff in (10, 20):
        lat = build_lattice(1, cutoff)
        lam[cutoff] = lowest_bands(deformed_operator(med, real, 0.2, [0.1], lat).bloch(), 1)[0].lam
    assert abs(lam[10] - lam[20]) < 1e-8


def test_deformed_mass_matrix_mean_is_one():
    # det(grad Phi) integrates to the cell volume for a periodic flow
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    lat = build_lattice(1, 8)
    real = _flow_spec().sample_realization()
    M = deformed_operator(med, real, 0.3, [0.0], lat).mass()
    assert M[0, 0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.diag(M), np.ones(lat.flat_size), atol=1e-12)


def test_deformed_degenerate_jacobian_rejected():
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    lat = build_lattice(1, 8)
    real = _flow_spec(1.0).sample_realization()
    with pytest.raises(NumericalError):
        deformed_operator(med, real, 1.2, [0.0], lat)


def test_deformed_period_mismatch_rejected():
    med = mathieu_medium(cutoff=8, amplitude=1.0)
    lat = build_lattice(1, 8)
    real = _flow_spec().sample_realization()
    with pytest.raises(ConfigError):
        deformed_operator(med, real, 0.1, [0.0], lat, period=3)


# ---------------------------------------------------------------------------
# quasi-periodic reduction


def test_quasiperiodic_identity_reproduces_periodic():
    med = mathieu_medium(cutoff=6, amplitude=1.0)
    spec = QuasiPeriodicSpec(freq_matrix=np.eye(1))
    Hq = assemble_quasiperiodic(spec, med, [0.2]).H
    Hp = periodic_operator(med, [0.2], build_lattice(1, 6)).matrix()
    assert np.max(np.abs(Hq - Hp)) < 1e-12


def test_quasiperiodic_identity_with_unit_bper():
    med = mathieu_medium(cutoff=6, amplitude=1.0)
    lat = build_lattice(1, 6)
    bper = PeriodicField.constant(lat, np.eye(1), "matrix")
    spec = QuasiPeriodicSpec(freq_matrix=np.eye(1), b_per=bper)
    Hq = assemble_quasiperiodic(spec, med, [0.2]).H
    Hp = periodic_operator(med, [0.2], lat).matrix()
    assert np.max(np.abs(Hq - Hp)) < 1e-12


def test_golden_ratio_row_matrix_positive():
    report = check_frequency_matrix([[1.0, GOLDEN]], d=2.0, search_radius=6)
    assert report["positive"]
    assert report["finite_set"]


def test_degenerate_frequency_matrix_not_positive():
    # two parallel rows have a singular Gram matrix
    report = check_frequency_matrix([[1.0], [GOLDEN]], d=0.5, search_radius=8)
    assert not report["positive"]


def test_frequency_matrix_witnesses_contain_origin():
    report = check_frequency_matrix([[1.0, GOLDEN]], d=1.0, search_radius=5)
    assert (0, 0) in [tuple(w) for w in report["witnesses"]] or (0,) in report["witnesses"]


def test_quasiperiodic_golden_torus_runs():
    # fields on the 2-torus, physical dimension 1, golden frequency column
    med = medium_from_dict(
        {
            "dim": 2,
            "cutoff": 3,
            "V": {"kind": "fourier", "data": [[1, 0, 0.25, 0.0], [-1, 0, 0.25, 0.0], [0, 1, 0.25, 0.0], [0, -1, 0.25, 0.0]]},
        }
    )
    spec = QuasiPeriodicSpec(freq_matrix=[[1.0], [GOLDEN]])
    bm = assemble_quasiperiodic(spec, med, [0.1])
    w = np.linalg.eigvalsh(bm.H)
    assert np.all(np.isfinite(w))
    assert w[0] < w[1]
