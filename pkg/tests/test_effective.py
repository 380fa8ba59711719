import dataclasses

import numpy as np
import pytest

from bwh.cell_problems import first_auxiliary, first_order_correctors
from bwh.effective import (
    EIGHT_PI_SQ,
    effective_coefficients,
    find_critical,
    quasi_perfect_series,
    supercell_oracle,
    wrap_theta,
)
from bwh.errors import NumericalError
from bwh.fields import build_lattice, free_medium, mathieu_medium, medium_from_dict
from bwh.stochastic import build_perturbed_identity


def _flow_spec(amplitude=0.3):
    return build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "period": 1, "profile": "sine_flow", "amplitude": amplitude}
    )


def test_wrap_theta_half_open():
    np.testing.assert_allclose(wrap_theta(np.array([0.7])), [-0.3])
    np.testing.assert_allclose(wrap_theta(np.array([-0.5])), [-0.5])
    np.testing.assert_allclose(wrap_theta(np.array([0.5])), [-0.5])


def test_free_medium_effective_data():
    med = medium_from_dict({"dim": 1, "cutoff": 4, "U": 0.3})
    pt = find_critical(med, band=0, theta_init=[0.0])
    aux = first_auxiliary(med, pt)
    eff = effective_coefficients(med, pt, aux)
    assert abs(pt.lam) < 1e-12
    assert eff.A_star[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert eff.U_star == pytest.approx(0.3, abs=1e-10)
    assert eff.c_psi == pytest.approx(1.0, abs=1e-10)


def test_mathieu_critical_point_from_offset_start(mathieu):
    pt = find_critical(mathieu, band=0, theta_init=[0.07])
    assert abs(pt.theta[0]) < 1e-8
    assert pt.lam < 0.0


def test_effective_route_discrepancy_small(mathieu_eff):
    assert mathieu_eff.route_discrepancy < 1e-5
    routes = mathieu_eff.routes
    vals = [routes[k] for k in sorted(routes)]
    for i in range(len(vals)):
        for j in range(len(vals)):
            num = np.max(np.abs(np.asarray(vals[i]) - np.asarray(vals[j])))
            den = max(1.0, np.max(np.abs(np.asarray(vals[i]))))
            assert num / den < 1e-5


def test_effective_tensor_positive(mathieu_eff):
    w = np.linalg.eigvalsh(mathieu_eff.A_star)
    assert np.all(w > 0)


def test_u_star_is_weighted_mean(mathieu_u):
    pt = find_critical(mathieu_u, band=0, theta_init=[0.0])
    aux = first_auxiliary(mathieu_u, pt)
    eff = effective_coefficients(mathieu_u, pt, aux)
    # independent quadrature of int U |psi|^2 / int |psi|^2
    npts = 256
    u = mathieu_u.U.on_grid(npts).real
    psi = pt.psi.on_grid(npts)
    expected = float(np.mean(u * np.abs(psi) ** 2) / np.mean(np.abs(psi) ** 2))
    assert eff.U_star == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# order-eta series


def test_series_lambda1_and_a1_against_supercell(mathieu, mathieu_point, mathieu_aux):
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)
    series = quasi_perfect_series(mathieu, mathieu_point, mathieu_aux, cors, dspec.egrad_z, dspec.ediv_z)
    table = supercell_oracle(
        mathieu,
        dspec.sample_realization(),
        [0.04, 0.02, 0.01],
        band=0,
        period=1,
        lattice=build_lattice(1, 16),
        series=series,
    )
    for slope in table.lambda_slopes + table.a_slopes:
        assert 1.8 <= slope <= 2.2


def test_series_gauge_covariance(mathieu, mathieu_point, mathieu_aux):
    # shifting psi1 along psi (with xi1 shifted along xi) is a reparametrization
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)
    base = quasi_perfect_series(mathieu, mathieu_point, mathieu_aux, cors, dspec.egrad_z, dspec.ediv_z)
    lattice = mathieu_point.psi.lattice
    shape = lattice.grid_shape()
    for alpha in (1.0, -0.7, 0.3 + 0.4j):
        psi1 = cors.psi1_coeffs + alpha * mathieu_point.coeffs
        xi1 = [c + alpha * x for c, x in zip(cors.xi1_coeffs, mathieu_aux.coeffs)]
        shifted = dataclasses.replace(
            cors,
            psi1=type(mathieu_point.psi)(lattice, psi1.reshape(shape)),
            xi1=[type(mathieu_point.psi)(lattice, c.reshape(shape)) for c in xi1],
            psi1_coeffs=psi1,
            xi1_coeffs=xi1,
        )
        moved = quasi_perfect_series(
            mathieu, mathieu_point, mathieu_aux, shifted, dspec.egrad_z, dspec.ediv_z, check_gauge=False
        )
        assert np.max(np.abs(moved.A1 - base.A1)) < 1e-8
        assert moved.U1 == pytest.approx(base.U1, abs=1e-8)
        assert moved.lambda1 == pytest.approx(base.lambda1, abs=1e-12)


def test_series_gauge_check_flags_shifted_correctors(mathieu, mathieu_point, mathieu_aux):
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)
    lattice = mathieu_point.psi.lattice
    shape = lattice.grid_shape()
    psi1 = cors.psi1_coeffs + 0.5 * mathieu_point.coeffs
    shifted = dataclasses.replace(
        cors,
        psi1=type(mathieu_point.psi)(lattice, psi1.reshape(shape)),
        psi1_coeffs=psi1,
    )
    with pytest.raises(NumericalError):
        quasi_perfect_series(mathieu, mathieu_point, mathieu_aux, shifted, dspec.egrad_z, dspec.ediv_z)


def test_cyclic_supercell_series_second_order(mathieu):
    dspec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 2,
            "profile": "sine",
            "amplitudes": [[0.25], [0.1]],
            "word": "alternating",
        }
    )
    pt = find_critical(mathieu, band=0, theta_init=[0.0])
    aux = first_auxiliary(mathieu, pt)
    cors = first_order_correctors(mathieu, pt, aux, dspec.egrad_z, dspec.ediv_z)
    series = quasi_perfect_series(mathieu, pt, aux, cors, dspec.egrad_z, dspec.ediv_z)
    table = supercell_oracle(
        mathieu,
        dspec.sample_realization(),
        [0.04, 0.02],
        band=0,
        period=2,
        lattice=build_lattice(1, 20),
        series=series,
    )
    for slope in table.lambda_slopes + table.a_slopes:
        assert 1.8 <= slope <= 2.2


def test_oracle_rows_shift_invariant(mathieu):
    # the two realizations of a cyclic p=2 word see the same spectrum
    dspec = build_perturbed_identity(
        {
            "kind": "cyclic",
            "dim": 1,
            "period": 2,
            "profile": "sine",
            "amplitudes": [[0.25], [0.1]],
            "word": "alternating",
        }
    )
    lat = build_lattice(1, 20)
    lams = []
    for omega in dspec.system.all_states():
        table = supercell_oracle(mathieu, dspec.sample_realization(omega), [0.05], band=0, period=2, lattice=lat)
        lams.append(table.rows[-1].lam)
    assert lams[0] == pytest.approx(lams[1], abs=1e-10)
