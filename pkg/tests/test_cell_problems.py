import numpy as np
import pytest
import scipy.linalg

from bwh.assemble import assemble_periodic, periodic_operator
from bwh.cell_problems import (
    constrained_solve_vec,
    discrete_hessian,
    first_auxiliary,
    first_order_correctors,
    hessian_via_sac,
    hf_gradient,
)
from bwh.effective import EIGHT_PI_SQ, fd_hessian, find_critical
from bwh.errors import NumericalError, SolvabilityError
from bwh.fields import build_lattice, free_medium, mathieu_medium
from bwh.stochastic import build_perturbed_identity

FOUR_PI_SQ = 4.0 * np.pi**2


def _flow_spec(amplitude=0.3):
    return build_perturbed_identity(
        {"kind": "deterministic", "dim": 1, "period": 1, "profile": "sine_flow", "amplitude": amplitude}
    )


# ---------------------------------------------------------------------------
# constrained solves


def test_constrained_solve_small_system():
    H = np.diag([0.0, 1.0, 3.0]).astype(complex)
    kernel = np.array([1.0, 0.0, 0.0], dtype=complex)[:, None]
    rhs = np.array([0.0, 2.0, 3.0], dtype=complex)
    u = constrained_solve_vec(H, None, 0.0, kernel, rhs)
    np.testing.assert_allclose(u, [0.0, 2.0, 1.0], atol=1e-12)


def test_constrained_solve_rejects_kernel_component():
    H = np.diag([0.0, 1.0]).astype(complex)
    kernel = np.array([1.0, 0.0], dtype=complex)[:, None]
    rhs = np.array([0.5, 1.0], dtype=complex)
    with pytest.raises(SolvabilityError):
        constrained_solve_vec(H, None, 0.0, kernel, rhs)


def test_constrained_solution_perpendicular_to_kernel():
    rng = np.random.default_rng(7)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6)))
    w = np.array([0.0, 0.5, 1.0, 2.0, 3.0, 5.0])
    H = (q * w) @ q.conj().T
    kernel = q[:, :1]
    rhs = H @ rng.normal(size=6)  # in the range by construction
    u = constrained_solve_vec(H, None, 0.0, kernel, rhs)
    assert abs(np.vdot(kernel[:, 0], u)) < 1e-10


# ---------------------------------------------------------------------------
# auxiliary fields and Hessian routes


def test_auxiliary_gauge_and_gradient(mathieu, mathieu_point, mathieu_aux):
    assert np.max(np.abs(mathieu_aux.gauge)) < 1e-10
    assert np.max(np.abs(mathieu_aux.grad_lambda)) < 1e-8


def test_auxiliary_rejects_degenerate_branch():
    med = free_medium(dim=1, cutoff=4)
    lat = build_lattice(1, 4)
    from bwh.bands import lowest_bands

    pts = lowest_bands(assemble_periodic(med, [0.0], lat), 2)
    with pytest.raises(NumericalError):
        first_auxiliary(med, pts[1])  # modes +-1 are degenerate at theta = 0


def test_hf_gradient_vanishes_at_critical_point(mathieu, mathieu_point):
    op = periodic_operator(mathieu, mathieu_point.theta, mathieu_point.psi.lattice)
    g = hf_gradient(op, mathieu_point.coeffs)
    assert np.max(np.abs(g)) < 1e-8


def test_discrete_hessian_free_medium():
    med = free_medium(dim=1, cutoff=4)
    lat = build_lattice(1, 4)
    op = periodic_operator(med, [0.0], lat)
    from bwh.bands import lowest_bands

    pt = lowest_bands(op.bloch(), 1)[0]
    hess = discrete_hessian(op, pt.coeffs, pt.lam)
    assert hess[0, 0] == pytest.approx(EIGHT_PI_SQ, rel=1e-10)


def test_hessian_three_routes_agree(mathieu, mathieu_point, mathieu_aux):
    op = periodic_operator(mathieu, mathieu_point.theta, mathieu_point.psi.lattice)
    disc = discrete_hessian(op, mathieu_point.coeffs, mathieu_point.lam)[0, 0]
    fd = fd_hessian(mathieu, 0, mathieu_point.theta, mathieu_point.psi.lattice)[0, 0]
    # the s.a.c. identity yields D2(lambda) / (4 pi^2)
    sac = FOUR_PI_SQ * hessian_via_sac(mathieu, mathieu_point, mathieu_aux)[0, 0]
    assert disc == pytest.approx(fd, rel=1e-6)
    assert disc == pytest.approx(sac, rel=1e-8)


def test_discrete_hessian_matches_independent_fd_oracle(mathieu, mathieu_point):
    # second difference of the tridiagonal oracle, fully outside the package
    cutoff = 12
    h = 1e-3

    def lam(theta):
        m = np.arange(-cutoff, cutoff + 1)
        diag = FOUR_PI_SQ * (m + theta) ** 2
        off = np.full(2 * cutoff, 0.5)
        return scipy.linalg.eigh_tridiagonal(diag, off, select="i", select_range=(0, 0))[0][0]

    oracle = (lam(h) - 2 * lam(0.0) + lam(-h)) / h**2
    op = periodic_operator(mathieu, mathieu_point.theta, mathieu_point.psi.lattice)
    disc = discrete_hessian(op, mathieu_point.coeffs, mathieu_point.lam)[0, 0]
    assert disc == pytest.approx(oracle, rel=1e-5)


# ---------------------------------------------------------------------------
# first-order correctors


def test_theta1_pinned_to_zero_by_symmetry(mathieu, mathieu_point, mathieu_aux):
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)
    assert np.max(np.abs(cors.theta1)) < 1e-10
    assert cors.solvability < 1e-8


def test_lambda1_matches_supercell_fd(mathieu, mathieu_point, mathieu_aux):
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)

    from bwh.assemble import deformed_operator
    from bwh.effective import newton_critical

    real = dspec.sample_realization()
    lat = build_lattice(1, 16)
    h = 1e-4
    lams = {}
    for s in (h, -h):
        op = deformed_operator(mathieu, real, s, [0.0], lat)
        _, lam, _, _ = newton_critical(op, 0, np.zeros(1))
        lams[s] = lam
    fd = (lams[h] - lams[-h]) / (2 * h)
    assert cors.lambda1 == pytest.approx(fd, abs=1e-6)


def test_corrector_fields_solve_their_equations(mathieu, mathieu_point, mathieu_aux):
    # residual check of (H - lam) psi1 = Y psi + lam1 psi
    dspec = _flow_spec()
    cors = first_order_correctors(mathieu, mathieu_point, mathieu_aux, dspec.egrad_z, dspec.ediv_z)

    from bwh.cell_problems import deformation_tables, eta_derivative_matrices

    op = periodic_operator(mathieu, mathieu_point.theta, mathieu_point.psi.lattice)
    tabs = deformation_tables(mathieu, dspec.egrad_z, dspec.ediv_z, mathieu_point.psi.lattice)
    dH, dM, _ = eta_derivative_matrices(op, tabs)
    Y = -dH + mathieu_point.lam * dM
    psi = mathieu_point.coeffs
    H = op.matrix()
    res = (H - mathieu_point.lam * np.eye(H.shape[0])) @ cors.psi1_coeffs - (Y @ psi + cors.lambda1 * psi)
    assert np.linalg.norm(res) < 1e-9


def test_forced_theta1_breaks_solvability(mathieu, mathieu_point, mathieu_aux):
    # moving theta1 off the solvability root must break the xi1 solves
    dspec = _flow_spec()
    from bwh.cell_problems import deformation_tables, eta_derivative_matrices
    from bwh.cell_problems import constrained_solve_vec as solve

    op = periodic_operator(mathieu, mathieu_point.theta, mathieu_point.psi.lattice)
    lat = mathieu_point.psi.lattice
    tabs = deformation_tables(mathieu, dspec.egrad_z, dspec.ediv_z, lat)
    dH, dM, dD = eta_derivative_matrices(op, tabs)
    Y = -dH + mathieu_point.lam * dM
    psi = mathieu_point.coeffs
    H = op.matrix()
    lam1 = float(np.real(-np.vdot(psi, Y @ psi)))
    psi10 = solve(H, None, mathieu_point.lam, psi[:, None], Y @ psi + lam1 * psi)

    theta1_bad = 0.05  # the true root is 0 by parity
    two_i_pi = 2j * np.pi
    psi1 = psi10 + two_i_pi * theta1_bad * mathieu_aux.coeffs[0]
    rhs = two_i_pi * ((Y + lam1 * np.eye(H.shape[0])) @ mathieu_aux.coeffs[0])
    rhs -= two_i_pi * theta1_bad * (op.dtheta(0) @ mathieu_aux.coeffs[0])
    rhs -= theta1_bad * (op.d2theta(0, 0) @ psi)
    rhs -= dD[0] @ psi
    rhs -= op.dtheta(0) @ psi1
    with pytest.raises(SolvabilityError):
        solve(H, None, mathieu_point.lam, psi[:, None], rhs)


def test_correctors_require_critical_point(mathieu):
    dspec = _flow_spec()
    lat = build_lattice(1, 8)
    from bwh.bands import lowest_bands

    pt = lowest_bands(assemble_periodic(mathieu, [0.2], lat), 1)[0]  # not critical
    aux_like = first_auxiliary(mathieu, pt)
    with pytest.raises(NumericalError):
        first_order_correctors(mathieu, pt, aux_like, dspec.egrad_z, dspec.ediv_z)
