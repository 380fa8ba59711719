"""Constrained cell-problem solves and first-order corrector fields.

Everything here works in the Galerkin coefficient space of an assembled
operator.  The central objects are:

* the pseudo-inverse solve of (H - lambda*M) restricted to the complement of
  the eigenspace (Fredholm alternative enforced explicitly),
* the auxiliary fields xi_k = (2 i pi)^-1 d(psi)/d(theta_k), obtained by
  differentiating the eigenproblem in theta with the Hellmann-Feynman
  gradient inserted so solvability holds to solver precision,
* the first-order (in the deformation amplitude eta) corrections
  (lambda1, theta1, psi1, xi1) of a critical Bloch branch, driven by the
  mean deformation statistics E[grad Z] and E[div Z].

The eta-derivative of the assembled pencil is used in weak form: with
G = I + eta*gradZ the tables differentiate to

    d(H)/d(eta)|_0   : -gradZ^T A - A gradZ + A divZ   (gradient block)
                        V divZ                          (potential block)
    d(M)/d(eta)|_0   : divZ

and the corrector operator is Y = -dH + lambda*dM, so that
lambda1 = -<Y psi, psi> coincides with the exact discrete derivative of the
generalized eigenvalue, making supercell difference quotients converge at
O(eta^2) for any cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assemble import (
    FOUR_PI_SQ,
    BlochMatrix,
    CellOperator,
    PairingBuilder,
    matfield_product,
    periodic_operator,
    place_in_diff,
    scalfield_product,
)
from .bands import BandPoint, multiplicity
from .errors import ConfigError, NumericalError, SolvabilityError
from .fields import CellMedium, PeriodicField, synth_grid

SOLVABILITY_TOL = 1e-8
RESIDUAL_RTOL = 1e-9
TWO_I_PI = 2j * math.pi


def _ip(f: np.ndarray, g: np.ndarray) -> complex:
    """<f, g> = integral of f * conj(g) in coefficient space."""
    return complex(np.vdot(g, f))


def constrained_solve_vec(
    H: np.ndarray,
    M: np.ndarray | None,
    lam: float,
    kernel: np.ndarray,
    rhs: np.ndarray,
) -> np.ndarray:
    """Minimal-norm u with (H - lam*M)u = rhs and kernel^H M u = 0.

    `kernel` holds M-orthonormal eigenvectors as columns.  The Fredholm
    condition rhs perp kernel is checked first; the bordered system then
    pins the complement uniquely.
    """
    kernel = np.atleast_2d(kernel.T).T if kernel.ndim == 1 else kernel
    scale = max(1.0, float(np.linalg.norm(rhs)))
    proj = kernel.conj().T @ rhs
    if np.max(np.abs(proj), initial=0.0) > SOLVABILITY_TOL * scale:
        raise SolvabilityError(
            f"right-hand side has kernel component {np.max(np.abs(proj)):.3e} "
            f"(tolerance {SOLVABILITY_TOL:.0e} * {scale:.3e})"
        )
    size = H.shape[0]
    nk = kernel.shape[1]
    mk = kernel if M is None else M @ kernel
    A = np.zeros((size + nk, size + nk), dtype=complex)
    A[:size, :size] = H - (lam * (M if M is not None else np.eye(size)))
    A[:size, size:] = mk
    A[size:, :size] = mk.conj().T
    b = np.concatenate([rhs, np.zeros(nk)])
    try:
        sol = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular bordered system in constrained solve") from exc
    u = sol[:size]
    res = np.linalg.norm((H @ u - lam * (u if M is None else M @ u)) - rhs)
    if res > RESIDUAL_RTOL * scale:
        raise NumericalError(f"constrained solve residual {res:.3e} exceeds {RESIDUAL_RTOL:.0e} * {scale:.3e}")
    return u


def constrained_solve(matrix: BlochMatrix, lam: float, kernel_basis, rhs) -> PeriodicField:
    """Field-level wrapper around the coefficient-space constrained solve."""
    if isinstance(rhs, PeriodicField):
        lattice = rhs.lattice
        rvec = rhs.coeffs.reshape(-1)
    else:
        lattice = matrix.operator.lattice if matrix.operator is not None else None
        rvec = np.asarray(rhs, dtype=complex).reshape(-1)
    if np.isscalar(kernel_basis) or isinstance(kernel_basis, np.ndarray) and kernel_basis.ndim <= 2:
        kmat = np.asarray(kernel_basis, dtype=complex)
        if kmat.ndim == 1:
            kmat = kmat[:, None]
    else:
        cols = [k.coeffs.reshape(-1) if isinstance(k, PeriodicField) else np.asarray(k) for k in kernel_basis]
        kmat = np.stack(cols, axis=1)
    u = constrained_solve_vec(matrix.H, matrix.M, lam, kmat, rvec)
    if lattice is None:
        raise ConfigError("cannot rebuild a field without lattice information")
    return PeriodicField(lattice, u.reshape(lattice.grid_shape()))


@dataclass
class AuxiliaryFields:
    """xi_k = (2 i pi)^-1 d(psi)/d(theta_k) with zero gauge against psi."""

    xi: list[PeriodicField]
    gauge: np.ndarray
    grad_lambda: np.ndarray
    coeffs: list[np.ndarray] = field(repr=False, default=None)


def _point_operator(medium: CellMedium, point: BandPoint) -> CellOperator:
    return periodic_operator(medium, point.theta, point.psi.lattice)


def hf_gradient(op: CellOperator, psi: np.ndarray, mass: np.ndarray | None = None) -> np.ndarray:
    """Hellmann-Feynman band gradient <D_k psi, psi> / <M psi, psi>."""
    mpsi = psi if mass is None else mass @ psi
    den = np.real(np.vdot(psi, mpsi))
    return np.array([np.real(np.vdot(psi, op.dtheta(k) @ psi)) / den for k in range(op.n)])


def first_auxiliary(medium: CellMedium, point: BandPoint) -> AuxiliaryFields:
    """Solve the n auxiliary equations (H - lam)(2 i pi xi_k) = -(D_k - d_k lam) psi.

    Requires a simple eigenvalue; the Hellmann-Feynman gradient makes the
    right-hand side orthogonal to psi exactly, so the constrained solve is
    well posed.
    """
    op = _point_operator(medium, point)
    bm = op.bloch()
    lam = point.lam
    if multiplicity(bm, lam, max(1e-7, 1e-10 * abs(lam))) != 1:
        raise NumericalError(f"eigenvalue {lam:.6g} is not simple; auxiliary equations need a simple branch")
    psi = point.coeffs
    grad = hf_gradient(op, psi)
    xi_coeffs = []
    gauges = []
    for k in range(op.n):
        rhs = -(op.dtheta(k) @ psi) + grad[k] * psi
        u = constrained_solve_vec(bm.H, bm.M, lam, psi[:, None], rhs)
        xik = u / TWO_I_PI
        xi_coeffs.append(xik)
        gauges.append(_ip(xik, psi))
    lattice = point.psi.lattice
    fields = [PeriodicField(lattice, c.reshape(lattice.grid_shape())) for c in xi_coeffs]
    gauges = np.asarray(gauges)
    if np.max(np.abs(gauges), initial=0.0) > 1e-10:
        raise NumericalError("auxiliary gauge <xi_k, psi> not zeroed")
    return AuxiliaryFields(xi=fields, gauge=gauges, grad_lambda=grad, coeffs=xi_coeffs)


# ---------------------------------------------------------------------------
# grid quadrature helpers


def _quadrature_npts(medium: CellMedium, lattice) -> int:
    return 2 * (medium.cutoff + 2 * lattice.cutoff) + 2


def _shifted_grad(coeffs: np.ndarray, lattice, theta: np.ndarray, npts: int) -> np.ndarray:
    """(grad + 2 i pi theta) of a coefficient vector, sampled on the grid."""
    modes = lattice.modes
    vec = TWO_I_PI * (modes + theta[None, :])  # (F, n)
    out = np.empty((lattice.dim,) + (npts,) * lattice.dim, dtype=complex)
    for i in range(lattice.dim):
        comp = (vec[:, i] * coeffs).reshape(lattice.grid_shape())
        out[i] = synth_grid(comp, lattice.cutoff, npts, lattice.dim)
    return out


def hessian_via_sac(medium: CellMedium, point: BandPoint, aux: AuxiliaryFields) -> np.ndarray:
    """(1/4 pi^2) D^2 lambda at a critical frequency from the bilinear identity.

    Testing the second auxiliary equation with psi collapses the Hessian to
    six A-weighted brackets of (psi, xi); the gradient terms vanish at a
    critical theta, which is checked first.  The free medium returns 2*I.
    """
    if np.max(np.abs(aux.grad_lambda)) > 1e-8:
        raise NumericalError(f"band gradient {aux.grad_lambda} is not zero; identity requires a critical point")
    lattice = point.psi.lattice
    n = lattice.dim
    theta = point.theta
    npts = _quadrature_npts(medium, lattice)
    a = synth_grid(medium.A.coeffs, medium.A.lattice.cutoff, npts, n).real
    psi_g = synth_grid(point.psi.coeffs, lattice.cutoff, npts, n)
    gpsi = _shifted_grad(point.coeffs, lattice, theta, npts)
    mass = float(np.mean(np.abs(psi_g) ** 2))
    xi_g = [synth_grid(c.reshape(lattice.grid_shape()), lattice.cutoff, npts, n) for c in aux.coeffs]
    gxi = [_shifted_grad(c, lattice, theta, npts) for c in aux.coeffs]

    def a_dot(vec_l, vec_r):
        av = np.einsum("ij...,j...->i...", a, vec_l)
        return np.mean(np.sum(av * np.conj(vec_r), axis=0))

    def embed(component_field, k):
        e = np.zeros((n,) + component_field.shape, dtype=complex)
        e[k] = component_field
        return e

    out = np.empty((n, n), dtype=complex)
    for k in range(n):
        for l in range(n):
            t = -a_dot(embed(xi_g[k], l), gpsi)
            t -= a_dot(embed(xi_g[l], k), gpsi)
            t += a_dot(gxi[k], embed(psi_g, l))
            t += a_dot(gxi[l], embed(psi_g, k))
            t += a_dot(embed(psi_g, k), embed(psi_g, l))
            t += a_dot(embed(psi_g, l), embed(psi_g, k))
            out[k, l] = t / mass
    if np.max(np.abs(out.imag)) > 1e-10 * max(1.0, np.max(np.abs(out.real))):
        raise NumericalError("Hessian identity produced a nonreal matrix")
    res = out.real
    if np.max(np.abs(res - res.T)) > 1e-12 * max(1.0, np.max(np.abs(res))):
        raise NumericalError("Hessian identity lost k/l symmetry")
    return 0.5 * (res + res.T)


def discrete_hessian(op: CellOperator, psi: np.ndarray, lam: float, mass: np.ndarray | None = None) -> np.ndarray:
    """Exact Hessian of the discrete band via first-order response.

    lambda_kl = <H_kl psi, psi> + 2 Re <D_k psi_l, psi> with psi_l the
    constrained derivative of the eigenvector.  Valid at critical points of
    simple branches (used for the theta1 system and the Newton search).
    """
    n = op.n
    H = op.matrix()
    M = mass
    grad = hf_gradient(op, psi, M)
    dpsi = []
    for l in range(n):
        mpsi = psi if M is None else M @ psi
        rhs = -(op.dtheta(l) @ psi) + grad[l] * mpsi
        dpsi.append(constrained_solve_vec(H, M, lam, psi[:, None], rhs))
    den = np.real(np.vdot(psi, psi if M is None else M @ psi))
    out = np.empty((n, n))
    for k in range(n):
        dk = op.dtheta(k)
        for l in range(k, n):
            val = np.real(np.vdot(psi, op.d2theta(k, l) @ psi)) + 2.0 * np.real(np.vdot(psi, dk @ dpsi[l]))
            if M is not None:
                # generalized correction: subtract gradient cross terms
                val -= 2.0 * grad[k] * np.real(np.vdot(psi, M @ dpsi[l]))
            out[k, l] = out[l, k] = val / den
    return out


# ---------------------------------------------------------------------------
# first-order corrector fields


@dataclass
class CorrectorFields:
    """First-order response of a critical branch to the mean deformation."""

    psi1: PeriodicField
    xi1: list[PeriodicField]
    lambda1: float
    theta1: np.ndarray
    psi1_coeffs: np.ndarray = field(repr=False, default=None)
    xi1_coeffs: list[np.ndarray] = field(repr=False, default=None)
    solvability: float = 0.0


def deformation_tables(medium: CellMedium, egradz: PeriodicField, edivz: PeriodicField | None, lattice):
    """Difference tables of the composite fields entering the eta-derivative."""
    n = medium.dim
    gz = egradz.coeffs
    if edivz is None:
        div = sum(gz[i, i] for i in range(n))
        div_cut = egradz.lattice.cutoff
    else:
        div = edivz.coeffs
        div_cut = edivz.lattice.cutoff
    acoef = medium.A.coeffs
    na, nz = medium.A.lattice.cutoff, egradz.lattice.cutoff
    a_gz = matfield_product(acoef, gz, n)                    # A gradZ
    gzt_a = matfield_product(np.swapaxes(gz, 0, 1), acoef, n)  # gradZ^T A
    div_a = scalfield_product(div, acoef, n)                 # divZ * A
    div_v = scalfield_product(div, medium.V.coeffs, n)       # divZ * V
    cut_prod = na + nz
    cut_diva = na + div_cut
    return {
        "a_gz": place_in_diff(a_gz, cut_prod, lattice),
        "gzt_a": place_in_diff(gzt_a, cut_prod, lattice),
        "div_a": place_in_diff(div_a, cut_diva, lattice),
        "div_v": place_in_diff(div_v, medium.V.lattice.cutoff + div_cut, lattice),
        "div": place_in_diff(div, div_cut, lattice),
    }


def eta_derivative_matrices(op: CellOperator, tabs: dict) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """dH/deta, dM/deta, and the mixed d2H/(deta dtheta_k) at eta = 0."""
    n = op.n
    dH = (
        PairingBuilder(op)
        .add(tabs["gzt_a"], "plain", "shifted", -FOUR_PI_SQ)
        .add(tabs["a_gz"], "shifted", "plain", -FOUR_PI_SQ)
        .add(tabs["div_a"], "shifted", "shifted", FOUR_PI_SQ)
        .add_scalar(tabs["div_v"])
        .build()
    )
    dM = PairingBuilder(op).add_scalar(tabs["div"]).build()
    dD = []
    for k in range(n):
        dD.append(
            PairingBuilder(op)
            .add(tabs["gzt_a"], "plain", k, -FOUR_PI_SQ)
            .add(tabs["a_gz"], k, "plain", -FOUR_PI_SQ)
            .add(tabs["div_a"], k, "shifted", FOUR_PI_SQ)
            .add(tabs["div_a"], "shifted", k, FOUR_PI_SQ)
            .build()
        )
    return dH, dM, dD


def first_order_correctors(
    medium: CellMedium,
    point: BandPoint,
    aux: AuxiliaryFields,
    egradz: PeriodicField,
    edivz: PeriodicField | None = None,
) -> CorrectorFields:
    """lambda1, theta1 and the corrector fields of a deformed critical branch.

    With Y = -dH/deta + lambda dM/deta at eta = 0:
      * lambda1 = -<Y psi, psi> (the theta1 coupling drops at the critical
        point because the band gradient vanishes),
      * psi1 = psi1_0 + 2 i pi sum_l theta1_l xi_l, where psi1_0 solves
        (H - lambda) psi1_0 = Y psi + lambda1 psi orthogonally to psi,
      * theta1 solves D2lambda * theta1 = b with
        b_k = 2 i pi <Y xi_k, psi> - <dD_k psi, psi> - <D_k psi1_0, psi>,
        which is the solvability condition of the xi_k1 equations,
      * xi_k1 from the differentiated auxiliary equations, gauge perp psi.
    """
    if np.max(np.abs(aux.grad_lambda)) > 1e-8:
        raise NumericalError("correctors are defined at a critical frequency; band gradient is not zero")
    op = _point_operator(medium, point)
    n = op.n
    lattice = point.psi.lattice
    psi = point.coeffs
    lam = point.lam
    H = op.matrix()

    tabs = deformation_tables(medium, egradz, edivz, lattice)
    dH, dM, dD = eta_derivative_matrices(op, tabs)
    Y = -dH + lam * dM

    lam1_c = -_ip(Y @ psi, psi)
    if abs(lam1_c.imag) > 1e-9 * max(1.0, abs(lam1_c.real)):
        raise NumericalError("first eigenvalue correction has a nonreal residue")
    lam1 = float(lam1_c.real)

    rhs_psi = Y @ psi + lam1 * psi
    sv = abs(_ip(rhs_psi, psi))
    psi10 = constrained_solve_vec(H, None, lam, psi[:, None], rhs_psi)

    hess = discrete_hessian(op, psi, lam)
    b = np.empty(n, dtype=complex)
    for k in range(n):
        dk = op.dtheta(k)
        b[k] = TWO_I_PI * _ip(Y @ aux.coeffs[k], psi) - _ip(dD[k] @ psi, psi) - _ip(dk @ psi10, psi)
    if np.max(np.abs(b.imag)) > 1e-8 * max(1.0, np.max(np.abs(b.real))):
        raise NumericalError("theta1 system has a nonreal right-hand side")
    try:
        theta1 = np.linalg.solve(hess, b.real)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("degenerate band Hessian: theta1 system is singular") from exc

    psi1 = psi10 + TWO_I_PI * sum(theta1[l] * aux.coeffs[l] for l in range(n))

    d2 = [[op.d2theta(k, l) for l in range(n)] for k in range(n)]
    xi1_coeffs = []
    for k in range(n):
        dk = op.dtheta(k)
        rhs = TWO_I_PI * ((Y + lam1 * np.eye(H.shape[0])) @ aux.coeffs[k])
        for l in range(n):
            rhs -= TWO_I_PI * theta1[l] * (op.dtheta(l) @ aux.coeffs[k])
            rhs -= theta1[l] * (d2[k][l] @ psi)
        rhs -= dD[k] @ psi
        rhs -= dk @ psi1
        sv = max(sv, abs(_ip(rhs, psi)))
        u = constrained_solve_vec(H, None, lam, psi[:, None], rhs)
        xi1_coeffs.append(u / TWO_I_PI)

    shape = lattice.grid_shape()
    return CorrectorFields(
        psi1=PeriodicField(lattice, psi1.reshape(shape)),
        xi1=[PeriodicField(lattice, c.reshape(shape)) for c in xi1_coeffs],
        lambda1=lam1,
        theta1=theta1,
        psi1_coeffs=psi1,
        xi1_coeffs=xi1_coeffs,
        solvability=float(sv),
    )
