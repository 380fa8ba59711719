"""Critical Bloch frequencies, effective tensors, and the order-eta series.

The homogenized tensor is computed three independent ways and cross-checked:

* the bilinear route: the three-term A-weighted bracket of (psi, xi_k),
  normalized by c_psi,
* the band-curvature route: (1/(8 pi^2)) times a finite-difference Hessian
  of lambda(theta),
* the identity route: half of the bilinear Hessian identity output.

The adopted convention is A* = (1/(8 pi^2)) D^2_theta lambda(theta*), which
the free medium pins down (A = I, lambda = 4 pi^2 |theta|^2 gives A* = I).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .assemble import CellOperator, deformed_operator, periodic_operator
from .bands import BandPoint, solve_lowest
from .cell_problems import (
    AuxiliaryFields,
    CorrectorFields,
    discrete_hessian,
    first_auxiliary,
    first_order_correctors,
    hessian_via_sac,
    hf_gradient,
)
from .errors import ConfigError, ConvergenceError, NumericalError
from .fields import CellMedium, FourierLattice, PeriodicField, synth_grid

TWO_I_PI = 2j * math.pi
EIGHT_PI_SQ = 8.0 * math.pi**2


def wrap_theta(theta: np.ndarray) -> np.ndarray:
    """Reduce a frequency to the cell [-1/2, 1/2)^n."""
    return (np.asarray(theta, dtype=float) + 0.5) % 1.0 - 0.5


# ---------------------------------------------------------------------------
# critical-point search


def _band_state(op: CellOperator, band: int):
    bm = op.bloch()
    count = min(band + 2, op.lattice.flat_size)
    w, v = solve_lowest(bm.H, bm.M, count)
    gap_up = w[band + 1] - w[band] if band + 1 < count else np.inf
    gap_down = w[band] - w[band - 1] if band > 0 else np.inf
    return bm, w[band], v[:, band], min(gap_up, gap_down)


def newton_critical(
    op: CellOperator,
    band: int,
    theta_init,
    tol: float = 1e-10,
    max_iter: int = 50,
    gap_tol: float = 1e-8,
):
    """Newton iteration on the Hellmann-Feynman band gradient.

    Uses the exact discrete response Hessian; backtracks when a full step
    does not reduce the gradient, and falls back to a local grid argmin when
    the Hessian is not positive definite.  Returns (theta, lam, psi, info).
    """
    n = op.n
    theta = wrap_theta(np.atleast_1d(np.asarray(theta_init, dtype=float)))
    if theta.shape != (n,):
        raise ConfigError(f"theta_init must have {n} components")
    info = {"iterations": 0, "grad_norms": [], "fallbacks": 0}

    cur = op.with_theta(theta)
    bm, lam, psi, gap = _band_state(cur, band)
    if gap < gap_tol:
        raise NumericalError(f"band {band} not simple at theta={theta} (gap {gap:.3e})")
    grad = hf_gradient(cur, psi, bm.M)
    gnorm = float(np.linalg.norm(grad))
    info["grad_norms"].append(gnorm)

    for _ in range(max_iter):
        if gnorm <= tol:
            return theta, float(lam), psi, info
        hess = discrete_hessian(cur, psi, lam, bm.M)
        eigs = np.linalg.eigvalsh(hess)
        if eigs.min() <= 1e-12 * max(1.0, abs(eigs).max()):
            # indefinite curvature: recenter on a local grid argmin
            info["fallbacks"] += 1
            width = max(0.25 / (info["fallbacks"] + 1), 4 * gnorm)
            best = (lam, theta)
            for offs in np.ndindex(*(5,) * n):
                cand = wrap_theta(theta + width * (np.array(offs) - 2) / 2.0)
                cop = op.with_theta(cand)
                cbm, clam, cpsi, cgap = _band_state(cop, band)
                if clam < best[0]:
                    best = (clam, cand)
            theta = best[1]
        else:
            step = -np.linalg.solve(hess, grad)
            t = 1.0
            while t >= 1.0 / 64.0:
                cand = wrap_theta(theta + t * step)
                cop = op.with_theta(cand)
                cbm, clam, cpsi, cgap = _band_state(cop, band)
                if cgap < gap_tol:
                    raise NumericalError(f"band crossing encountered near theta={cand} (gap {cgap:.3e})")
                cgrad = hf_gradient(cop, cpsi, cbm.M)
                if np.linalg.norm(cgrad) < gnorm or t <= 1.0 / 64.0:
                    theta = cand
                    break
                t /= 2.0
        cur = op.with_theta(theta)
        bm, lam, psi, gap = _band_state(cur, band)
        grad = hf_gradient(cur, psi, bm.M)
        gnorm = float(np.linalg.norm(grad))
        info["iterations"] += 1
        info["grad_norms"].append(gnorm)

    raise ConvergenceError(
        f"critical-point search did not reach ||grad|| <= {tol:.0e} in {max_iter} iterations "
        f"(last {gnorm:.3e})"
    )


def find_critical(
    medium: CellMedium,
    band: int,
    theta_init,
    lattice: FourierLattice | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
    return_info: bool = False,
):
    """Locate a critical point of lambda_band(theta) for a periodic medium."""
    if lattice is None:
        lattice = medium.A.lattice
    n = lattice.dim
    op = periodic_operator(medium, np.zeros(n), lattice)
    theta, lam, psi, info = newton_critical(op, band, theta_init, tol=tol, max_iter=max_iter)
    res = float(np.linalg.norm(op.with_theta(theta).matrix() @ psi - lam * psi))
    point = BandPoint(
        theta=theta,
        band=band,
        lam=lam,
        psi=PeriodicField(lattice, psi.reshape(lattice.grid_shape())),
        residual=res,
        coeffs=psi,
    )
    return (point, info) if return_info else point


# ---------------------------------------------------------------------------
# quadrature fields


def _quad_npts(*cutoffs: int) -> int:
    return 2 * sum(cutoffs) + 2


class _QuadFields:
    """Grid samples of all fields entering the tensor brackets."""

    def __init__(self, medium: CellMedium, point: BandPoint, aux: AuxiliaryFields, extra_cut: int = 0):
        lattice = point.psi.lattice
        self.n = lattice.dim
        self.theta = point.theta
        npts = _quad_npts(medium.cutoff, 2 * lattice.cutoff, extra_cut)
        self.npts = npts
        n, cut = self.n, lattice.cutoff
        self.a = synth_grid(medium.A.coeffs, medium.A.lattice.cutoff, npts, n).real
        self.u = synth_grid(medium.U.coeffs, medium.U.lattice.cutoff, npts, n).real
        self.lattice = lattice
        self.psi = synth_grid(point.psi.coeffs, cut, npts, n)
        self.gpsi, self.pgpsi = self._grads(point.coeffs)
        self.xi, self.gxi, self.pgxi = [], [], []
        for c in aux.coeffs:
            self.xi.append(synth_grid(c.reshape(lattice.grid_shape()), cut, npts, n))
            g, pg = self._grads(c)
            self.gxi.append(g)
            self.pgxi.append(pg)

    def _grads(self, coeffs: np.ndarray):
        """Shifted gradient (grad + 2 i pi theta) and the plain gradient."""
        lattice, npts, n = self.lattice, self.npts, self.n
        modes = lattice.modes
        shifted = np.empty((n,) + (npts,) * n, dtype=complex)
        plain = np.empty_like(shifted)
        for i in range(n):
            pc = (TWO_I_PI * modes[:, i] * coeffs).reshape(lattice.grid_shape())
            sc = (TWO_I_PI * (modes[:, i] + self.theta[i]) * coeffs).reshape(lattice.grid_shape())
            plain[i] = synth_grid(pc, lattice.cutoff, npts, n)
            shifted[i] = synth_grid(sc, lattice.cutoff, npts, n)
        return shifted, plain

    def sample_scalar(self, f: PeriodicField) -> np.ndarray:
        return synth_grid(f.coeffs, f.lattice.cutoff, self.npts, self.n)

    def sample_matrix(self, f: PeriodicField) -> np.ndarray:
        return synth_grid(f.coeffs, f.lattice.cutoff, self.npts, self.n)

    def col(self, l: int, f: np.ndarray) -> np.ndarray:
        """A (e_l f): the l-th column of A times a scalar field."""
        return self.a[:, l] * f[None]

    def amul(self, v: np.ndarray) -> np.ndarray:
        return np.einsum("ij...,j...->i...", self.a, v)

    @staticmethod
    def dot(u: np.ndarray, v: np.ndarray) -> complex:
        """mean of u . conj(v) over the cell."""
        return complex(np.mean(np.sum(u * np.conj(v), axis=0)))

    @staticmethod
    def smean(f: np.ndarray) -> complex:
        return complex(np.mean(f))


def _b0_bracket(q: _QuadFields) -> np.ndarray:
    n = q.n
    b = np.empty((n, n), dtype=complex)
    for k in range(n):
        for l in range(n):
            t = q.dot(q.col(l, q.psi), _ek(q, k, q.psi))
            t += q.dot(q.col(l, q.psi), q.gxi[k])
            t -= q.smean(q.amul(q.gpsi)[l] * np.conj(q.xi[k]))
            b[k, l] = t
    return b


def _ek(q: _QuadFields, k: int, f: np.ndarray) -> np.ndarray:
    e = np.zeros((q.n,) + f.shape, dtype=complex)
    e[k] = f
    return e


@dataclass
class EffectiveCoefficients:
    """Homogenized data of a periodic medium at a critical frequency."""

    theta_star: np.ndarray
    lambda_star: float
    B: np.ndarray
    A_star: np.ndarray
    U_star: float
    c_psi: float
    route: str = "bilinear"
    route_discrepancy: float = 0.0
    routes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "theta_star": [float(t) for t in self.theta_star],
            "lambda_star": self.lambda_star,
            "A_star": [float(x) for x in self.A_star.reshape(-1)],
            "U_star": self.U_star,
            "c_psi": self.c_psi,
            "route_discrepancy": self.route_discrepancy,
        }


def fd_hessian(medium: CellMedium, band: int, theta: np.ndarray, lattice: FourierLattice, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference Hessian of the band (5-point diagonal stencil)."""
    n = lattice.dim
    op = periodic_operator(medium, np.zeros(n), lattice)

    def lam(th):
        bm = op.with_theta(wrap_theta(th)).bloch()
        w, _ = solve_lowest(bm.H, bm.M, band + 1)
        return w[band]

    out = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        f = [lam(theta + s * e) for s in (-2, -1, 0, 1, 2)]
        out[k, k] = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h**2)
    for k in range(n):
        for l in range(k + 1, n):
            ek = np.zeros(n)
            ek[k] = h
            el = np.zeros(n)
            el[l] = h
            val = (lam(theta + ek + el) - lam(theta + ek - el) - lam(theta - ek + el) + lam(theta - ek - el)) / (4 * h**2)
            out[k, l] = out[l, k] = val
    return out


def effective_coefficients(
    medium: CellMedium,
    point: BandPoint,
    aux: AuxiliaryFields,
    route_tol: float = 1e-4,
) -> EffectiveCoefficients:
    """Effective tensor, potential, and normalization at a critical point.

    B comes from the three-term bilinear bracket; the symmetrized A* is
    cross-checked against the curvature routes and their worst relative
    disagreement is recorded (an error above route_tol signals an
    inconsistent configuration).
    """
    if np.max(np.abs(aux.grad_lambda)) > 1e-8:
        raise NumericalError("effective coefficients require a critical frequency")
    q = _QuadFields(medium, point, aux)
    c_psi = float(np.mean(np.abs(q.psi) ** 2))
    if c_psi <= 0:
        raise NumericalError("c_psi must be positive")
    b = _b0_bracket(q) / c_psi
    a_sym = 0.5 * (b + b.T)
    if np.max(np.abs(a_sym.imag)) > 1e-10 * max(1.0, np.max(np.abs(a_sym.real))):
        raise NumericalError("effective tensor has a nonreal symmetric part")
    a_star = a_sym.real
    u_star = float(np.mean(q.u * np.abs(q.psi) ** 2).real) / c_psi

    lattice = point.psi.lattice
    a_fd = fd_hessian(medium, point.band, point.theta, lattice) / EIGHT_PI_SQ
    a_sac = 0.5 * hessian_via_sac(medium, point, aux)
    routes = {"bilinear": a_star, "hessian_fd": a_fd, "sac": a_sac}
    scale = max(np.max(np.abs(a_star)), 1e-30)
    disc = max(
        float(np.max(np.abs(a_star - a_fd))) / scale,
        float(np.max(np.abs(a_star - a_sac))) / scale,
        float(np.max(np.abs(a_fd - a_sac))) / scale,
    )
    if disc > route_tol:
        raise NumericalError(
            f"effective-tensor routes disagree by {disc:.3e} relative (tolerance {route_tol:.0e})"
        )
    return EffectiveCoefficients(
        theta_star=point.theta.copy(),
        lambda_star=point.lam,
        B=b,
        A_star=a_star,
        U_star=u_star,
        c_psi=c_psi,
        route="bilinear",
        route_discrepancy=disc,
        routes=routes,
    )


# ---------------------------------------------------------------------------
# order-eta series


@dataclass
class PerturbationSeries:
    """First-order expansion of the homogenized data in the deformation size."""

    theta1: np.ndarray
    lambda1: float
    B0: np.ndarray
    B1: np.ndarray
    A1: np.ndarray
    U0: float
    U1: float
    correctors: CorrectorFields


def quasi_perfect_series(
    medium: CellMedium,
    point: BandPoint,
    aux: AuxiliaryFields,
    correctors: CorrectorFields,
    egradz: PeriodicField,
    edivz: PeriodicField | None = None,
    check_gauge: bool = True,
) -> PerturbationSeries:
    """B0, B1 = order-eta tensor bracket, and the potential expansion U0, U1.

    The order-eta bracket pairs the corrector means E[psi1], E[xi_k1] and the
    deformation statistics against (psi, xi_k); the trailing c-correction
    (the expansion of the normalization c_eta) multiplies the plain B0
    bracket and makes the result covariant under the residual eigenvector
    gauge psi1 -> psi1 + alpha psi (with xi1 re-solved accordingly).
    """
    if correctors.psi1_coeffs is None:
        raise ConfigError("corrector fields are missing coefficient data")
    gauge = abs(np.vdot(point.coeffs, correctors.psi1_coeffs))
    lattice = point.psi.lattice
    n = lattice.dim
    zcut = egradz.lattice.cutoff if edivz is None else max(egradz.lattice.cutoff, edivz.lattice.cutoff)
    q = _QuadFields(medium, point, aux, extra_cut=zcut)
    npts = q.npts

    gz = synth_grid(egradz.coeffs, egradz.lattice.cutoff, npts, n)
    if edivz is None:
        ed = np.trace(gz, axis1=0, axis2=1)
    else:
        ed = synth_grid(edivz.coeffs, edivz.lattice.cutoff, npts, n)

    e1 = synth_grid(correctors.psi1_coeffs.reshape(lattice.grid_shape()), lattice.cutoff, npts, n)
    modes = lattice.modes
    ge1 = np.empty((n,) + (npts,) * n, dtype=complex)
    for i in range(n):
        sc = (TWO_I_PI * (modes[:, i] + point.theta[i]) * correctors.psi1_coeffs).reshape(lattice.grid_shape())
        ge1[i] = synth_grid(sc, lattice.cutoff, npts, n)
    ek_f, gek = [], []
    for c in correctors.xi1_coeffs:
        ek_f.append(synth_grid(c.reshape(lattice.grid_shape()), lattice.cutoff, npts, n))
        g = np.empty((n,) + (npts,) * n, dtype=complex)
        for i in range(n):
            sc = (TWO_I_PI * (modes[:, i] + point.theta[i]) * c).reshape(lattice.grid_shape())
            g[i] = synth_grid(sc, lattice.cutoff, npts, n)
        gek.append(g)
    theta1 = correctors.theta1

    c_psi = float(np.mean(np.abs(q.psi) ** 2))
    b0 = _b0_bracket(q)

    b1 = np.empty((n, n), dtype=complex)
    tvec = theta1.reshape((n,) + (1,) * n)
    vec_psi = ge1 + TWO_I_PI * tvec * q.psi[None] - np.einsum("ij...,j...->i...", gz, q.pgpsi)
    for k in range(n):
        # bracketed corrector vector of the k-th auxiliary pair
        vec_k = gek[k] + TWO_I_PI * tvec * q.xi[k][None] - np.einsum("ij...,j...->i...", gz, q.pgxi[k])
        for l in range(n):
            t = q.smean(q.a[k, l] * q.psi * np.conj(q.psi) * ed)          # T1
            t += q.smean(q.a[k, l] * q.psi * np.conj(e1))                  # T2
            t += q.smean(q.a[k, l] * e1 * np.conj(q.psi))                  # T3
            t += q.dot(q.col(l, q.psi) * ed[None], q.gxi[k])               # T4
            t += q.dot(q.col(l, q.psi), vec_k)                             # T5
            t += q.dot(q.col(l, e1), q.gxi[k])                             # T6
            t -= q.smean(q.amul(q.gpsi)[l] * np.conj(q.xi[k]) * ed)        # T7
            t -= q.smean(q.amul(q.gpsi)[l] * np.conj(ek_f[k]))             # T8
            t -= q.smean(q.amul(vec_psi)[l] * np.conj(q.xi[k]))            # T9
            b1[k, l] = t
    c1 = q.smean(np.abs(q.psi) ** 2 * ed) + q.smean(q.psi * np.conj(e1)) + q.smean(e1 * np.conj(q.psi))
    if abs(c1.imag) > 1e-10 * max(1.0, abs(c1.real)):
        raise NumericalError("normalization expansion has a nonreal residue")
    b1 -= c1 * b0

    a1_c = 0.5 * (b1 + b1.T)
    if np.max(np.abs(a1_c.imag)) > 1e-8 * max(1.0, np.max(np.abs(a1_c.real))):
        raise NumericalError("order-eta tensor has a nonreal symmetric part")
    a1 = a1_c.real

    u0 = float(np.mean(q.u * np.abs(q.psi) ** 2).real) / c_psi
    u1_c = q.smean(q.u * np.abs(q.psi) ** 2 * ed) + 2.0 * np.real(q.smean(q.u * e1 * np.conj(q.psi))) - c1 * u0
    u1 = float(np.real(u1_c))

    if check_gauge and gauge > 1e-8:
        raise NumericalError(f"corrector gauge residual {gauge:.3e} is not zero")
    return PerturbationSeries(
        theta1=theta1.copy(),
        lambda1=correctors.lambda1,
        B0=b0 / c_psi,
        B1=b1,
        A1=a1,
        U0=u0,
        U1=u1,
        correctors=correctors,
    )


# ---------------------------------------------------------------------------
# supercell oracle


@dataclass
class OracleRow:
    eta: float
    theta_star: np.ndarray
    lam: float
    a_star: np.ndarray
    resid_lambda: float = float("nan")
    resid_a: float = float("nan")


@dataclass
class OracleTable:
    rows: list[OracleRow]
    lambda_slope: float = float("nan")
    a_slope: float = float("nan")
    lambda_slopes: list[float] = field(default_factory=list)
    a_slopes: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        n = self.rows[0].a_star.shape[0] if self.rows else 0
        cols = ["eta", "lambda"] + [f"a{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        cols += ["resid_lambda", "resid_a", "slope_lambda", "slope_a"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for i, row in enumerate(self.rows):
                slo = self.lambda_slopes[i - 1] if 0 < i <= len(self.lambda_slopes) else float("nan")
                sla = self.a_slopes[i - 1] if 0 < i <= len(self.a_slopes) else float("nan")
                writer.writerow(
                    [f"{row.eta:.17g}", f"{row.lam:.17g}"]
                    + [f"{x:.17g}" for x in row.a_star.reshape(-1)]
                    + [f"{row.resid_lambda:.17g}", f"{row.resid_a:.17g}", f"{slo:.17g}", f"{sla:.17g}"]
                )


def supercell_oracle(
    medium: CellMedium,
    realization,
    etas,
    band: int = 0,
    period: int = 1,
    lattice: FourierLattice | None = None,
    series: PerturbationSeries | None = None,
    theta_init=None,
) -> OracleTable:
    """Deformed-supercell sweep checking the order-eta expansion.

    For each eta: assemble the pulled-back pencil, track the critical point
    by Newton, record lambda(eta) and A*(eta) = (1/(8 pi^2)) D^2 lambda.  With
    a series supplied, the residuals lambda(eta) - lambda_per - eta*lambda1
    and ||A*(eta) - A*_per - eta*A1||_F are reported together with Richardson
    slope estimates (both should sit near 2).
    """
    if lattice is None:
        lattice = medium.A.lattice
    n = lattice.dim
    theta0 = np.zeros(n) if theta_init is None else np.atleast_1d(np.asarray(theta_init, dtype=float))

    rows = []
    base = None
    for eta in [0.0] + [float(e) for e in etas]:
        op = deformed_operator(medium, realization, eta, theta0, lattice, period=period)
        theta, lam, psi, _ = newton_critical(op, band, theta0)
        cur = op.with_theta(theta)
        hess = discrete_hessian(cur, psi, lam, cur.mass())
        a_star = hess / EIGHT_PI_SQ
        row = OracleRow(eta=eta, theta_star=theta, lam=lam, a_star=a_star)
        if eta == 0.0:
            base = row
            continue
        if series is not None:
            row.resid_lambda = abs(lam - base.lam - eta * series.lambda1)
            row.resid_a = float(np.linalg.norm(a_star - base.a_star - eta * series.A1))
        rows.append(row)

    rows.sort(key=lambda r: -r.eta)
    lam_slopes, a_slopes = [], []
    if series is not None:
        for i in range(1, len(rows)):
            r0, r1 = rows[i - 1], rows[i]
            den = math.log(r0.eta / r1.eta)
            if r0.resid_lambda > 0 and r1.resid_lambda > 0:
                lam_slopes.append(math.log(r0.resid_lambda / r1.resid_lambda) / den)
            if r0.resid_a > 0 and r1.resid_a > 0:
                a_slopes.append(math.log(r0.resid_a / r1.resid_a) / den)
    table = OracleTable(
        rows=[base] + rows,
        lambda_slope=float(np.mean(lam_slopes)) if lam_slopes else float("nan"),
        a_slope=float(np.mean(a_slopes)) if a_slopes else float("nan"),
        lambda_slopes=lam_slopes,
        a_slopes=a_slopes,
    )
    return table
