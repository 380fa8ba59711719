"""Time evolution at scale epsilon and its homogenized limit.

The microscopic Cauchy problem is

    i d_t u = div(A(Phi^-1(x/eps)) grad u) - eps^-2 V(Phi^-1(x/eps)) u - U u

on a periodic box of side L, discretized in the box Fourier basis (the
potential acts by circular convolution on coefficients, the divergence form
by the exact symbol) and stepped by Crank-Nicolson, whose Cayley form keeps
the mass at roundoff.  When every coefficient is constant the operator is
diagonal and the scheme collapses to a closed-form multiplier per mode, so
arbitrarily small dt costs nothing; that path carries the free-medium
reference runs.

Sign convention: the equation above gives a constant potential V = c the
global phase e^{+ict/eps^2}, and the homogenized propagator multiplies mode
k by e^{+it(4 pi^2 A* k.k + U*)}.  The corrector metric unwinds with
e^{-i lambda* t/eps^2} e^{-2 i pi theta*.x/eps}, which is stationary on the
exact Bloch mode under this convention.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConfigError, NumericalError
from .fields import PeriodicField

FOUR_PI_SQ = 4.0 * np.pi**2
MASS_DRIFT_WARN = 1e-8
MASS_DRIFT_ABORT = 1e-6


@dataclass(frozen=True)
class BoxGrid:
    """Uniform periodic grid on [0, L)."""

    L: float
    npts: int

    def __post_init__(self):
        if self.L <= 0 or self.npts < 4:
            raise ConfigError("box grid needs positive side and at least 4 points")

    def points(self) -> np.ndarray:
        return np.arange(self.npts) * (self.L / self.npts)

    def freqs(self) -> np.ndarray:
        """Integer box frequencies in FFT order; physical wavenumber j/L."""
        return np.fft.fftfreq(self.npts, d=1.0 / self.npts)

    def l2_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt((self.L / self.npts) * np.sum(np.abs(u) ** 2)))


@dataclass
class WavefieldState:
    grid: BoxGrid
    u: np.ndarray
    t: float
    eps: float

    def mass(self) -> float:
        return self.grid.l2_norm(self.u) ** 2

    def eps_grad_sq(self) -> float:
        """int |eps grad u|^2 over the box, computed spectrally."""
        uh = np.fft.fft(self.u) / self.grid.npts
        k = self.grid.freqs() / self.grid.L
        return float(self.grid.L * np.sum((2 * np.pi * self.eps * k) ** 2 * np.abs(uh) ** 2))


def save_state(state: WavefieldState, prefix: str) -> None:
    """Binary little-endian complex128 samples plus a JSON sidecar."""
    prefix = str(prefix)
    np.asarray(state.u, dtype="<c16").tofile(prefix + ".bin")
    with open(prefix + ".json", "w") as fh:
        json.dump(
            {"L": state.grid.L, "npts": state.grid.npts, "t": state.t, "eps": state.eps, "dtype": "<c16"},
            fh,
            indent=1,
        )


def gaussian_envelope(L: float, sigma: float | None = None, center: float | None = None):
    """Smooth envelope, effectively supported inside the box."""
    sigma = L / 12.0 if sigma is None else sigma
    center = L / 2.0 if center is None else center
    return lambda x: np.exp(-((x - center) ** 2) / (2.0 * sigma**2))


# ---------------------------------------------------------------------------
# coefficient sampling through the deformation


def _field_at(fld: PeriodicField, points: np.ndarray) -> np.ndarray:
    """Evaluate a unit-periodic field at arbitrary points (1D)."""
    modes = fld.lattice.modes[:, 0]
    ph = np.exp(2j * np.pi * np.outer(modes, points))
    lead = fld.coeffs.shape[: fld.coeffs.ndim - 1]
    vals = fld.coeffs.reshape((-1, modes.size)) @ ph
    return vals.reshape(lead + (points.size,))


def _phi_inverse(realization, eta: float, points: np.ndarray, tol: float = 1e-13) -> np.ndarray:
    """Invert Phi(y) = y + eta*Z(y) by Newton from y = x (1D)."""
    if realization is None or eta == 0.0:
        return points
    y = points.copy()
    for _ in range(60):
        z = realization.z_at(y[None, :])[0]
        g = 1.0 + eta * realization.grad_at(y[None, :])[0, 0]
        step = (y + eta * z - points) / g
        y -= step
        if np.max(np.abs(step)) < tol:
            return y
    raise NumericalError("deformation inverse did not converge; eta too close to degeneracy")


def _micro_coefficients(medium, realization, eta: float, eps: float, grid: BoxGrid):
    """Grid samples of A, V, U composed with Phi^-1(x/eps)."""
    if medium.dim != 1:
        raise ConfigError("time evolution is implemented for 1D media")
    x = grid.points()
    y = _phi_inverse(realization, eta, x / eps)
    a = _field_at(medium.A, y)[0, 0].real
    v = _field_at(medium.V, y).real
    u = _field_at(medium.U, y).real
    return a, v, u


# ---------------------------------------------------------------------------
# evolution configs and initial data


def _content_band(fld: PeriodicField) -> int:
    """Largest mode index carrying a non-negligible coefficient."""
    flat = np.abs(fld.coeffs.reshape((-1, fld.lattice.flat_size))).max(axis=0)
    scale = max(flat.max(), 1e-300)
    live = np.abs(fld.lattice.modes[:, 0])[flat > 1e-12 * scale]
    return int(live.max()) if live.size else 0


@dataclass
class EvolutionConfig:
    eps: float
    L: float
    T: float
    v0: object                      # callable envelope on [0, L)
    theta_star: float = 0.0
    lambda_star: float = 0.0
    psi: PeriodicField | None = None
    dt: float | None = None
    npts: int | None = None
    points_per_cell: int = 16
    snapshot_times: tuple = ()

    def resolve_grid(self, medium) -> BoxGrid:
        if medium.dim != 1:
            raise ConfigError("time evolution is implemented for 1D media")
        cells = self.L / self.eps
        if self.npts is not None:
            if self.npts < self.points_per_cell * cells:
                raise ConfigError(
                    f"grid under-resolved: {self.npts} points is fewer than "
                    f"{self.points_per_cell} per eps-cell ({cells:g} cells)"
                )
            return BoxGrid(self.L, self.npts)
        band = max(_content_band(f) for f in (medium.A, medium.V, medium.U))
        per_cell = max(self.points_per_cell, 4 * (2 * band + 1))
        n = 1 << math.ceil(math.log2(per_cell * cells))
        return BoxGrid(self.L, int(n))

    def resolve_dt(self, medium) -> float:
        if self.dt is not None:
            return float(self.dt)
        vmax = max(1.0, float(np.max(np.abs(medium.V.on_grid(4 * medium.V.lattice.side)))))
        return min(1e-4, 0.1 * self.eps**2 * 2.0 * np.pi / vmax)


def well_prepared_initial(config: EvolutionConfig, medium, realization=None, eta: float = 0.0) -> WavefieldState:
    """Single-Bloch-mode data u0 = e^{2 i pi theta* x/eps} psi(Phi^-1(x/eps)) v0(x)."""
    grid = config.resolve_grid(medium)
    x = grid.points()
    if config.psi is None:
        psi_vals = np.ones_like(x, dtype=complex)
    else:
        y = _phi_inverse(realization, eta, x / config.eps)
        psi_vals = _field_at(config.psi, y)
    phase = np.exp(2j * np.pi * config.theta_star * x / config.eps)
    u0 = phase * psi_vals * np.asarray(config.v0(x), dtype=complex)
    return WavefieldState(grid=grid, u=u0, t=0.0, eps=config.eps)


# ---------------------------------------------------------------------------
# Crank-Nicolson propagation


def _assemble_symbol(medium, realization, eta, eps, grid: BoxGrid):
    """Sparse Fourier-space operator of -div(A grad) + eps^-2 V + U.

    Returns (lags, tables, kvec): H[r, c] = sum over lag d of
    4 pi^2 k_r k_c a_hat[d] + (v_hat[d]/eps^2 + u_hat[d]) with c = r - d
    circularly.  A diagonal operator comes back with the single lag 0.
    """
    n = grid.npts
    a, v, u = _micro_coefficients(medium, realization, eta, eps, grid)
    ah = np.fft.fft(a) / n
    pw = np.fft.fft(v / eps**2 + u) / n
    scale = max(np.max(np.abs(ah)), np.max(np.abs(pw)), 1.0)
    keep = np.where((np.abs(ah) > 1e-14 * scale) | (np.abs(pw) > 1e-14 * scale))[0]
    k = grid.freqs() / grid.L
    return keep, ah, pw, k


def _build_sparse(lags, ah, pw, k, n):
    rows = []
    cols = []
    vals = []
    r = np.arange(n)
    for d in lags:
        c = (r - d) % n
        rows.append(r)
        cols.append(c)
        vals.append(FOUR_PI_SQ * k[r] * k[c] * ah[d] + pw[d])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return scipy.sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))


def evolve_eps(
    state: WavefieldState,
    medium,
    config: EvolutionConfig,
    realization=None,
    eta: float = 0.0,
):
    """Crank-Nicolson propagation to T; returns (state at T, info dict).

    info carries the relative mass drift (must stay <= 1e-8; above 1e-6 the
    run aborts), the eps-gradient ratio of the a priori estimate, the step
    count, and any requested snapshots.
    """
    grid = state.grid
    n = grid.npts
    dt = config.resolve_dt(medium)
    nsteps = int(round(config.T / dt))
    if abs(nsteps * dt - config.T) > 1e-12 * max(1.0, config.T):
        nsteps = math.ceil(config.T / dt)
        dt = config.T / nsteps

    lags, ah, pw, k = _assemble_symbol(medium, realization, eta, config.eps, grid)
    uh = np.fft.fft(state.u) / n
    mass0 = float(np.sum(np.abs(uh) ** 2))
    if mass0 == 0.0:
        raise ConfigError("initial state is identically zero")
    mass_phys = state.mass()
    grad0 = state.eps_grad_sq()

    snaps = []
    snap_times = sorted(set(config.snapshot_times))
    drift = 0.0

    diagonal = np.all(lags == 0)
    if diagonal:
        sigma = (FOUR_PI_SQ * k**2 * ah[0] + pw[0]).real
        # exact N-step Cayley multiplier; dt can be arbitrarily small
        ratio = (1.0 + 0.5j * dt * sigma) / (1.0 - 0.5j * dt * sigma)

        done = 0
        for ts in snap_times:
            target = min(int(round(ts / dt)), nsteps)
            uh = uh * ratio ** (target - done)
            done = target
            snaps.append(WavefieldState(grid=grid, u=np.fft.ifft(uh * n), t=done * dt, eps=config.eps))
        uh = uh * ratio ** (nsteps - done)
        drift = abs(np.sum(np.abs(uh) ** 2) / mass0 - 1.0)
    else:
        H = _build_sparse(lags, ah, pw, k, n)
        ident = scipy.sparse.identity(n, format="csc", dtype=complex)
        lhs = ident - 0.5j * dt * H
        rhs = ident + 0.5j * dt * H
        try:
            lu = scipy.sparse.linalg.splu(lhs)
        except RuntimeError as exc:
            raise NumericalError(f"Crank-Nicolson factorization failed: {exc}") from exc
        snap_idx = {int(round(ts / dt)) for ts in snap_times}
        for step in range(1, nsteps + 1):
            uh = lu.solve(rhs @ uh)
            if not np.all(np.isfinite(uh)):
                raise NumericalError(f"non-finite state at step {step}")
            drift = max(drift, abs(float(np.sum(np.abs(uh) ** 2)) / mass0 - 1.0))
            if drift > MASS_DRIFT_ABORT:
                raise NumericalError(f"mass drift {drift:.3e} exceeds {MASS_DRIFT_ABORT}; aborting")
            if step in snap_idx:
                snaps.append(
                    WavefieldState(grid=grid, u=np.fft.ifft(uh * n), t=step * dt, eps=config.eps)
                )

    u_final = np.fft.ifft(uh * n)
    out = WavefieldState(grid=grid, u=u_final, t=state.t + nsteps * dt, eps=config.eps)
    gradT = out.eps_grad_sq()
    info = {
        "mass_drift": float(drift),
        "steps": nsteps,
        "dt": dt,
        "eps_grad_initial": grad0,
        "eps_grad_final": gradT,
        "eps_grad_ratio": gradT / (grad0 + mass_phys),
        "snapshots": snaps,
        "diagonal_fast_path": bool(diagonal),
    }
    return out, info


def evolve_homogenized(v0_samples: np.ndarray, grid: BoxGrid, a_star, u_star: float, T: float) -> np.ndarray:
    """Exact spectral propagator of i d_t v - div(A* grad v) + U* v = 0.

    Mode k picks up e^{+iT(4 pi^2 A* k.k + U*)} (see the module docstring
    for the sign pin); unitary to machine precision.
    """
    a = float(np.asarray(a_star).reshape(-1)[0])
    k = grid.freqs() / grid.L
    vh = np.fft.fft(np.asarray(v0_samples, dtype=complex))
    vh *= np.exp(1j * T * (FOUR_PI_SQ * a * k**2 + float(u_star)))
    return np.fft.ifft(vh)


# ---------------------------------------------------------------------------
# corrector metric


def corrector_error(
    state: WavefieldState,
    v_samples: np.ndarray,
    psi: PeriodicField | None,
    theta_star: float,
    lambda_star: float,
    realization=None,
    eta: float = 0.0,
) -> float:
    """L2 distance between the phase-unwound field and psi-modulated envelope.

    v_eps(x) = e^{-i lambda* t/eps^2} e^{-2 i pi theta* x/eps} u(x) is
    compared against v(x) psi(Phi^-1(x/eps)) on the common grid.
    """
    grid = state.grid
    v_samples = np.asarray(v_samples)
    if v_samples.shape != state.u.shape:
        raise ConfigError("envelope grid does not match the state grid")
    x = grid.points()
    unwind = np.exp(-1j * lambda_star * state.t / state.eps**2 - 2j * np.pi * theta_star * x / state.eps)
    v_eps = unwind * state.u
    if psi is None:
        psi_vals = np.ones_like(x, dtype=complex)
    else:
        y = _phi_inverse(realization, eta, x / state.eps)
        psi_vals = _field_at(psi, y)
    return grid.l2_norm(v_eps - v_samples * psi_vals)


# ---------------------------------------------------------------------------
# splitting study


def _duhamel_driven(v1_0_hat, source_hat0, sigma, T, nquad: int = 64):
    """Spectral Duhamel solution of d_t v1 = i sigma v1 + i c w(t) per mode.

    w(t) = e^{i sigma t} w(0), so the quadrature integrand is constant in s;
    Simpson is used anyway to keep the path honest for general sources.
    """
    s = np.linspace(0.0, T, 2 * nquad + 1)
    w = np.array([2.0 if i % 2 == 0 else 4.0 for i in range(s.size)])
    w[0] = w[-1] = 1.0
    w *= (T / (2 * nquad)) / 3.0
    integ = np.zeros_like(v1_0_hat)
    for wi, si in zip(w, s):
        integ = integ + wi * np.exp(1j * sigma * (T - si)) * (1j * source_hat0 * np.exp(1j * sigma * si))
    return np.exp(1j * sigma * T) * v1_0_hat + integ


@dataclass
class SplittingResult:
    etas: list
    residuals: list
    slopes: list
    a_star_per: float
    u_star_per: float
    u1: float
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        import csv as _csv

        with open(path, "w", newline="") as fh:
            wr = _csv.writer(fh)
            wr.writerow(["eta", "residual", "slope"])
            for i, (e, r) in enumerate(zip(self.etas, self.residuals)):
                sl = "" if i == 0 else f"{self.slopes[i - 1]:.17g}"
                wr.writerow([f"{e:.17g}", f"{r:.17g}", sl])


def splitting_series(
    medium,
    dspec,
    etas,
    band: int = 0,
    lattice=None,
    grid: BoxGrid | None = None,
    T: float = 0.05,
    v0=None,
    fd_step: float | None = None,
    series=None,
    point=None,
    aux=None,
) -> SplittingResult:
    """First-order envelope splitting in the deformation strength.

    Works in squeezed coordinates: w_eta(t, z) = v_eta(t, sqrt(A*_eta) z)
    solves the unit-Laplacian envelope equation with potential U*_eta, so
    all eta-dependence enters through the initial datum and the scalar
    potential.  The first-order envelope v1 solves the driven equation
    d_t v1 = i sigma v1 + i U1 w_per (the sign follows the d_t u = i L u
    convention used throughout) with initial datum the eta-derivative of
    v0(sqrt(A*_eta) z); the reported residuals are
    ||w_eta - w_per - eta v1||_L2 at T and should shrink at second order.
    """
    from .assemble import deformed_operator
    from .cell_problems import discrete_hessian, first_auxiliary, first_order_correctors
    from .effective import EIGHT_PI_SQ, effective_coefficients, find_critical, newton_critical, quasi_perfect_series
    from .fields import build_lattice, synth_grid

    etas = sorted(float(e) for e in etas)
    if any(e <= 0 for e in etas):
        raise ConfigError("splitting requires positive eta values")
    if medium.dim != 1:
        raise ConfigError("the splitting study is implemented for 1D media")
    lat = lattice or build_lattice(1, max(16, 2 * medium.cutoff + 8))
    grid = grid or BoxGrid(16.0, 256)
    v0 = v0 or gaussian_envelope(grid.L, sigma=grid.L / 16.0)

    if point is None:
        point = find_critical(medium, band=band, theta_init=[0.0], lattice=lat)
    if aux is None:
        aux = first_auxiliary(medium, point)
    eff = effective_coefficients(medium, point, aux)
    if series is None:
        cors = first_order_correctors(medium, point, aux, dspec.egrad_z, dspec.ediv_z)
        series = quasi_perfect_series(medium, point, aux, cors, dspec.egrad_z, dspec.ediv_z)
    a_per = float(eff.A_star[0, 0])
    u_per = float(eff.U_star)
    u1 = float(np.real(series.U1))

    realization = dspec.sample_realization()
    period = realization.period
    sup_lat = build_lattice(1, max(lat.cutoff * period, 24))

    def coeffs_at(eta_val: float):
        op = deformed_operator(medium, realization, eta_val, [0.0], sup_lat, period=period)
        theta, lam, psi, _ = newton_critical(op, band=band, theta_init=np.zeros(1))
        opc = op.with_theta(theta)
        hess = discrete_hessian(opc, psi, lam, opc.mass())
        a_eta = float(hess[0, 0]) / EIGHT_PI_SQ
        # U-average against the deformed volume element
        npts = 1 << max(8, math.ceil(math.log2(4 * (2 * sup_lat.cutoff + 1))))
        psig = synth_grid(np.asarray(psi).reshape(sup_lat.grid_shape()), sup_lat.cutoff, npts, 1)
        ug = synth_grid(medium.U.coeffs, medium.U.lattice.cutoff, npts, 1, stride=period).real
        det = 1.0 + eta_val * realization.grad_on_grid(npts)[0, 0]
        w = np.abs(psig) ** 2 * det
        u_eta = float(np.mean(ug * w) / np.mean(w))
        if a_eta <= 0:
            raise NumericalError(f"effective tensor not positive at eta={eta_val}")
        return a_eta, u_eta

    h = fd_step if fd_step is not None else min(etas)
    a_plus, _ = coeffs_at(h)
    a_minus, _ = coeffs_at(-h)

    x = grid.points()
    w_per0 = np.asarray(v0(np.sqrt(a_per) * x), dtype=complex)
    v1_0 = (np.asarray(v0(np.sqrt(a_plus) * x)) - np.asarray(v0(np.sqrt(a_minus) * x))) / (2.0 * h)

    k = grid.freqs() / grid.L
    sigma = FOUR_PI_SQ * k**2 + u_per
    w_per_T = evolve_homogenized(w_per0, grid, 1.0, u_per, T)
    v1_hat = _duhamel_driven(np.fft.fft(v1_0.astype(complex)), u1 * np.fft.fft(w_per0), sigma, T)
    v1_T = np.fft.ifft(v1_hat)

    residuals = []
    for e in etas:
        a_eta, u_eta = coeffs_at(e)
        w_eta0 = np.asarray(v0(np.sqrt(a_eta) * x), dtype=complex)
        w_eta_T = evolve_homogenized(w_eta0, grid, 1.0, u_eta, T)
        residuals.append(grid.l2_norm(w_eta_T - w_per_T - e * v1_T))

    slopes = []
    for i in range(1, len(etas)):
        if residuals[i] > 0 and residuals[i - 1] > 0:
            slopes.append(math.log(residuals[i] / residuals[i - 1]) / math.log(etas[i] / etas[i - 1]))
        else:
            slopes.append(float("nan"))
    return SplittingResult(
        etas=list(etas),
        residuals=residuals,
        slopes=slopes,
        a_star_per=a_per,
        u_star_per=u_per,
        u1=u1,
    )
