"""Stationary ergodic deformations of periodic media.

The deformation is Phi(y, omega) = y + eta * Z(y, omega) with Z stationary
under an ergodic action: integer shifts of a symbol word select per-cell
bump fields.  Three actions are supported: torus rotations (for the group
law machinery), cyclic shifts on (Z/pZ)^n (the quantitative lane: every
realization is p-periodic, so supercell assembly and ensemble statistics
are exact finite sums), and an i.i.d. symbol field (ergodic demos only,
realizations are not periodic).

Realizations are frozen onto a supercell Fourier lattice at ingestion:
the band-limited projection *is* the deformation, so the assembly tables,
the ensemble averages E[grad Z] and E[div Z], and the ergodic estimates
all derive from one set of coefficients with no quadrature mismatch.
Integer-shift equivariance survives the projection exactly (shifts act on
coefficients as phases), which keeps stationarity residuals at roundoff.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fields import FourierLattice, PeriodicField, analyze_grid, build_lattice, synth_grid

TWO_PI = 2.0 * np.pi
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def task_seed(seed: int, task: str) -> np.random.SeedSequence:
    """Derive a per-task seed stream from the run seed and a task label."""
    return np.random.SeedSequence([int(seed), zlib.crc32(task.encode("utf-8"))])


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9) & _MASK
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB) & _MASK
    return x ^ (x >> np.uint64(31))


# ---------------------------------------------------------------------------
# dynamical systems


@dataclass
class DynamicalSystem:
    """A measure-preserving shift action used to index realizations.

    torus_shift acts on [0,1)^n by translation, cyclic_shift on (Z/pZ)^n by
    addition, and bernoulli translates an i.i.d. symbol field on Z^n (the
    state is the integer window offset; symbols come from a keyed hash, so
    translation is exact and the field never needs storage).
    """

    kind: str
    dim: int
    seed: int = 0
    p: int | None = None
    states: int = 2
    probs: np.ndarray | None = None
    word_table: np.ndarray | None = None

    def shift(self, x, omega):
        if self.kind == "torus_shift":
            return np.mod(np.asarray(omega, dtype=float) + np.asarray(x, dtype=float), 1.0)
        x = np.asarray(x, dtype=int)
        omega = np.asarray(omega, dtype=int)
        if self.kind == "cyclic_shift":
            return (omega + x) % self.p
        return omega + x

    def sample_state(self, rng: np.random.Generator):
        if self.kind == "torus_shift":
            return rng.random(self.dim)
        if self.kind == "cyclic_shift":
            return rng.integers(0, self.p, size=self.dim)
        return np.zeros(self.dim, dtype=int)

    def all_states(self):
        """Enumerate the (finite) state space; cyclic only."""
        if self.kind != "cyclic_shift":
            raise ConfigError(f"{self.kind} has no finite state enumeration")
        grids = np.meshgrid(*([np.arange(self.p)] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def word(self, sites: np.ndarray, omega) -> np.ndarray:
        """Symbol values at integer sites, shape (N,), for the state omega."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        omega = np.asarray(omega, dtype=np.int64).reshape(self.dim)
        if self.kind == "cyclic_shift":
            idx = tuple(((sites + omega) % self.p).T)
            return self.word_table[idx]
        if self.kind == "bernoulli":
            h = _mix64(np.full(sites.shape[0], np.uint64(self.seed) & _MASK))
            shifted = sites + omega
            for axis in range(self.dim):
                h = _mix64(h ^ _mix64(shifted[:, axis].astype(np.uint64)))
            u = h.astype(np.float64) / 2.0**64
            cum = np.cumsum(self.probs)
            return np.minimum(np.searchsorted(cum, u, side="right"), self.states - 1)
        raise ConfigError(f"{self.kind} carries no symbol word")

    def state_frequencies(self) -> np.ndarray:
        """Exact (cyclic) or declared (bernoulli) symbol frequencies."""
        if self.kind == "cyclic_shift":
            return np.bincount(self.word_table.ravel(), minlength=self.states) / self.word_table.size
        if self.kind == "bernoulli":
            return np.asarray(self.probs)
        raise ConfigError(f"{self.kind} carries no symbol word")


def make_dynamical_system(
    kind: str,
    dim: int = 1,
    p: int | None = None,
    states: int = 2,
    probs=None,
    seed: int = 0,
    word=None,
) -> DynamicalSystem:
    if kind not in ("torus_shift", "cyclic_shift", "bernoulli"):
        raise ConfigError(f"unknown dynamical system kind '{kind}'")
    if dim < 1:
        raise ConfigError("dimension must be at least 1")
    table = None
    pr = None
    if kind == "cyclic_shift":
        if p is None or p < 1:
            raise ConfigError("cyclic_shift needs a positive modulus p")
        shape = (p,) * dim
        if word is None:
            rng = np.random.default_rng(task_seed(seed, "word"))
            table = rng.integers(0, states, size=shape)
        elif isinstance(word, str) and word == "alternating":
            grids = np.meshgrid(*([np.arange(p)] * dim), indexing="ij")
            table = (sum(grids) % states).astype(int)
        else:
            table = np.asarray(word, dtype=int).reshape(shape)
            if table.min() < 0 or table.max() >= states:
                raise ConfigError("word symbols out of range")
    if kind == "bernoulli":
        pr = np.full(states, 1.0 / states) if probs is None else np.asarray(probs, dtype=float)
        if pr.shape != (states,) or np.any(pr < 0) or abs(pr.sum() - 1.0) > 1e-12:
            raise ConfigError("probs must be a nonnegative vector summing to 1")
    return DynamicalSystem(kind=kind, dim=dim, seed=seed, p=p, states=states, probs=pr, word_table=table)


# ---------------------------------------------------------------------------
# bump profiles

# value and derivative on [0, 1); per-cell placements tile these
_PROFILES = {
    # vanishes with its derivative at cell boundaries, band-limited profile
    "sine": (
        lambda u: (1.0 - np.cos(TWO_PI * u)) / TWO_PI,
        lambda u: np.sin(TWO_PI * u),
    ),
    # C^2 polynomial bump, unit peak value
    "poly": (
        lambda u: 64.0 * u**3 * (1.0 - u) ** 3,
        lambda u: 192.0 * u**2 * (1.0 - u) ** 2 * (1.0 - 2.0 * u),
    ),
    # global incompressible-style flow, grad Z = cos(2 pi u); not a bump
    "sine_flow": (
        lambda u: np.sin(TWO_PI * u) / TWO_PI,
        lambda u: np.cos(TWO_PI * u),
    ),
}


def bump_profile(name: str):
    try:
        return _PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown bump profile '{name}' (have {sorted(_PROFILES)})") from None


# ---------------------------------------------------------------------------
# realizations


@dataclass
class ZRealization:
    """One frozen realization of Z on the p-supercell.

    coeffs holds the supercell Fourier coefficients of the components of Z
    (frequencies m/p for |m|_inf <= cutoff), which is everything assembly
    and pointwise evaluation need; gradients are exact Fourier derivatives
    of the frozen object.
    """

    period: int
    cutoff: int
    coeffs: np.ndarray            # (n,) + (2*cutoff+1,)*n
    eta: float
    omega: tuple = ()
    nu: float | None = None

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def _lattice(self) -> FourierLattice:
        return build_lattice(self.dim, self.cutoff)

    def z_on_grid(self, npts: int) -> np.ndarray:
        return synth_grid(self.coeffs, self.cutoff, npts, self.dim).real

    def grad_on_grid(self, npts: int) -> np.ndarray:
        """(n, n, grid) samples of d_i Z_j over the supercell."""
        n = self.dim
        lat = self._lattice()
        modes = lat.modes.T.reshape((n, 1) + lat.grid_shape())
        factor = 2j * np.pi * modes / self.period
        gcoeffs = factor * self.coeffs[None, :, ...]
        return synth_grid(gcoeffs, self.cutoff, npts, n).real

    def _phases(self, points: np.ndarray) -> np.ndarray:
        lat = self._lattice()
        return np.exp(2j * np.pi * (lat.modes @ points) / self.period)

    def z_at(self, points: np.ndarray) -> np.ndarray:
        """Z at arbitrary points, points shape (n, N) -> (n, N)."""
        ph = self._phases(np.atleast_2d(points))
        flat = self.coeffs.reshape(self.dim, -1)
        return (flat @ ph).real

    def grad_at(self, points: np.ndarray) -> np.ndarray:
        """d_i Z_j at arbitrary points -> (n, n, N)."""
        points = np.atleast_2d(points)
        ph = self._phases(points)
        lat = self._lattice()
        flat = self.coeffs.reshape(self.dim, -1)
        out = np.empty((self.dim, self.dim, points.shape[1]))
        for i in range(self.dim):
            fac = 2j * np.pi * lat.modes[:, i] / self.period
            out[i] = ((flat * fac[None, :]) @ ph).real
        return out


def _det_from_grad(g: np.ndarray, eta: float) -> np.ndarray:
    """det(I + eta * g) for g of shape (n, n, ...), n in {1, 2}."""
    n = g.shape[0]
    if n == 1:
        return 1.0 + eta * g[0, 0]
    if n == 2:
        return (1.0 + eta * g[0, 0]) * (1.0 + eta * g[1, 1]) - eta**2 * g[0, 1] * g[1, 0]
    raise ConfigError("determinants implemented for dimensions 1 and 2")


# ---------------------------------------------------------------------------
# deformation specs


@dataclass
class DeformationSpec:
    """A stationary deformation family with its ensemble statistics.

    egrad_z and ediv_z are unit-cell fields E[grad Z] and E[div Z] computed
    exactly from the frozen coefficients; c_phi = det(E[int grad Phi]).
    nu and lip are measured on the frozen realizations (lip in the
    Frobenius norm, so the identity map scores sqrt(n)).
    """

    kind: str
    dim: int
    eta: float
    period: int
    seed: int
    profile: str
    amplitudes: np.ndarray        # (states, n)
    z_cutoff: int                 # per-cell frequency budget
    system: DynamicalSystem | None
    egrad_z: PeriodicField
    ediv_z: PeriodicField
    c_phi: float
    nu: float
    lip: float
    invertible: bool
    base_coeffs: np.ndarray | None = None
    word: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def supercell_cutoff(self) -> int:
        return self.z_cutoff * self.period

    def sample_realization(self, omega=None) -> ZRealization:
        """Frozen realization for a state omega (cyclic/deterministic)."""
        if self.base_coeffs is None:
            raise ConfigError(f"{self.kind} deformations have no periodic realizations")
        if omega is None:
            omega = np.zeros(self.dim, dtype=int)
        omega = np.asarray(omega, dtype=int).reshape(self.dim)
        lat = build_lattice(self.dim, self.supercell_cutoff)
        phase = np.exp(2j * np.pi * (lat.modes @ omega) / self.period)
        coeffs = self.base_coeffs * phase.reshape(lat.grid_shape())[None, ...]
        return ZRealization(
            period=self.period,
            cutoff=self.supercell_cutoff,
            coeffs=coeffs,
            eta=self.eta,
            omega=tuple(int(v) % self.period for v in omega),
        )

    def realizations(self):
        if self.kind == "cyclic":
            return [self.sample_realization(w) for w in self.system.all_states()]
        return [self.sample_realization()]

    def grad_window(self, points: np.ndarray, omega=None) -> np.ndarray:
        """d_i Z_j at arbitrary points from the unfrozen bump sum.

        This is the evaluation path for i.i.d. symbol fields, whose
        realizations are not periodic; points land in any cell of Z^n.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n, npts = points.shape
        cells = np.floor(points).astype(np.int64)
        u = points - cells
        if self.system is None:
            w = np.zeros(npts, dtype=int)
        else:
            w = self.system.word(cells.T, np.zeros(n, dtype=int) if omega is None else omega)
        value, deriv = bump_profile(self.profile)
        vals = value(u)
        ders = deriv(u)
        out = np.zeros((n, n, npts))
        for j in range(n):
            amps = self.amplitudes[w, j]
            for i in range(n):
                prod = ders[i].copy()
                for l in range(n):
                    if l != i:
                        prod = prod * vals[l]
                out[i, j] = amps * prod
        return out

    def to_config(self) -> dict:
        out = dict(self.config)
        out.update(
            {
                "kind": self.kind,
                "dim": self.dim,
                "eta": self.eta,
                "p": self.period,
                "seed": self.seed,
                "profile": self.profile,
                "amplitudes": np.asarray(self.amplitudes).tolist(),
                "z_cutoff": self.z_cutoff,
            }
        )
        if self.word is not None:
            out["word"] = np.asarray(self.word).ravel().tolist()
        return out


def _bump_values_on_grid(spec_dim, profile, amplitudes, word_grid, npts_per_cell, p):
    """Sample sum_k bump_{w(k)}(y - k) on a uniform supercell grid."""
    n = spec_dim
    value, _ = bump_profile(profile)
    m = npts_per_cell
    ax_u = (np.arange(m) + 0.0) / m
    u_axes = np.meshgrid(*([np.tile(ax_u, p)] * n), indexing="ij")
    cell_ax = np.repeat(np.arange(p), m)
    cell_axes = np.meshgrid(*([cell_ax] * n), indexing="ij")
    w = word_grid[tuple(cell_axes)]
    profile_prod = np.ones((p * m,) * n)
    for axis in range(n):
        profile_prod = profile_prod * value(u_axes[axis])
    out = np.empty((n,) + (p * m,) * n)
    for j in range(n):
        out[j] = amplitudes[w, j] * profile_prod
    return out


def build_perturbed_identity(config: dict, eta: float | None = None) -> DeformationSpec:
    """Construct Phi = id + eta*Z from a JSON-friendly description.

    config keys: kind (deterministic | cyclic | bernoulli), dim, eta,
    profile, amplitudes (per-symbol vectors; a scalar 'amplitude' is
    shorthand for a two-symbol family with a silent symbol 0), p and
    word/seed for cyclic, states/probs for bernoulli, z_cutoff (per-cell
    frequency budget of the frozen representation).

    A deformation that loses invertibility at the requested eta comes back
    flagged (invertible=False), not as an error; assembly refuses it later.
    """
    cfg = dict(config)
    kind = cfg.get("kind", "deterministic")
    if kind not in ("deterministic", "cyclic", "bernoulli"):
        raise ConfigError(f"unknown deformation kind '{kind}'")
    n = int(cfg.get("dim", 1))
    eta = float(cfg.get("eta", 0.0) if eta is None else eta)
    if not 0.0 <= eta < 1.0:
        raise ConfigError(f"eta must lie in [0, 1), got {eta}")
    profile = cfg.get("profile", "sine")
    bump_profile(profile)
    seed = int(cfg.get("seed", 0))
    p = int(cfg.get("p", cfg.get("period", 1))) if kind == "cyclic" else 1
    states = int(cfg.get("states", 2))

    if "amplitudes" in cfg:
        amplitudes = np.asarray(cfg["amplitudes"], dtype=float)
        if amplitudes.ndim == 1:
            amplitudes = amplitudes[:, None] * np.ones((1, n))
        states = amplitudes.shape[0]
    else:
        amp = float(cfg.get("amplitude", 1.0))
        if kind == "deterministic":
            amplitudes = np.full((1, n), amp)
            states = 1
        else:
            amplitudes = np.zeros((states, n))
            amplitudes[1:] = amp
    if amplitudes.shape != (states, n):
        raise ConfigError(f"amplitudes must have shape ({states}, {n})")

    default_cut = 1 if profile == "sine_flow" and kind == "deterministic" else 8
    z_cutoff = int(cfg.get("z_cutoff", default_cut))
    if z_cutoff < 1:
        raise ConfigError("z_cutoff must be positive")

    system = None
    word = None
    base_coeffs = None
    if kind == "cyclic":
        system = make_dynamical_system(
            "cyclic_shift", dim=n, p=p, states=states, seed=seed, word=cfg.get("word")
        )
        word = system.word_table
    elif kind == "bernoulli":
        system = make_dynamical_system(
            "bernoulli", dim=n, states=states, probs=cfg.get("probs"), seed=seed
        )

    kz = z_cutoff * p
    lat_super = build_lattice(n, kz)
    lat_unit = build_lattice(n, z_cutoff)

    if kind == "bernoulli":
        # ensemble statistics only: E[Z] = sum_s p_s * bump_s periodized
        m = max(4 * (2 * z_cutoff + 1), 64)
        freq = system.state_frequencies()
        mean_amp = freq @ amplitudes                       # (n,)
        single = _bump_values_on_grid(n, profile, np.ones((1, n)), np.zeros((1,) * n, dtype=int), m, 1)
        zc_unit = analyze_grid(single, z_cutoff, n)        # (n,) + unit lattice
        e_z = mean_amp.reshape((n,) + (1,) * n) * zc_unit
    else:
        m = max(4 * (2 * z_cutoff + 1), 64)
        if kind == "deterministic":
            word_grid = np.zeros((1,) * n, dtype=int)
        else:
            word_grid = word
        samples = _bump_values_on_grid(n, profile, amplitudes, word_grid, m, p)
        base_coeffs = analyze_grid(samples, kz, n)
        # shift-averaging keeps exactly the frequencies divisible by p
        stride = tuple(slice(None, None, p) for _ in range(n))
        e_z = base_coeffs[(slice(None),) + stride] / 1.0

    modes_unit = lat_unit.modes.T.reshape((n, 1) + lat_unit.grid_shape())
    egrad_coeffs = 2j * np.pi * modes_unit * e_z[None, ...]
    egrad_z = PeriodicField(lat_unit, egrad_coeffs, tensor_rank="matrix")
    ediv_coeffs = np.trace(egrad_coeffs, axis1=0, axis2=1)
    ediv_z = PeriodicField(lat_unit, ediv_coeffs, tensor_rank="scalar")

    zero = (slice(None), slice(None)) + (z_cutoff,) * n
    mean_grad = egrad_coeffs[zero].real
    c_phi = float(np.linalg.det(np.eye(n) + eta * mean_grad))

    spec = DeformationSpec(
        kind=kind,
        dim=n,
        eta=eta,
        period=p,
        seed=seed,
        profile=profile,
        amplitudes=amplitudes,
        z_cutoff=z_cutoff,
        system=system,
        egrad_z=egrad_z,
        ediv_z=ediv_z,
        c_phi=c_phi,
        nu=1.0,
        lip=float(math.sqrt(n)),
        invertible=True,
        base_coeffs=base_coeffs,
        word=word,
        config=cfg,
    )

    if kind == "bernoulli":
        gp = max(4 * (2 * z_cutoff + 1), 64)
        ax = (np.arange(gp) + 0.5) / gp
        pts = np.stack([g.ravel() for g in np.meshgrid(*([ax] * n), indexing="ij")])
        nu = math.inf
        lip = 0.0
        for s in range(states):
            value, deriv = bump_profile(profile)
            cells = np.floor(pts).astype(int)
            u = pts - cells
            vals, ders = value(u), deriv(u)
            g = np.zeros((n, n, pts.shape[1]))
            for j in range(n):
                for i in range(n):
                    prod = ders[i].copy()
                    for l in range(n):
                        if l != i:
                            prod = prod * vals[l]
                    g[i, j] = amplitudes[s, j] * prod
            det = _det_from_grad(g, eta)
            nu = min(nu, float(det.min()))
            gphi = np.eye(n).reshape(n, n, 1) + eta * g
            lip = max(lip, float(np.sqrt((gphi**2).sum(axis=(0, 1))).max()))
    else:
        real = spec.sample_realization()
        gp = max(4 * (2 * kz + 1), 64 * p)
        g = real.grad_on_grid(gp)
        det = _det_from_grad(g, eta)
        nu = float(det.min())
        gphi = np.eye(n).reshape((n, n) + (1,) * n) + eta * g
        lip = float(np.sqrt((gphi**2).sum(axis=(0, 1))).max())

    spec.nu = nu
    spec.lip = lip
    spec.invertible = bool(nu > 0.0)
    return spec


# ---------------------------------------------------------------------------
# ergodic averaging


def birkhoff_mean(fn, dim: int, ts, subdivisions: int = 32, richardson: bool = False):
    """Midpoint-rule volume averages of fn over the expanding boxes [0, t)^n.

    fn receives meshgrid coordinate arrays and must broadcast.  Estimates
    are exact (to quadrature roundoff) whenever fn is periodic with period
    dividing t and band-limited below the subdivision rate; aperiodic fn
    converge at the ergodic rate, which the optional Richardson column
    (rate-1 extrapolation in 1/t) accelerates.
    """
    ts = [float(t) for t in np.atleast_1d(ts)]
    if any(t <= 0 for t in ts):
        raise ConfigError("window sizes must be positive")
    est = np.empty(len(ts))
    for k, t in enumerate(ts):
        m = max(1, int(round(t * subdivisions)))
        ax = (np.arange(m) + 0.5) * (t / m)
        grids = np.meshgrid(*([ax] * dim), indexing="ij")
        est[k] = float(np.mean(fn(*grids)))
    if not richardson:
        return est
    rich = est.copy()
    for k in range(1, len(ts)):
        t0, t1 = ts[k - 1], ts[k]
        if t1 > t0:
            rich[k] = (t1 * est[k] - t0 * est[k - 1]) / (t1 - t0)
    return est, rich


def deformed_mean_closed_form(fn, spec: DeformationSpec, npts: int | None = None) -> float:
    """E[ int_cell f(y) det(grad Phi)(y) dy ] / c_phi, an exact finite sum.

    For the cyclic action every realization is an integer translate of the
    base word and f is cell-periodic, so a single supercell quadrature is
    the full ensemble average; for i.i.d. symbols the per-cell states are
    independent and the average splits over symbols.
    """
    n = spec.dim
    if spec.kind == "bernoulli":
        freq = spec.system.state_frequencies()
        m = npts or max(8 * (2 * spec.z_cutoff + 1), 128)
        ax = (np.arange(m) + 0.5) / m
        grids = np.meshgrid(*([ax] * n), indexing="ij")
        pts = np.stack([g.ravel() for g in grids])
        fvals = np.asarray(fn(*grids), dtype=float).ravel()
        value, deriv = bump_profile(spec.profile)
        vals, ders = value(pts), deriv(pts)
        total = 0.0
        for s in range(spec.amplitudes.shape[0]):
            g = np.zeros((n, n, pts.shape[1]))
            for j in range(n):
                for i in range(n):
                    prod = ders[i].copy()
                    for l in range(n):
                        if l != i:
                            prod = prod * vals[l]
                    g[i, j] = spec.amplitudes[s, j] * prod
            total += freq[s] * float(np.mean(fvals * _det_from_grad(g, spec.eta)))
        return total / spec.c_phi
    real = spec.sample_realization()
    m = npts or max(8 * (2 * real.cutoff + 1) // spec.period, 128)
    m = m * spec.period
    ax = np.arange(m) * (spec.period / m)
    grids = np.meshgrid(*([ax] * n), indexing="ij")
    fvals = np.asarray(fn(*grids), dtype=float)
    det = _det_from_grad(real.grad_on_grid(m), spec.eta)
    return float(np.mean(fvals * det)) / spec.c_phi


def ergodic_table(spec: DeformationSpec, fn, ts, omega=None, subdivisions: int = 32):
    """Window estimates of the deformed mean against its closed form.

    Rows: window size t, the Birkhoff estimate over [0, t)^n for one
    realization, the ensemble closed form, and their absolute gap.
    """
    closed = deformed_mean_closed_form(fn, spec)
    n = spec.dim
    if spec.kind == "bernoulli":
        state = np.zeros(n, dtype=int) if omega is None else np.asarray(omega, dtype=int)

        def g(*grids):
            pts = np.stack([a.ravel() for a in grids])
            det = _det_from_grad(spec.grad_window(pts, state), spec.eta)
            return (np.asarray(fn(*grids), dtype=float).ravel() * det).reshape(grids[0].shape)

    else:
        real = spec.sample_realization(omega)

        def g(*grids):
            pts = np.stack([a.ravel() for a in grids])
            det = _det_from_grad(real.grad_at(pts), spec.eta)
            return (np.asarray(fn(*grids), dtype=float).ravel() * det).reshape(grids[0].shape)

    est = birkhoff_mean(g, n, ts, subdivisions=subdivisions) / spec.c_phi
    return [
        {"t": float(t), "estimate": float(e), "closed_form": closed, "abs_error": float(abs(e - closed))}
        for t, e in zip(ts, est)
    ]


# ---------------------------------------------------------------------------
# validation


def validate_deformation(spec: DeformationSpec, npts: int | None = None) -> dict:
    """Measure invertibility, Lipschitz bound, and stationarity residual.

    nu_observed is the grid minimum of det(grad Phi), lip_observed the grid
    maximum of the Frobenius norm of grad Phi (identity scores sqrt(n) per
    this convention), and stationarity_residual the worst mismatch between
    translating a realization and shifting its state.
    """
    n = spec.dim
    if spec.kind == "bernoulli":
        sites = np.arange(-50, 50, dtype=np.int64)
        grids = np.meshgrid(*([sites] * n), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        shift = np.ones(n, dtype=int)
        a = spec.system.word(pts + shift, np.zeros(n, dtype=int))
        b = spec.system.word(pts, shift)
        stat = float(np.max(np.abs(a - b)))
        return {
            "nu_observed": spec.nu,
            "lip_observed": spec.lip,
            "stationarity_residual": stat,
            "invertible": spec.invertible,
        }
    p = spec.period
    m = npts or max(4 * (2 * spec.supercell_cutoff + 1) // p, 32)
    gp = m * p
    base = spec.sample_realization()
    g0 = base.grad_on_grid(gp)
    nu_obs = float(_det_from_grad(g0, spec.eta).min())
    gphi = np.eye(n).reshape((n, n) + (1,) * n) + spec.eta * g0
    lip_obs = float(np.sqrt((gphi**2).sum(axis=(0, 1))).max())
    stat = 0.0
    if spec.kind == "cyclic":
        shift = np.zeros(n, dtype=int)
        shift[0] = 1
        g1 = spec.sample_realization(shift).grad_on_grid(gp)
        rolled = np.roll(g0, -m, axis=2)  # axis 2 is the first grid axis
        stat = float(np.max(np.abs(g1 - rolled)))
        scale = max(1.0, float(np.max(np.abs(g0))))
        stat /= scale
    return {
        "nu_observed": nu_obs,
        "lip_observed": lip_obs,
        "stationarity_residual": stat,
        "invertible": spec.invertible,
    }
