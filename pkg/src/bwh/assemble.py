"""Fourier-Galerkin assembly of shifted cell operators.

All cell problems handled here share one entry structure.  With basis
functions e_m(y) = exp(2 i pi q_m . y) indexed by lattice modes m, and
difference d = m_row - m_col, the Hermitian form of

    -(div + 2 i pi theta) . K_grad (grad + 2 i pi theta) + potential

discretizes to

    H[r, c] = 4 pi^2 ( q_r^T TT_d q_c + q_r^T TU_d theta
                       + theta^T TW_d q_c + theta^T TR_d theta ) + TV_d

where the tables TT, TU, TW, TR are Fourier coefficients of composite
coefficient fields and TV collects the potential (weighted by a volume
factor in the deformed case).  The periodic problem has all four tables
equal to the coefficients of A; the pulled-back deformed problem has
TT = G^-T A G^-1 det G, TU = G^-T A det G, TW = A G^-1 det G, TR = A det G
with G = I + eta*grad Z, plus a mass table TM = det G; the quasi-periodic
reduction has the same structure with G replaced by B_per and frequency
vectors q = Lambda^T m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .fields import (
    CellMedium,
    FourierLattice,
    PeriodicField,
    analyze_grid,
    build_lattice,
    convolve_coeffs,
    synth_grid,
)

HERMITICITY_RTOL = 1e-12
FOUR_PI_SQ = 4.0 * math.pi**2


# ---------------------------------------------------------------------------
# difference-table plumbing


def diff_shape(lattice: FourierLattice) -> tuple[int, ...]:
    return (2 * lattice.side - 1,) * lattice.dim


def diff_linear_index(lattice: FourierLattice) -> np.ndarray:
    """Linear index into the flattened difference table for every (row, col)."""
    modes = lattice.modes
    off = lattice.side - 1
    d = modes[:, None, :] - modes[None, :, :] + off
    shape = diff_shape(lattice)
    lin = np.zeros(d.shape[:2], dtype=np.int64)
    for ax in range(lattice.dim):
        lin = lin * shape[ax] + d[:, :, ax]
    return lin


def place_in_diff(coeffs: np.ndarray, src_cutoff: int, lattice: FourierLattice, stride: int = 1) -> np.ndarray:
    """Embed coefficients of a field into the difference table of `lattice`.

    Mode m of the source lands at difference stride*m; source modes whose
    scaled position falls outside the realizable difference range contribute
    to no matrix entry and are dropped.
    """
    lead = coeffs.shape[: coeffs.ndim - lattice.dim]
    out = np.zeros(lead + diff_shape(lattice), dtype=complex)
    off = lattice.side - 1
    src = np.arange(-src_cutoff, src_cutoff + 1)
    pos = stride * src + off
    keep = (pos >= 0) & (pos <= 2 * off)
    sel_src = [np.where(keep)[0]] * lattice.dim
    sel_dst = [pos[keep]] * lattice.dim
    ix_src = np.ix_(*([np.arange(n) for n in lead] + sel_src))
    ix_dst = np.ix_(*([np.arange(n) for n in lead] + sel_dst))
    out[ix_dst] = coeffs[ix_src]
    return out


def tables_from_grid(samples: dict[str, np.ndarray], lattice: FourierLattice) -> dict[str, np.ndarray]:
    """DFT grid samples of composite fields into difference tables.

    Each sample array covers the assembly cell with the lattice's periodicity;
    the table entry at difference d is the sample DFT coefficient at frequency
    d (npts must exceed the difference range, which callers guarantee).
    """
    out = {}
    for key, arr in samples.items():
        npts = arr.shape[-1]
        if npts < 2 * lattice.side - 1:
            raise ConfigError("assembly grid too coarse for the difference range")
        lead = arr.shape[: arr.ndim - lattice.dim]
        hat = np.fft.fftn(arr, axes=tuple(range(len(lead), arr.ndim))) / npts**lattice.dim
        rng = np.arange(-(lattice.side - 1), lattice.side) % npts
        ix = np.ix_(*([np.arange(n) for n in lead] + [rng] * lattice.dim))
        out[key] = hat[ix]
    return out


class CellOperator:
    """One assembled operator family over a fixed lattice and tables.

    theta enters only through the closed-form entry structure, so moving in
    theta is cheap (tables are shared).  `n` is the physical dimension of the
    frequency vectors, which can differ from the lattice dimension in the
    quasi-periodic reduction.
    """

    def __init__(
        self,
        lattice: FourierLattice,
        qvecs: np.ndarray,
        theta,
        tables: dict[str, np.ndarray],
        n: int,
        period: int = 1,
    ):
        self.lattice = lattice
        self.qvecs = np.asarray(qvecs, dtype=float)
        self.theta = np.atleast_1d(np.asarray(theta, dtype=float))
        self.tables = tables
        self.n = n
        self.period = period
        if self.theta.shape != (n,):
            raise ConfigError(f"theta must have {n} components, got shape {self.theta.shape}")
        if self.qvecs.shape != (lattice.flat_size, n):
            raise ConfigError("frequency vector table has the wrong shape")
        self._didx = diff_linear_index(lattice)

    def with_theta(self, theta) -> "CellOperator":
        return CellOperator(self.lattice, self.qvecs, theta, self.tables, self.n, self.period)

    def _flat(self, key: str) -> np.ndarray:
        tab = self.tables[key]
        lead = tab.shape[: tab.ndim - self.lattice.dim]
        return tab.reshape(lead + (-1,))

    def _gather(self, key: str, comp=()) -> np.ndarray:
        return self._flat(key)[comp + (self._didx,)]

    def matrix(self) -> np.ndarray:
        th = self.theta
        q = self.qvecs
        F = self.lattice.flat_size
        h = np.zeros((F, F), dtype=complex)
        for i in range(self.n):
            qi = q[:, i][:, None]
            for j in range(self.n):
                qj = q[:, j][None, :]
                h += self._gather("tt", (i, j)) * (qi * qj)
                h += self._gather("tu", (i, j)) * (qi * th[j])
                h += self._gather("tw", (i, j)) * (th[i] * qj)
                h += self._gather("tr", (i, j)) * (th[i] * th[j])
        h *= FOUR_PI_SQ
        h += self._gather("tv")
        return h

    def mass(self) -> np.ndarray | None:
        if "tm" not in self.tables:
            return None
        return self._gather("tm")

    def dtheta(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n:
            raise ConfigError(f"axis {k} out of range for dimension {self.n}")
        th = self.theta
        q = self.qvecs
        F = self.lattice.flat_size
        d = np.zeros((F, F), dtype=complex)
        for i in range(self.n):
            d += self._gather("tu", (i, k)) * q[:, i][:, None]
            d += self._gather("tw", (k, i)) * q[:, i][None, :]
            d += (self._gather("tr", (k, i)) + self._gather("tr", (i, k))) * th[i]
        return FOUR_PI_SQ * d

    def d2theta(self, k: int, l: int) -> np.ndarray:
        return FOUR_PI_SQ * (self._gather("tr", (k, l)) + self._gather("tr", (l, k)))

    def bloch(self) -> "BlochMatrix":
        return BlochMatrix(H=self.matrix(), M=self.mass(), theta=self.theta.copy(), operator=self)


@dataclass
class BlochMatrix:
    """Assembled (H, M) pair at one Bloch frequency; M None means identity."""

    H: np.ndarray
    M: np.ndarray | None
    theta: np.ndarray
    operator: CellOperator | None = None

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        scale = np.linalg.norm(self.H)
        if scale > 0:
            dev = np.linalg.norm(self.H - self.H.conj().T)
            if dev > HERMITICITY_RTOL * scale:
                raise NumericalError(f"assembled H is not Hermitian: ||H-H*||_F = {dev:.3e} vs {scale:.3e}")
        if self.M is not None:
            mscale = np.linalg.norm(self.M)
            if np.linalg.norm(self.M - self.M.conj().T) > HERMITICITY_RTOL * max(mscale, 1.0):
                raise NumericalError("mass matrix is not Hermitian")
            try:
                np.linalg.cholesky(self.M)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("mass matrix is not positive definite") from exc

    @property
    def size(self) -> int:
        return self.H.shape[0]


# ---------------------------------------------------------------------------
# periodic assembly


def _medium_tables(medium: CellMedium, lattice: FourierLattice, period: int) -> dict[str, np.ndarray]:
    a = place_in_diff(medium.A.coeffs, medium.A.lattice.cutoff, lattice, stride=period)
    v = place_in_diff(medium.V.coeffs, medium.V.lattice.cutoff, lattice, stride=period)
    return {"tt": a, "tu": a, "tw": a, "tr": a, "tv": v}


def periodic_operator(medium: CellMedium, theta, lattice: FourierLattice, period: int = 1) -> CellOperator:
    if medium.dim != lattice.dim:
        raise ConfigError(f"medium dimension {medium.dim} does not match lattice dimension {lattice.dim}")
    qvecs = lattice.modes.astype(float) / period
    tables = _medium_tables(medium, lattice, period)
    return CellOperator(lattice, qvecs, theta, tables, n=lattice.dim, period=period)


def assemble_periodic(medium: CellMedium, theta, lattice: FourierLattice, period: int = 1) -> BlochMatrix:
    """Galerkin matrix of the shifted periodic cell operator at frequency theta.

    With period > 1 the basis covers the p-supercell (frequencies m/p), which
    is the eta = 0 limit of the deformed assembly.
    """
    return periodic_operator(medium, theta, lattice, period).bloch()


def dtheta_operator(medium: CellMedium, theta, lattice: FourierLattice, k: int, period: int = 1) -> BlochMatrix:
    """Derivative of the assembled H with respect to theta_k (Hermitian).

    This is the pairing that drives the first auxiliary equation: its
    expectation in an M-normalized eigenvector is the Hellmann-Feynman
    gradient of the band.
    """
    op = periodic_operator(medium, theta, lattice, period)
    dk = op.dtheta(k)
    return BlochMatrix(H=dk, M=None, theta=op.theta, operator=op)


# ---------------------------------------------------------------------------
# deformed supercell assembly


def _supercell_npts(lattice: FourierLattice, medium: CellMedium, period: int, z_cutoff: int, oversample: int = 4) -> int:
    need = max(
        2 * lattice.side,                      # difference range 4N+1
        period * (2 * medium.cutoff + 1),      # medium content on the supercell
        2 * z_cutoff + 1,
    )
    return 1 << max(6, math.ceil(math.log2(oversample * need)))


def deformed_operator(
    medium: CellMedium,
    realization,
    eta: float,
    theta,
    lattice: FourierLattice,
    period: int | None = None,
    oversample: int = 4,
) -> CellOperator:
    """Pull-back of the deformed cell problem to the reference supercell.

    `realization` provides the stationary vector field Z on the p-supercell
    through grad_on_grid(npts); the deformation is Phi(y) = y + eta*Z(y), so
    G = I + eta*gradZ (with (gradZ)_{ij} = d_i Z_j and pull-back gradient
    G^{-1} grad).  Composite coefficient tables are sampled on an oversampled
    grid and transformed; the mass table is det G.
    """
    n = lattice.dim
    p = int(realization.period if period is None else period)
    if period is not None and getattr(realization, "period", period) != period:
        raise ConfigError("realization period does not match the requested supercell period")
    if medium.dim != n:
        raise ConfigError("medium dimension does not match lattice dimension")
    npts = _supercell_npts(lattice, medium, p, realization.cutoff, oversample)

    gradz = realization.grad_on_grid(npts)          # (n, n, grid...) d_i Z_j
    eye = np.eye(n).reshape((n, n) + (1,) * n)
    G = eye + eta * gradz
    if n == 1:
        detG = G[0, 0].real
        Ginv = (1.0 / G[0, 0]).reshape((1, 1) + detG.shape).real
    else:
        detG = (G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]).real
        Ginv = np.empty_like(G)
        Ginv[0, 0] = G[1, 1]
        Ginv[1, 1] = G[0, 0]
        Ginv[0, 1] = -G[0, 1]
        Ginv[1, 0] = -G[1, 0]
        Ginv = (Ginv / detG).real
    nu = getattr(realization, "nu", None)
    min_det = float(detG.min())
    floor = (nu - 1e-8) if nu is not None else 1e-10
    if min_det < floor:
        raise NumericalError(
            f"deformation degenerate at eta={eta}: min det(grad Phi) = {min_det:.6g} below {floor:.6g}"
        )

    a = synth_grid(medium.A.coeffs, medium.A.lattice.cutoff, npts, n, stride=p).real
    v = synth_grid(medium.V.coeffs, medium.V.lattice.cutoff, npts, n, stride=p).real

    agi = np.einsum("ik...,kj...->ij...", a, Ginv)            # A G^-1
    git_a = np.einsum("ki...,kj...->ij...", Ginv, a)          # G^-T A
    git_a_gi = np.einsum("ik...,kj...->ij...", git_a, Ginv)   # G^-T A G^-1

    samples = {
        "tt": git_a_gi * detG,
        "tu": git_a * detG,
        "tw": agi * detG,
        "tr": a * detG,
        "tv": v * detG,
        "tm": detG.astype(complex),
    }
    tables = tables_from_grid(samples, lattice)
    qvecs = lattice.modes.astype(float) / p
    return CellOperator(lattice, qvecs, theta, tables, n=n, period=p)


def assemble_supercell_deformed(
    medium: CellMedium,
    realization,
    eta: float,
    theta,
    period: int,
    lattice: FourierLattice,
) -> BlochMatrix:
    """Generalized (H, M) pair of the deformed problem on the p-supercell."""
    return deformed_operator(medium, realization, eta, theta, lattice, period=period).bloch()


# ---------------------------------------------------------------------------
# quasi-periodic reduction


@dataclass
class QuasiPeriodicSpec:
    """Frequency data of the quasi-periodic reduction.

    freq_matrix has m rows, each a frequency vector in R^n; fields live on
    the m-torus while the physical frequency vectors Lambda^T k live in R^n.
    b_per is the gradient of the deformation on the m-torus (identity when
    None); with m != n only an isotropic b_per (and isotropic A) is
    representable, which covers the supported cases.
    """

    freq_matrix: np.ndarray
    b_per: PeriodicField | None = None

    def __post_init__(self):
        self.freq_matrix = np.atleast_2d(np.asarray(self.freq_matrix, dtype=float))

    @property
    def torus_dim(self) -> int:
        return self.freq_matrix.shape[0]

    @property
    def physical_dim(self) -> int:
        return self.freq_matrix.shape[1]


def check_frequency_matrix(freq_matrix, d: float, search_radius: int) -> dict:
    """Diagnose the finiteness condition for {k in Z^m : |Lambda^T k| <= d}.

    positive means det(Lambda Lambda^T) > 0 (Gram of the frequency rows),
    which bounds |k| <= ||B^-1|| ||Lambda|| |Lambda^T k| and proves the set
    finite.  Witnesses are the enumerated members within the search radius;
    when positivity fails and the enumeration keeps finding members at the
    radius boundary the result is marked inconclusive.
    """
    if d <= 0:
        raise ConfigError("bound d must be positive")
    lam = np.atleast_2d(np.asarray(freq_matrix, dtype=float))
    m = lam.shape[0]
    gram = lam @ lam.T
    det = float(np.linalg.det(gram))
    positive = det > 1e-12 * max(1.0, float(np.abs(gram).max())) ** m
    bound_radius = None
    if positive:
        bound_radius = float(np.linalg.norm(np.linalg.inv(gram), 2) * np.linalg.norm(lam, 2) * d)

    rng = np.arange(-search_radius, search_radius + 1)
    grids = np.meshgrid(*([rng] * m), indexing="ij")
    ks = np.stack([g.ravel() for g in grids], axis=-1)
    norms = np.linalg.norm(ks @ lam, axis=1)
    members = ks[norms <= d + 1e-12]
    witnesses = [tuple(int(v) for v in k) for k in members]

    boundary_hit = any(max(abs(v) for v in k) >= search_radius for k in witnesses)
    if positive:
        finite = True
        inconclusive = bound_radius > search_radius
    else:
        finite = False
        inconclusive = boundary_hit
    return {
        "positive": positive,
        "finite_set": finite,
        "witnesses": witnesses,
        "inconclusive": inconclusive,
        "bound_radius": bound_radius,
        "gram_det": det,
    }


def _isotropic_part(field: PeriodicField, label: str) -> np.ndarray:
    """Scalar coefficients of a matrix field required to be a(y)*I."""
    c = field.coeffs
    mdim = field.dim
    diag = c[0, 0]
    for i in range(mdim):
        for j in range(mdim):
            ref = diag if i == j else 0.0
            if np.max(np.abs(c[i, j] - ref)) > 1e-12 * max(1.0, np.max(np.abs(c))):
                raise ConfigError(
                    f"{label} must be isotropic (a(y)*I) when torus and physical dimensions differ"
                )
    return diag


def quasiperiodic_operator(spec: QuasiPeriodicSpec, medium: CellMedium, theta) -> CellOperator:
    m, n = spec.torus_dim, spec.physical_dim
    if medium.dim != m:
        raise ConfigError(f"medium fields must live on the {m}-torus")
    lam = spec.freq_matrix
    lattice = medium.A.lattice
    qvecs = medium.A.lattice.modes.astype(float) @ lam  # (F, n) rows Lambda^T k

    if spec.b_per is None and m == n:
        acoef = medium.A.coeffs
        a = place_in_diff(acoef, lattice.cutoff, lattice)
        v = place_in_diff(medium.V.coeffs, medium.V.lattice.cutoff, lattice)
        tables = {"tt": a, "tu": a, "tw": a, "tr": a, "tv": v}
        return CellOperator(lattice, qvecs, theta, tables, n=n)

    # grid path: sample a(y), b(y) on the m-torus and build weighted tables
    npts = 1 << max(5, math.ceil(math.log2(4 * lattice.side)))
    if m == n:
        a = synth_grid(medium.A.coeffs, lattice.cutoff, npts, m).real
    else:
        a_scal = synth_grid(_isotropic_part(medium.A, "A"), lattice.cutoff, npts, m).real
        a = np.eye(n).reshape((n, n) + (1,) * m) * a_scal
    if spec.b_per is None:
        b = np.eye(n).reshape((n, n) + (1,) * m) * np.ones((npts,) * m)
    elif spec.b_per.dim == m and m == n:
        b = synth_grid(spec.b_per.coeffs, spec.b_per.lattice.cutoff, npts, m).real
    else:
        b_scal = synth_grid(_isotropic_part(spec.b_per, "b_per"), spec.b_per.lattice.cutoff, npts, m).real
        b = np.eye(n).reshape((n, n) + (1,) * m) * b_scal
    if n == 1:
        detb = b[0, 0]
        binv = (1.0 / b[0, 0]).reshape(b.shape)
    else:
        detb = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
        binv = np.empty_like(b)
        binv[0, 0] = b[1, 1]
        binv[1, 1] = b[0, 0]
        binv[0, 1] = -b[0, 1]
        binv[1, 0] = -b[1, 0]
        binv = binv / detb
    w = np.abs(detb)
    abi = np.einsum("ik...,kj...->ij...", a, binv)
    bit_a = np.einsum("ki...,kj...->ij...", binv, a)
    bit_a_bi = np.einsum("ik...,kj...->ij...", bit_a, binv)
    v = synth_grid(medium.V.coeffs, medium.V.lattice.cutoff, npts, m).real
    samples = {
        "tt": bit_a_bi * w,
        "tu": bit_a * w,
        "tw": abi * w,
        "tr": a * w,
        "tv": v * w,
    }
    if spec.b_per is not None:
        samples["tm"] = (w + 0j) * np.ones((npts,) * m)
    tables = tables_from_grid(samples, lattice)
    return CellOperator(lattice, qvecs, theta, tables, n=n)


def assemble_quasiperiodic(spec: QuasiPeriodicSpec, medium: CellMedium, theta) -> BlochMatrix:
    """Hermitian matrix of the torus-m cell problem with frequencies Lambda^T k."""
    return quasiperiodic_operator(spec, medium, theta).bloch()


# ---------------------------------------------------------------------------
# generic pairing builder (corrector operators reuse the difference gather)


class PairingBuilder:
    """Accumulate matrices of the form sum over terms L^T K_d R + scalars.

    Left/right slots are one of: 'shifted' (q + theta), 'plain' (q),
    'theta', or an integer axis index meaning the unit vector e_k.  K is a
    matrix-valued difference table, scalars are scalar difference tables.
    Used for the first-order corrector operators, whose weak forms are
    exactly such pairings.
    """

    def __init__(self, op: CellOperator):
        self.op = op
        F = op.lattice.flat_size
        self.acc = np.zeros((F, F), dtype=complex)

    def _vec(self, slot, side: str) -> np.ndarray:
        q = self.op.qvecs
        th = self.op.theta
        F = q.shape[0]
        if slot == "shifted":
            return q + th[None, :]
        if slot == "plain":
            return q
        if slot == "theta":
            return np.broadcast_to(th, (F, self.op.n))
        if isinstance(slot, (int, np.integer)):
            e = np.zeros((F, self.op.n))
            e[:, int(slot)] = 1.0
            return e
        raise ConfigError(f"unknown pairing slot {slot!r}")

    def add(self, table: np.ndarray, left, right, prefactor: complex = 1.0) -> "PairingBuilder":
        lead = table.shape[: table.ndim - self.op.lattice.dim]
        flat = table.reshape(lead + (-1,))
        lv = self._vec(left, "row")
        rv = self._vec(right, "col")
        didx = self.op._didx
        for i in range(self.op.n):
            li = lv[:, i][:, None]
            for j in range(self.op.n):
                self.acc += prefactor * flat[i, j][didx] * (li * rv[:, j][None, :])
        return self

    def add_scalar(self, table: np.ndarray, prefactor: complex = 1.0) -> "PairingBuilder":
        flat = table.reshape(-1)
        self.acc += prefactor * flat[self.op._didx]
        return self

    def build(self) -> np.ndarray:
        return self.acc


def matfield_product(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """Coefficients of the pointwise matrix product of two matrix fields."""
    n = a.shape[0]
    sa = a.shape[2:]
    sb = b.shape[2:]
    out_shape = tuple(x + y - 1 for x, y in zip(sa, sb))
    out = np.zeros((n, n) + out_shape, dtype=complex)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[i, j] += convolve_coeffs(a[i, k], b[k, j], dim)
    return out


def scalfield_product(s: np.ndarray, a: np.ndarray, dim: int) -> np.ndarray:
    """Coefficients of scalar field times (scalar or tensor) field."""
    lead = a.shape[: a.ndim - dim]
    out = None
    for comp in np.ndindex(lead) if lead else [()]:
        conv = convolve_coeffs(s, a[comp], dim)
        if out is None:
            out = np.zeros(lead + conv.shape, dtype=complex)
        out[comp] = conv
    return out
