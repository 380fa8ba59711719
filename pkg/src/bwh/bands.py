"""Hermitian band computations: lowest eigenpairs, surfaces, multiplicity.

Eigenvectors are coefficient vectors over the assembly lattice, returned
M-orthonormal.  Dense solves rule below DENSE_LIMIT unknowns; above that a
shift-invert Lanczos iteration targets the bottom of the spectrum.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.optimize import linear_sum_assignment

from .assemble import BlochMatrix, periodic_operator
from .errors import ConfigError, ConvergenceError
from .fields import CellMedium, FourierLattice, PeriodicField

DENSE_LIMIT = 2000
RESIDUAL_RTOL = 1e-9


def _opnorm_estimate(H: np.ndarray, iters: int = 8) -> float:
    """Power-iteration estimate of the spectral norm of a Hermitian matrix."""
    rng = np.random.default_rng(12345)
    v = rng.standard_normal(H.shape[0]) + 1j * rng.standard_normal(H.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = H @ v
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est


def _gershgorin_min(H: np.ndarray) -> float:
    d = np.diag(H).real
    r = np.sum(np.abs(H), axis=1) - np.abs(np.diag(H))
    return float(np.min(d - r))


def solve_lowest(H: np.ndarray, M: np.ndarray | None, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Bottom `count` eigenpairs of (H, M), ascending and M-orthonormal."""
    size = H.shape[0]
    if count > size:
        raise ConfigError(f"requested {count} eigenpairs from a size-{size} problem")
    if size <= DENSE_LIMIT:
        if M is None:
            w, v = scipy.linalg.eigh(H, subset_by_index=[0, count - 1])
        else:
            w, v = scipy.linalg.eigh(H, M, subset_by_index=[0, count - 1])
        return w, v
    sigma = _gershgorin_min(H) - 1.0
    Hs = scipy.sparse.csc_matrix(H)
    Ms = None if M is None else scipy.sparse.csc_matrix(M)
    try:
        w, v = scipy.sparse.linalg.eigsh(Hs, k=count, M=Ms, sigma=sigma, which="LM")
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        raise ConvergenceError(
            f"shift-invert iteration failed to converge within its budget "
            f"({len(exc.eigenvalues)}/{count} pairs found)"
        ) from exc
    order = np.argsort(w)
    w, v = w[order], v[:, order]
    if M is not None:
        # ARPACK returns M-orthogonal vectors up to normalization noise
        for j in range(count):
            v[:, j] /= np.sqrt(np.real(np.vdot(v[:, j], M @ v[:, j])))
    return w, v


@dataclass
class BandPoint:
    """One converged eigenpair of a Bloch matrix."""

    theta: np.ndarray
    band: int
    lam: float
    psi: PeriodicField
    residual: float
    coeffs: np.ndarray = field(repr=False, default=None)


def lowest_bands(matrix: BlochMatrix, count: int) -> list[BandPoint]:
    """The `count` smallest eigenpairs of (H, M), checked to residual tolerance."""
    H, M = matrix.H, matrix.M
    w, v = solve_lowest(H, M, count)
    hnorm = _opnorm_estimate(H)
    lattice = matrix.operator.lattice if matrix.operator is not None else None
    out = []
    for j in range(count):
        vec = v[:, j]
        mv = vec if M is None else M @ vec
        res = float(np.linalg.norm(H @ vec - w[j] * mv))
        if hnorm > 0 and res > RESIDUAL_RTOL * hnorm:
            raise ConvergenceError(f"band {j} residual {res:.3e} exceeds {RESIDUAL_RTOL:.0e}*||H|| = {RESIDUAL_RTOL * hnorm:.3e}")
        rq_imag = abs(np.imag(np.vdot(vec, H @ vec)))
        if hnorm > 0 and rq_imag > 1e-12 * hnorm:
            raise ConvergenceError("Rayleigh quotient has a nonreal residue")
        psi = None
        if lattice is not None:
            psi = PeriodicField(lattice, vec.reshape(lattice.grid_shape()).copy())
        out.append(BandPoint(theta=matrix.theta.copy(), band=j, lam=float(w[j]), psi=psi, residual=res, coeffs=vec))
    return out


def multiplicity(matrix: BlochMatrix, lam: float, cluster_tol: float) -> int:
    """Number of eigenvalues of (H, M) inside [lam - tol, lam + tol]."""
    if cluster_tol < 0:
        raise ConfigError("cluster tolerance must be nonnegative")
    size = matrix.H.shape[0]
    if size <= DENSE_LIMIT:
        if matrix.M is None:
            w = scipy.linalg.eigvalsh(matrix.H)
        else:
            w = scipy.linalg.eigvalsh(matrix.H, matrix.M)
    else:
        k = min(size - 2, 64)
        w, _ = solve_lowest(matrix.H, matrix.M, k)
        if lam > w[-1] - cluster_tol:
            raise ConvergenceError("eigenvalue window extends past the computed spectrum slice")
    return int(np.count_nonzero((w >= lam - cluster_tol) & (w <= lam + cluster_tol)))


@dataclass
class BandSurface:
    """Band values over a theta grid, with continuity and gap diagnostics."""

    thetas: np.ndarray           # (nodes, n)
    bands: list[int]
    values: np.ndarray           # (nodes, nbands)
    gaps: np.ndarray             # (nodes, nbands) gap to the next band up
    lipschitz: float
    crossings: list[tuple[int, int]]   # (node, band) where gap < crossing tol
    zero_crossings: list[int] = field(default_factory=list)

    def to_csv(self, path) -> None:
        n = self.thetas.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"theta_{i + 1}" for i in range(n)] + ["band", "lambda"])
            for node in range(self.thetas.shape[0]):
                for bi, b in enumerate(self.bands):
                    writer.writerow(
                        [f"{t:.17g}" for t in self.thetas[node]] + [b, f"{self.values[node, bi]:.17g}"]
                    )


def theta_grid(resolution: int, dim: int) -> np.ndarray:
    """Symmetric uniform grid inside (-1/2, 1/2)^dim containing 0 for odd sizes."""
    if resolution < 1:
        raise ConfigError("grid resolution must be at least 1")
    axis = (np.arange(resolution) - (resolution - 1) / 2.0) / resolution
    if dim == 1:
        return axis[:, None]
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _continue_order(prev_vecs: np.ndarray, w: np.ndarray, v: np.ndarray, M, cluster_tol: float) -> np.ndarray:
    """Permute columns inside degenerate clusters to maximize overlap with the previous node."""
    v = v.copy()
    k = len(w)
    i = 0
    while i < k:
        j = i + 1
        while j < k and w[j] - w[j - 1] <= cluster_tol:
            j += 1
        if j - i > 1 and prev_vecs is not None:
            block_prev = prev_vecs[:, i:j]
            block_cur = v[:, i:j]
            mb = block_cur if M is None else M @ block_cur
            overlap = np.abs(block_prev.conj().T @ mb)
            row, col = linear_sum_assignment(-overlap)
            v[:, i:j] = block_cur[:, col[np.argsort(row)]]
        i = j
    return v


def band_surface(
    medium: CellMedium,
    bands,
    grid,
    lattice: FourierLattice | None = None,
    period: int = 1,
    crossing_tol: float = 1e-8,
    cluster_tol: float = 1e-10,
) -> BandSurface:
    """Sweep lambda_j(theta) over a grid of Bloch frequencies.

    `bands` is a band index or list of indices; `grid` is either a node count
    (uniform symmetric grid) or an explicit (nodes, n) array.  The assembled
    coefficient tables are shared across nodes, and eigenvector overlap with
    the previous node fixes the ordering inside degenerate clusters.
    """
    if lattice is None:
        lattice = medium.A.lattice
    bands = [int(bands)] if np.isscalar(bands) else [int(b) for b in bands]
    if min(bands) < 0:
        raise ConfigError("band indices must be nonnegative")
    n = lattice.dim
    if np.isscalar(grid):
        nodes = theta_grid(int(grid), n)
    else:
        nodes = np.atleast_2d(np.asarray(grid, dtype=float))
        if nodes.shape[1] != n:
            nodes = nodes.reshape(-1, n)
    if np.any(nodes < -0.5) or np.any(nodes >= 0.5):
        raise ConfigError("theta grid must lie inside [-1/2, 1/2)^n")

    count = max(bands) + 2  # one extra band for gap estimates
    op = periodic_operator(medium, np.zeros(n), lattice, period)
    count = min(count, lattice.flat_size)

    values = np.empty((nodes.shape[0], len(bands)))
    gaps = np.empty_like(values)
    crossings: list[tuple[int, int]] = []
    prev_vecs = None
    for node in range(nodes.shape[0]):
        bm = op.with_theta(nodes[node]).bloch()
        w, v = solve_lowest(bm.H, bm.M, count)
        v = _continue_order(prev_vecs, w, v, bm.M, cluster_tol)
        prev_vecs = v
        for bi, b in enumerate(bands):
            values[node, bi] = w[b]
            gap = w[b + 1] - w[b] if b + 1 < count else np.inf
            gaps[node, bi] = gap
            if gap < crossing_tol:
                crossings.append((node, b))

    lip = 0.0
    for node in range(1, nodes.shape[0]):
        dth = np.linalg.norm(nodes[node] - nodes[node - 1])
        if dth > 0:
            lip = max(lip, float(np.max(np.abs(values[node] - values[node - 1])) / dth))
    zero_cross = [
        node
        for node in range(1, nodes.shape[0])
        if np.any(np.sign(values[node]) * np.sign(values[node - 1]) < 0)
    ]
    return BandSurface(
        thetas=nodes,
        bands=bands,
        values=values,
        gaps=gaps,
        lipschitz=lip,
        crossings=crossings,
        zero_crossings=zero_cross,
    )
