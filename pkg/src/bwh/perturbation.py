"""Finite-dimensional Hermitian perturbation families.

A family A(z) = sum_alpha z^alpha A_alpha over real z realizes the analytic
perturbation picture at matrix level: convergence radius from the
coefficient norms, pseudo-inverse on the complement of an eigengroup,
eigenvalue branches continued through samples by eigenvector overlap, and
an isolation check of the tracked group against the dense spectrum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, NumericalError

HERM_TOL = 1e-12


@dataclass
class MatrixSeries:
    """Hermitian power series in n real variables, finitely many terms.

    coefficients maps multi-indices (tuples of length nvars) to d x d
    Hermitian arrays.  tail_ratio, when set, declares the geometric bound
    ||A_alpha|| <= tail_ratio^(|alpha|+1) for the omitted tail.
    """

    dim: int
    coefficients: dict[tuple[int, ...], np.ndarray]
    tail_ratio: float | None = None

    def __post_init__(self):
        if not self.coefficients:
            raise ConfigError("a matrix series needs at least one coefficient")
        lens = {len(a) for a in self.coefficients}
        if len(lens) != 1:
            raise ConfigError("all multi-indices must have the same length")
        self.nvars = lens.pop()
        for alpha, mat in self.coefficients.items():
            mat = np.asarray(mat, dtype=complex)
            if mat.shape != (self.dim, self.dim):
                raise ConfigError(f"coefficient {alpha} has shape {mat.shape}, expected {(self.dim, self.dim)}")
            if np.max(np.abs(mat - mat.conj().T)) > HERM_TOL * max(1.0, np.max(np.abs(mat))):
                raise ConfigError(f"coefficient {alpha} is not Hermitian")
            self.coefficients[alpha] = mat

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape != (self.nvars,):
            raise ConfigError(f"sample must have {self.nvars} components")
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for alpha, mat in self.coefficients.items():
            out += math.prod(zi**ai for zi, ai in zip(z, alpha)) * mat
        return out


def series_radius(series: MatrixSeries) -> float:
    """Convergence radius from the root test on coefficient norms.

    Polynomial families (no declared tail) converge everywhere; a declared
    geometric tail ||A_alpha|| = c^(|alpha|+1) gives radius 1/c exactly.
    """
    if series.tail_ratio is None:
        return math.inf
    c = float(series.tail_ratio)
    if c <= 0:
        raise ConfigError("tail ratio must be positive")
    return 1.0 / c


def pseudo_inverse(a0: np.ndarray, lam: float, eigvecs: np.ndarray, kernel_tol: float = 1e-9) -> np.ndarray:
    """Hermitian R inverting A0 - lam on the orthogonal complement of its kernel.

    R (A0 - lam) f = f - P f for every f (P the kernel projector), R psi = 0
    for kernel vectors, and R commutes with A0.
    """
    a0 = np.asarray(a0, dtype=complex)
    vecs = np.atleast_2d(np.asarray(eigvecs, dtype=complex).T).T
    if vecs.ndim == 1:
        vecs = vecs[:, None]
    d = a0.shape[0]
    gram = vecs.conj().T @ vecs
    if np.max(np.abs(gram - np.eye(vecs.shape[1]))) > 1e-10:
        raise ConfigError("kernel basis is not orthonormal")
    res = np.max(np.linalg.norm(a0 @ vecs - lam * vecs, axis=0))
    if res > kernel_tol * max(1.0, np.linalg.norm(a0)):
        raise ConfigError(f"supplied vectors are not a kernel basis (residual {res:.3e})")
    w, v = scipy.linalg.eigh(a0)
    h = vecs.shape[1]
    near = np.abs(w - lam) <= max(kernel_tol, 1e-9 * max(1.0, np.max(np.abs(w))))
    if int(near.sum()) != h:
        raise ConfigError(f"kernel basis spans {h} vectors but A0 has {int(near.sum())} eigenvalues at {lam:.6g}")
    r = np.zeros((d, d), dtype=complex)
    for i in range(d):
        if not near[i]:
            r += np.outer(v[:, i], v[:, i].conj()) / (w[i] - lam)
    return r


@dataclass
class BranchResult:
    """Eigenvalue group of A(z) continued from a multiplicity-h point."""

    lambda0: float
    multiplicity: int
    samples: list[np.ndarray]
    values: np.ndarray              # (nsamples, h)
    vectors: list[np.ndarray]       # per sample, (d, h)
    lipschitz: float = 0.0
    isolation_window: float | None = None
    isolation: list[bool] = field(default_factory=list)

    def to_csv(self, path) -> None:
        nv = len(self.samples[0]) if self.samples else 1
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"z_{i + 1}" for i in range(nv)] + ["branch", "lambda", "isolated"])
            for si, z in enumerate(self.samples):
                flag = self.isolation[si] if si < len(self.isolation) else ""
                for b in range(self.multiplicity):
                    writer.writerow([f"{x:.17g}" for x in z] + [b, f"{self.values[si, b]:.17g}", flag])


def track_branches(series: MatrixSeries, lambda0: float, h: int, samples) -> BranchResult:
    """Follow the h-fold eigenvalue group of A(z) along a sample path.

    Branch identity is assigned by Hungarian matching on eigenvector overlap
    with the previous sample, which realizes the analytic continuation
    without Weierstrass factorization.  Raises when a sample leaves the
    convergence radius or the group mixes with the outside spectrum so
    strongly that matching becomes ambiguous.
    """
    radius = series_radius(series)
    zs = [np.atleast_1d(np.asarray(z, dtype=float)) for z in samples]
    for z in zs:
        if np.linalg.norm(z) >= radius:
            raise ConfigError(f"sample {z} lies outside the convergence radius {radius:.6g}")

    w0 = scipy.linalg.eigvalsh(series(np.zeros(series.nvars)))
    near0 = np.abs(w0 - lambda0) <= 1e-10 * max(1.0, np.max(np.abs(w0)))
    if int(near0.sum()) != h:
        raise ConfigError(f"lambda0 has multiplicity {int(near0.sum())}, not {h}")

    values = np.empty((len(zs), h))
    vectors = []
    prev = None
    prev_vals = None
    lip = 0.0
    for si, z in enumerate(zs):
        w, v = scipy.linalg.eigh(series(z))
        if prev is None:
            idx = np.argsort(np.abs(w - lambda0))[:h]
            idx = idx[np.argsort(w[idx])]
        else:
            overlap = np.abs(prev.conj().T @ v)  # (h, d)
            row, col = linear_sum_assignment(-overlap)
            idx = col[np.argsort(row)]
            strength = overlap[row, col].min()
            if strength < 0.5:
                raise NumericalError(
                    f"branch identity lost at z={z} (best overlap {strength:.3f}); "
                    "the group is merging with the outside spectrum"
                )
        values[si] = w[idx]
        vectors.append(v[:, idx])
        if prev_vals is not None:
            dz = np.linalg.norm(z - zs[si - 1])
            if dz > 0:
                lip = max(lip, float(np.max(np.abs(values[si] - prev_vals)) / dz))
        prev = v[:, idx]
        prev_vals = values[si]
        resid = np.max(np.linalg.norm(series(z) @ vectors[-1] - vectors[-1] * values[si][None, :], axis=0))
        if resid > 1e-9 * max(1.0, np.max(np.abs(w))):
            raise NumericalError(f"branch residual {resid:.3e} at z={z}")
    return BranchResult(
        lambda0=lambda0,
        multiplicity=h,
        samples=zs,
        values=values,
        vectors=vectors,
        lipschitz=lip,
    )


def isolation_check(
    series: MatrixSeries,
    result: BranchResult,
    d: float,
    d_prime: float,
    samples=None,
) -> list[bool]:
    """Does (lambda0 - d', lambda0 + d') contain exactly the tracked group?

    Precondition: at z = 0 the window (lambda0 - d, lambda0 + d) holds only
    lambda0.  Per sample the dense spectrum inside the tighter window must
    coincide with the tracked branch values; a branch walking out of the
    window reports False rather than raising.
    """
    if not 0 < d_prime < d:
        raise ConfigError("need 0 < d_prime < d")
    lam0 = result.lambda0
    w0 = scipy.linalg.eigvalsh(series(np.zeros(series.nvars)))
    inside0 = w0[(w0 > lam0 - d) & (w0 < lam0 + d)]
    if inside0.size != result.multiplicity or np.max(np.abs(inside0 - lam0)) > 1e-10 * max(1.0, abs(lam0)):
        raise ConfigError("the unperturbed window does not isolate lambda0")
    zs = result.samples if samples is None else [np.atleast_1d(np.asarray(z, dtype=float)) for z in samples]
    flags = []
    for si, z in enumerate(zs):
        w = scipy.linalg.eigvalsh(series(z))
        inside = np.sort(w[(w > lam0 - d_prime) & (w < lam0 + d_prime)])
        tracked = np.sort(result.values[si])
        ok = inside.size == tracked.size and (
            inside.size == 0 or np.max(np.abs(inside - tracked)) <= 1e-9 * max(1.0, np.max(np.abs(w)))
        )
        ok = ok and bool(np.all(tracked > lam0 - d_prime) and np.all(tracked < lam0 + d_prime))
        flags.append(bool(ok))
    result.isolation_window = d_prime
    result.isolation = flags
    return flags
