"""Truncated Fourier representation of periodic cell data.

Everything downstream (operator assembly, cell problems, effective tensors)
works with fields y |-> sum_m c(m) exp(2 i pi m.y) on the unit torus,
truncated to the cube of multi-indices |m_i| <= N.  This module provides the
index bookkeeping, synthesis/analysis between coefficients and uniform grids,
exact products via padded convolution, and the validated medium container
(diffusion matrix A, oscillating potential V, slow potential U).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError

TENSOR_RANKS = ("scalar", "vector", "matrix")


@dataclass(frozen=True)
class FourierLattice:
    """Integer frequency cube {-N..N}^dim with a fixed flat ordering.

    The flat index is row-major over the shifted entries m + N: in 1D mode m
    sits at position m + N, in 2D mode (m1, m2) at (m1+N)*(2N+1) + (m2+N).
    """

    dim: int
    cutoff: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"spatial dimension must be 1 or 2, got {self.dim}")
        if self.cutoff < 1:
            raise ConfigError(f"cutoff must be a positive integer, got {self.cutoff}")

    @property
    def side(self) -> int:
        return 2 * self.cutoff + 1

    @property
    def flat_size(self) -> int:
        return self.side**self.dim

    @cached_property
    def modes(self) -> np.ndarray:
        """All multi-indices in flat order, shape (flat_size, dim)."""
        rng = np.arange(-self.cutoff, self.cutoff + 1)
        grids = np.meshgrid(*([rng] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def flat_index(self, mode) -> int:
        mode = np.asarray(mode, dtype=int).reshape(self.dim)
        if np.any(np.abs(mode) > self.cutoff):
            raise ConfigError(f"mode {mode.tolist()} outside cutoff {self.cutoff}")
        idx = 0
        for component in mode:
            idx = idx * self.side + (int(component) + self.cutoff)
        return idx

    def mode_of(self, flat: int) -> tuple[int, ...]:
        if not 0 <= flat < self.flat_size:
            raise ConfigError(f"flat index {flat} out of range")
        out = []
        for _ in range(self.dim):
            out.append(flat % self.side - self.cutoff)
            flat //= self.side
        return tuple(reversed(out))

    def grid_shape(self) -> tuple[int, ...]:
        return (self.side,) * self.dim


def build_lattice(dim: int, cutoff: int) -> FourierLattice:
    """Construct the truncated lattice; (1, 4) has 9 modes, (2, 3) has 49."""
    return FourierLattice(dim, cutoff)


# ---------------------------------------------------------------------------
# synthesis / analysis on uniform grids


def synth_grid(coeffs: np.ndarray, cutoff: int, npts: int, dim: int, stride: int = 1) -> np.ndarray:
    """Evaluate sum_m c(m) exp(2 i pi stride*m . j/npts) on the uniform grid.

    `coeffs` carries the lattice axes last, one axis of length 2N+1 per
    dimension (leading axes are tensor components and broadcast through).
    `stride` places mode m at grid frequency stride*m, which evaluates a
    unit-periodic field on a grid covering `stride` periods.
    """
    side = 2 * cutoff + 1
    if npts < stride * (side - 1) + 1:
        raise ConfigError(f"grid with {npts} points aliases cutoff {cutoff} (stride {stride})")
    lead = coeffs.shape[:-dim]
    buf = np.zeros(lead + (npts,) * dim, dtype=complex)
    rng = (np.arange(-cutoff, cutoff + 1) * stride) % npts
    ix = np.ix_(*([np.arange(n) for n in lead] + [rng] * dim))
    buf[ix] = coeffs
    axes = tuple(range(len(lead), len(lead) + dim))
    return np.fft.ifftn(buf, axes=axes) * npts**dim


def analyze_grid(samples: np.ndarray, cutoff: int, dim: int) -> np.ndarray:
    """Project grid samples onto the truncated lattice by DFT.

    Requires at least 2x oversampling relative to the mode count so the kept
    band is unambiguous.  Leading axes of `samples` pass through.
    """
    npts = samples.shape[-1]
    side = 2 * cutoff + 1
    if npts < 2 * side:
        raise ConfigError(f"need >= {2 * side} samples per axis for cutoff {cutoff}, got {npts}")
    lead = samples.shape[:-dim]
    axes = tuple(range(len(lead), len(lead) + dim))
    hat = np.fft.fftn(samples, axes=axes) / npts**dim
    rng = np.arange(-cutoff, cutoff + 1) % npts
    ix = np.ix_(*([np.arange(n) for n in lead] + [rng] * dim))
    return hat[ix]


def convolve_coeffs(a: np.ndarray, b: np.ndarray, dim: int) -> np.ndarray:
    """Fourier coefficients of a pointwise product, full (padded) support.

    Both inputs carry their lattice axes last; the output lattice cutoff is
    the sum of the input cutoffs, so no wrap-around ever occurs.
    """
    axes = tuple(range(-dim, 0))
    return fftconvolve(a, b, mode="full", axes=axes)


@dataclass
class PeriodicField:
    """A truncated Fourier series on the unit torus.

    coeffs layout by tensor rank: scalar (side,)*dim, vector (dim,)+(side,)*dim,
    matrix (dim, dim)+(side,)*dim, always complex.
    """

    lattice: FourierLattice
    coeffs: np.ndarray
    tensor_rank: str = "scalar"

    def __post_init__(self):
        if self.tensor_rank not in TENSOR_RANKS:
            raise ConfigError(f"tensor_rank must be one of {TENSOR_RANKS}")
        expected = {
            "scalar": self.lattice.grid_shape(),
            "vector": (self.lattice.dim,) + self.lattice.grid_shape(),
            "matrix": (self.lattice.dim, self.lattice.dim) + self.lattice.grid_shape(),
        }[self.tensor_rank]
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.shape != expected:
            raise ConfigError(
                f"coefficient shape {self.coeffs.shape} does not match "
                f"{self.tensor_rank} field on lattice {expected}"
            )

    @property
    def dim(self) -> int:
        return self.lattice.dim

    def is_real(self, tol: float = 1e-12) -> bool:
        """Hermitian symmetry c(-m) == conj(c(m)) within tol (absolute)."""
        flipped = self.coeffs
        for ax in range(-self.dim, 0):
            flipped = np.flip(flipped, axis=ax)
        scale = max(np.max(np.abs(self.coeffs)), 1.0)
        return bool(np.max(np.abs(flipped - np.conj(self.coeffs))) <= tol * scale)

    def on_grid(self, npts: int, stride: int = 1) -> np.ndarray:
        vals = synth_grid(self.coeffs, self.lattice.cutoff, npts, self.dim, stride=stride)
        return vals

    def mean(self) -> complex:
        """Coefficient of the zero mode (cell average)."""
        center = (self.lattice.cutoff,) * self.dim
        if self.tensor_rank == "scalar":
            return complex(self.coeffs[center])
        return self.coeffs[(Ellipsis,) + center]

    @classmethod
    def from_callable(cls, lattice: FourierLattice, fn, tensor_rank: str = "scalar", oversample: int = 4) -> "PeriodicField":
        """Sample fn on an oversampled grid and project (DFT) onto the lattice."""
        npts = oversample * lattice.side
        ax = np.arange(npts) / npts
        pts = np.meshgrid(*([ax] * lattice.dim), indexing="ij")
        samples = np.asarray(fn(*pts), dtype=complex)
        coeffs = analyze_grid(samples, lattice.cutoff, lattice.dim)
        return cls(lattice, coeffs, tensor_rank)

    @classmethod
    def constant(cls, lattice: FourierLattice, value, tensor_rank: str = "scalar") -> "PeriodicField":
        value = np.asarray(value, dtype=complex)
        lead = {"scalar": (), "vector": (lattice.dim,), "matrix": (lattice.dim, lattice.dim)}[tensor_rank]
        if value.shape != lead:
            raise ConfigError(f"constant with shape {value.shape} cannot fill a {tensor_rank} field")
        coeffs = np.zeros(lead + lattice.grid_shape(), dtype=complex)
        center = (lattice.cutoff,) * lattice.dim
        coeffs[(Ellipsis,) + center] = value
        return cls(lattice, coeffs, tensor_rank)


# ---------------------------------------------------------------------------
# media


@dataclass
class CellMedium:
    """Coefficients of the cell operator: A (matrix), V and U (scalars).

    A must be symmetric, real and uniformly elliptic with constant
    `coercivity`; V and U real.  Validation happens on a sampled grid at
    construction (see `validate`).
    """

    A: PeriodicField
    V: PeriodicField
    U: PeriodicField
    coercivity: float
    name: str = ""

    def __post_init__(self):
        if self.A.tensor_rank != "matrix" or self.V.tensor_rank != "scalar" or self.U.tensor_rank != "scalar":
            raise ConfigError("medium needs matrix A and scalar V, U")
        if not (self.A.dim == self.V.dim == self.U.dim):
            raise ConfigError("medium fields live on different dimensions")
        if self.coercivity <= 0:
            raise ConfigError(f"coercivity must be positive, got {self.coercivity}")
        self.validate()

    @property
    def dim(self) -> int:
        return self.A.dim

    @property
    def cutoff(self) -> int:
        return max(self.A.lattice.cutoff, self.V.lattice.cutoff, self.U.lattice.cutoff)

    def validate(self, npts: int = 64, tol: float = 1e-10) -> None:
        for fld, label in ((self.A, "A"), (self.V, "V"), (self.U, "U")):
            if not fld.is_real(1e-12):
                raise ConfigError(f"medium field {label} is not real (Hermitian symmetry broken)")
        npts = max(npts, 2 * self.A.lattice.side)
        a = self.A.on_grid(npts)
        if np.max(np.abs(a - np.swapaxes(a, 0, 1))) > tol * max(1.0, np.max(np.abs(a))):
            raise ConfigError("A is not symmetric on the validation grid")
        sym = np.moveaxis(a.real, (0, 1), (-2, -1))
        eigs = np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, -1, -2)))
        lo = float(eigs.min())
        if lo < self.coercivity - tol:
            raise ConfigError(
                f"A fails coercivity: min eigenvalue {lo:.6g} < declared {self.coercivity}"
            )


def free_medium(dim: int = 1, cutoff: int = 8) -> CellMedium:
    """A = identity, V = U = 0."""
    lat = build_lattice(dim, cutoff)
    return CellMedium(
        A=PeriodicField.constant(lat, np.eye(dim), "matrix"),
        V=PeriodicField.constant(lat, 0.0),
        U=PeriodicField.constant(lat, 0.0),
        coercivity=1.0,
        name="free",
    )


def mathieu_medium(cutoff: int = 8, amplitude: float = 1.0, u_amplitude: float = 0.0) -> CellMedium:
    """1D medium with A = 1 and V = amplitude*cos(2 pi y).

    Optionally U = u_amplitude*cos(2 pi y) for tests that need a nontrivial
    slow potential.
    """
    lat = build_lattice(1, cutoff)
    v = np.zeros(lat.grid_shape(), dtype=complex)
    v[cutoff + 1] = amplitude / 2.0
    v[cutoff - 1] = amplitude / 2.0
    u = np.zeros_like(v)
    u[cutoff + 1] = u_amplitude / 2.0
    u[cutoff - 1] = u_amplitude / 2.0
    return CellMedium(
        A=PeriodicField.constant(lat, np.eye(1), "matrix"),
        V=PeriodicField(lat, v),
        U=PeriodicField(lat, u),
        coercivity=1.0,
        name="mathieu",
    )


# ---------------------------------------------------------------------------
# medium JSON ingestion (CLI format)


def _field_from_spec(spec, lattice: FourierLattice, tensor_rank: str) -> PeriodicField:
    if isinstance(spec, (int, float)):
        spec = {"kind": "constant", "data": spec}
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("field spec must be a number or an object with a 'kind'")
    kind = spec["kind"]
    data = spec.get("data")
    n = lattice.dim
    if kind == "constant":
        if tensor_rank == "matrix":
            if isinstance(data, (int, float)):
                value = float(data) * np.eye(n)
            else:
                value = np.asarray(data, dtype=float)
                if value.shape != (n, n):
                    raise ConfigError(f"constant matrix data must be {n}x{n}")
        else:
            value = float(data)
        return PeriodicField.constant(lattice, value, tensor_rank)
    if kind == "fourier":
        lead = {"scalar": (), "vector": (n,), "matrix": (n, n)}[tensor_rank]
        coeffs = np.zeros(lead + lattice.grid_shape(), dtype=complex)
        ncomp = len(lead)
        for row in data:
            row = list(row)
            mode = [int(v) for v in row[:n]]
            comp = tuple(int(v) for v in row[n : n + ncomp])
            re, im = float(row[n + ncomp]), float(row[n + ncomp + 1])
            pos = tuple(int(m) + lattice.cutoff for m in mode)
            if any(p < 0 or p >= lattice.side for p in pos):
                raise ConfigError(f"fourier mode {mode} outside cutoff {lattice.cutoff}")
            coeffs[comp + pos] = re + 1j * im
        fld = PeriodicField(lattice, coeffs, tensor_rank)
        if not fld.is_real(1e-9):
            raise ConfigError("fourier field data breaks Hermitian (real-field) symmetry")
        return fld
    if kind == "grid":
        samples = np.asarray(data, dtype=float)
        if tensor_rank == "matrix":
            # row-major samples with trailing matrix axes -> components first
            if samples.ndim != lattice.dim + 2:
                raise ConfigError("grid data for A needs trailing matrix axes")
            samples = np.moveaxis(samples, (-2, -1), (0, 1))
        coeffs = analyze_grid(np.asarray(samples, dtype=complex), lattice.cutoff, lattice.dim)
        return PeriodicField(lattice, coeffs, tensor_rank)
    raise ConfigError(f"unknown field kind {kind!r}")


def medium_from_dict(doc: dict) -> CellMedium:
    try:
        dim = int(doc["dim"])
        cutoff = int(doc["cutoff"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"medium file needs integer 'dim' and 'cutoff': {exc}") from exc
    lattice = build_lattice(dim, cutoff)
    a = _field_from_spec(doc.get("A", 1.0), lattice, "matrix")
    v = _field_from_spec(doc.get("V", 0.0), lattice, "scalar")
    u = _field_from_spec(doc.get("U", 0.0), lattice, "scalar")
    coercivity = float(doc.get("coercivity", 1.0))
    return CellMedium(A=a, V=v, U=u, coercivity=coercivity, name=str(doc.get("name", "")))


def medium_from_json(path) -> CellMedium:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"medium file {path} is not valid JSON: {exc}") from exc
    return medium_from_dict(doc)
