"""Bloch-wave homogenization for Schrodinger operators with deformed media.

The package computes critical Bloch points, effective mass tensors and
potentials, first-order expansions in a stochastic deformation strength,
supercell validation sweeps, semiclassical time evolution with corrector
error tracking, and analytic branch continuation for matrix pencils.
"""

from .errors import ConfigError, ConvergenceError, NumericalError, SolvabilityError
from .fields import (
    CellMedium,
    FourierLattice,
    PeriodicField,
    build_lattice,
    free_medium,
    mathieu_medium,
    medium_from_dict,
    medium_from_json,
)
from .assemble import QuasiPeriodicSpec, deformed_operator, periodic_operator, quasiperiodic_operator
from .bands import BandPoint, BandSurface, band_surface, lowest_bands, multiplicity
from .cell_problems import (
    AuxiliaryFields,
    CorrectorFields,
    constrained_solve,
    discrete_hessian,
    first_auxiliary,
    first_order_correctors,
)
from .effective import (
    EffectiveCoefficients,
    OracleTable,
    PerturbationSeries,
    effective_coefficients,
    fd_hessian,
    find_critical,
    newton_critical,
    quasi_perfect_series,
    supercell_oracle,
)
from .stochastic import (
    DeformationSpec,
    DynamicalSystem,
    ZRealization,
    birkhoff_mean,
    build_perturbed_identity,
    deformed_mean_closed_form,
    ergodic_table,
    make_dynamical_system,
    validate_deformation,
)
from .evolution import (
    BoxGrid,
    EvolutionConfig,
    SplittingResult,
    WavefieldState,
    corrector_error,
    evolve_eps,
    evolve_homogenized,
    gaussian_envelope,
    save_state,
    splitting_series,
    well_prepared_initial,
)
from .perturbation import (
    BranchResult,
    MatrixSeries,
    isolation_check,
    pseudo_inverse,
    series_radius,
    track_branches,
)

__version__ = "0.1.0"

__all__ = [
    "AuxiliaryFields",
    "BandPoint",
    "BandSurface",
    "BoxGrid",
    "BranchResult",
    "CellMedium",
    "ConfigError",
    "ConvergenceError",
    "CorrectorFields",
    "DeformationSpec",
    "DynamicalSystem",
    "EffectiveCoefficients",
    "EvolutionConfig",
    "FourierLattice",
    "MatrixSeries",
    "NumericalError",
    "OracleTable",
    "PerturbationSeries",
    "PeriodicField",
    "SolvabilityError",
    "SplittingResult",
    "WavefieldState",
    "ZRealization",
    "band_surface",
    "birkhoff_mean",
    "build_lattice",
    "build_perturbed_identity",
    "constrained_solve",
    "corrector_error",
    "deformed_mean_closed_form",
    "deformed_operator",
    "discrete_hessian",
    "effective_coefficients",
    "ergodic_table",
    "evolve_eps",
    "evolve_homogenized",
    "fd_hessian",
    "find_critical",
    "first_auxiliary",
    "first_order_correctors",
    "free_medium",
    "gaussian_envelope",
    "isolation_check",
    "lowest_bands",
    "make_dynamical_system",
    "mathieu_medium",
    "medium_from_dict",
    "medium_from_json",
    "multiplicity",
    "newton_critical",
    "periodic_operator",
    "pseudo_inverse",
    "quasi_perfect_series",
    "QuasiPeriodicSpec",
    "quasiperiodic_operator",
    "save_state",
    "series_radius",
    "splitting_series",
    "supercell_oracle",
    "track_branches",
    "validate_deformation",
    "well_prepared_initial",
]
