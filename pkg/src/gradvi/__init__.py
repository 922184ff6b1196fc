"""Gradient-constrained variational and quasi-variational inequality solvers
on uniform 1D/2D grids."""

from .grid import (
    ConstantsReport,
    Grid,
    constants_report,
    divergence,
    field_norm,
    gradient,
    monotonicity_constant,
    p_flux,
    poincare_constant,
)
from .constraints import (
    BoundField,
    ConstantBound,
    ConstraintOperator,
    KernelBound,
    NemytskiiBound,
    PenaltyParams,
    SandpileG0,
    SandpileGeps,
    SeparatedNonlocal,
    evaluate_constraint,
    gradient_energy_functional,
    penalty,
    penalty_derivative,
    scale_to_feasible,
    violation,
)
from .geodesic import DistanceField, obstacles, weighted_distance
from .elliptic import (
    EllipticProblem,
    EllipticSolution,
    SolverFailure,
    Tolerances,
    complementarity_residual,
    dependence_study,
    equivalence_report,
    recover_multiplier,
    solve_degenerate,
    solve_double_obstacle,
    solve_vi,
    solve_vi_oracle,
)
from .qvi import (
    CertificateInconsistencyError,
    CertificateReport,
    QVIProblem,
    contraction_certificate,
    solve_qvi_contraction,
    solve_qvi_picard,
)
from .evolution import (
    EvolutionCertificate,
    ParabolicProblem,
    TimeSeriesSolution,
    TransportProblem,
    TrajectorySeparated,
    evolution_certificate,
    gradient_energy_trajectory,
    l2_energy_trajectory,
    solve_parabolic_qvi,
    solve_parabolic_qvi_contraction,
    solve_parabolic_vi,
    solve_transport_vi,
    stability_study,
    step_implicit,
    transport_stationary,
    weak_residual,
)
from .applications import (
    SandpileScenario,
    StabilizationReport,
    TorsionReport,
    sandpile_simulate,
    sandpile_stationary,
    torsion_demo,
)

__version__ = "0.1.0"
