"""Simulation and adjoint-based optimal control of 2D incompressible
magneto-viscoelastic flows driven by external magnetic fields."""

__version__ = "0.1.0"

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    BC_NONE,
    CompatibilityError,
    ConvergenceError,
    Field,
    Grid,
    MvfError,
    PoissonSolver,
    StructuralError,
    UsageError,
    divergence,
    gradient_scalar,
    inner_l2,
    laplacian,
    leray_project,
    norm_h1,
    norm_h2,
    norm_l2,
    poisson_neumann_solve,
    zero_field,
)
from .state import (
    EnergyBreakdown,
    PhysParams,
    State,
    StepError,
    Trajectory,
    elastic_stress_div,
    energy_report,
    penalty_force,
    solve_state,
    step_state,
    strong_norm_monitor,
    total_energy,
    zero_state,
)
from .linearized import (
    LinearizedState,
    SourceTriple,
    directional_state_derivative,
    solve_linearized,
    step_linearized,
)
from .adjoint import AdjointState, CostSpec, solve_adjoint, step_adjoint_backward
from .control import (
    CoilBasis,
    CoilControl,
    FieldControl,
    GradientReport,
    LineSearchError,
    OptimizerOptions,
    coil_cost,
    coil_field,
    coil_gradient,
    kkt_residual,
    optimize_coils,
    optimize_field,
    project_box,
    reduced_cost,
    reduced_gradient,
    stability_probe,
    taylor_test,
)
