"""Price decomposition of coupled stochastic control problems.

Independent subsystems linked by an almost-sure resource constraint are
coordinated through a low-dimensional multiplier process: each iteration
solves per-unit price-augmented dynamic programs, simulates them on common
noise paths, takes a sample-wise gradient step on the multipliers and
projects the result back onto an auto-regressive price model.
"""

from .model import (
    DadpError,
    ValidationError,
    SubsystemSpec,
    NoiseModel,
    NoisePath,
    ProblemSpec,
    ValidatedProblem,
    make_unit,
    linear_coupling,
    validate,
    validation_issues,
    sample_path,
    sample_paths,
    coupling_residual,
    pathwise_cost,
)
from .dp import (
    SolverError,
    Grid,
    ValueFunction,
    ControlMesh,
    SweepSolution,
    JointSolution,
    JointTrajectories,
    interpolate,
    bellman_update,
    backward_sweep,
    joint_solve,
    simulate_joint,
    regular_state_grids,
    uniform_mesh,
    write_solution_csv,
    read_solution_csv,
)
from .prices import (
    PriceModel,
    PricePathSamples,
    RegressionResult,
    propagate,
    propagate_demands,
    support_range,
    regress,
    write_price_model_csv,
    read_price_model_csv,
)
from .coordination import (
    DadpConfig,
    DadpIterate,
    DadpResult,
    SimulationRecord,
    PrimalResult,
    build_subproblem,
    solve_subproblems,
    simulate_iterate,
    dual_value,
    primal_value,
    gradient_step,
    iteration_seed,
    run,
)
from .quadratic import (
    HypothesisError,
    QuadraticSpec,
    ScenarioTree,
    VerificationReport,
    independent_noise,
    closed_form_lambda,
    kkt_solve,
    verify_proposition,
    warm_start,
    to_problem,
)
from .config import (
    ConfigError,
    load_config,
    validate_config,
    config_hash,
    build_noise,
    build_problem,
    build_quadratic,
    dadp_settings,
    joint_settings,
)

__version__ = "0.1.0"
