"""Optimal feedback control of semilinear PDEs on trees of controlled
trajectories, with multilinear POD-DEIM model reduction.

The package splits into a tensor kernel layer (:mod:`hjbtree.tensors`),
array-form semilinear dynamics with cached semi-implicit solvers
(:mod:`hjbtree.dynamics`), scikit-learn style mode-wise reduction
estimators (:mod:`hjbtree.reduction`), dynamic programming on trees with
pruning (:mod:`hjbtree.tree`), packaged benchmark problems
(:mod:`hjbtree.problems`), a-posteriori error bounds
(:mod:`hjbtree.analysis`) and the experiment driver plus CLI
(:mod:`hjbtree.driver`, :mod:`hjbtree.cli`).
"""

__version__ = "0.1.0"

from .analysis import (
    ErrorBudget,
    compute_budget,
    log_norm,
    projection_residuals,
    verify_state_bound,
    verify_value_bound,
)
from .config import RunConfig, load_config
from .driver import run_offline, run_online, run_pruning_study, run_verify
from .dynamics import (
    EvalContext,
    IntegratorConfig,
    SemiImplicitStepper,
    SemilinearModel,
    ShiftedSolver,
    SystemOfModels,
    bilinear_closed_form,
    dense_kron_sum,
    fd_operators,
    solve_shifted,
    step_semi_implicit,
    vectorized_reference_step,
)
from .errors import CapExceeded, ConfigError, NumericalError
from .problems import (
    CostSpec,
    OdeModel,
    ProblemSpec,
    build_problem,
    make_advection_diffusion,
    make_allen_cahn,
    make_burgers3d,
    make_van_der_pol,
    running_cost,
    terminal_cost,
)
from .reduction import (
    HoDeim,
    HoPod,
    ReducedModel,
    ReducedSystem,
    load_reduction,
    node_codec,
    qdeim,
    reduce_model,
    reduce_system,
    save_reduction,
)
from .tensors import (
    Tucker,
    kron_apply,
    mode_product,
    mode_refold,
    mode_unfold,
    multi_mode_product,
    sthosvd,
    truncated_svd,
    unvec,
    vec,
)
from .tree import (
    ControlGrid,
    GeometricPruning,
    MonotoneControls,
    StatisticalConstraint,
    Tree,
    backward_values,
    bilinear_tree,
    build_tree,
    enumerate_value,
    monotone_cardinality,
    optimal_trajectory,
    statistical_loop,
    statistical_refine,
    sum_based_bound,
)

__all__ = [
    "CapExceeded",
    "ConfigError",
    "ControlGrid",
    "CostSpec",
    "ErrorBudget",
    "EvalContext",
    "GeometricPruning",
    "HoDeim",
    "HoPod",
    "IntegratorConfig",
    "MonotoneControls",
    "NumericalError",
    "OdeModel",
    "ProblemSpec",
    "ReducedModel",
    "ReducedSystem",
    "RunConfig",
    "SemiImplicitStepper",
    "SemilinearModel",
    "ShiftedSolver",
    "StatisticalConstraint",
    "SystemOfModels",
    "Tree",
    "Tucker",
    "backward_values",
    "bilinear_closed_form",
    "bilinear_tree",
    "build_problem",
    "build_tree",
    "compute_budget",
    "dense_kron_sum",
    "enumerate_value",
    "fd_operators",
    "kron_apply",
    "load_config",
    "load_reduction",
    "log_norm",
    "make_advection_diffusion",
    "make_allen_cahn",
    "make_burgers3d",
    "make_van_der_pol",
    "mode_product",
    "mode_refold",
    "mode_unfold",
    "monotone_cardinality",
    "multi_mode_product",
    "node_codec",
    "optimal_trajectory",
    "projection_residuals",
    "qdeim",
    "reduce_model",
    "reduce_system",
    "run_offline",
    "run_online",
    "run_pruning_study",
    "run_verify",
    "running_cost",
    "save_reduction",
    "solve_shifted",
    "statistical_loop",
    "statistical_refine",
    "step_semi_implicit",
    "sthosvd",
    "sum_based_bound",
    "terminal_cost",
    "truncated_svd",
    "unvec",
    "vec",
    "verify_state_bound",
    "verify_value_bound",
]
