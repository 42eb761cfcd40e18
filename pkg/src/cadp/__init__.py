"""Receding-horizon constrained-ADP control with barrier-composed safety
constraints, and a differential-drive robot benchmark."""

from .cadp_core import (
    BackwardPassError,
    DiscreteDynamics,
    IllConditionedError,
    InfeasibleConstraintError,
    JacobianError,
    PolicySequence,
    SolverError,
    SolverOptions,
    StageConstraint,
    StageCost,
    TerminalCost,
    ValueQuadratic,
    approx_stage_cost,
    backward_pass,
    closed_loop_map,
    gain_W,
    multiplier_lambda,
    nominal_gain_k,
    policy_eval,
    riccati_step,
    smoothed_policy_eval,
    softplus,
    stage_jacobians,
)

__version__ = "0.1.0"
