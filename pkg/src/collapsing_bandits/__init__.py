"""Planning and simulation tools for binary-state restless bandits whose
state is revealed only when an arm is acted on."""

from collapsing_bandits.belief import (
    BeliefChains,
    BeliefStateId,
    BeliefTrend,
    ModelValidationError,
    TransitionModel,
    build_chains,
    check_forward_condition,
    check_reverse_condition,
    classify_trend,
    stationary_belief,
    tau,
    validate_model,
)
from collapsing_bandits.whittle import (
    ForwardThresholdPolicy,
    IndeterminateSubsidyError,
    LinearReward,
    OccupancyProfile,
    WhittleTable,
    avg_reward_linear,
    compute_index_table,
    occupancy,
    solve_subsidy,
    whittle_on_demand,
)

__version__ = "0.1.0"

__all__ = [
    "BeliefChains",
    "BeliefStateId",
    "BeliefTrend",
    "ForwardThresholdPolicy",
    "IndeterminateSubsidyError",
    "LinearReward",
    "ModelValidationError",
    "OccupancyProfile",
    "TransitionModel",
    "WhittleTable",
    "avg_reward_linear",
    "build_chains",
    "check_forward_condition",
    "check_reverse_condition",
    "classify_trend",
    "compute_index_table",
    "occupancy",
    "solve_subsidy",
    "stationary_belief",
    "tau",
    "validate_model",
    "whittle_on_demand",
]
