"""Policy mirror descent (SPMD) and inverse policy mirror descent (IPMD) for
tabular average-cost MDPs, with exact oracles for their identities."""

from .amdp import (
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    average_cost,
    differential_values,
    evaluate_policy,
    occupancy,
    performance_difference_check,
    stationary_distribution,
)
from .envs import EnvSpec, generate
from .geometry import EUCLIDEAN, KL, BregmanGeometry, ProxProblem, actor_prox_closed_form, actor_prox_numeric
from .ipmd import Demonstrations, InnerSpec, RewardModel, dual_gradient, generate_expert, run_ipmd
from .spmd import CriticSpec, StepSchedule, reference_solution, run_spmd

__version__ = "0.1.0"

__all__ = [
    "BregmanGeometry",
    "CriticSpec",
    "Demonstrations",
    "EUCLIDEAN",
    "EnvSpec",
    "InnerSpec",
    "KL",
    "ProxProblem",
    "RegularizerSpec",
    "RewardModel",
    "StepSchedule",
    "StochasticPolicy",
    "TabularAmdp",
    "actor_prox_closed_form",
    "actor_prox_numeric",
    "average_cost",
    "differential_values",
    "dual_gradient",
    "evaluate_policy",
    "generate",
    "generate_expert",
    "occupancy",
    "performance_difference_check",
    "reference_solution",
    "run_ipmd",
    "run_spmd",
    "stationary_distribution",
]
