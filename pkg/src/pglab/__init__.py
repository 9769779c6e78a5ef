"""Exact tabular MDP lab for policy-gradient methods.

Solves small MDPs exactly, runs the classical policy-gradient family with
exact gradients, and checks the known convergence inequalities at every
iteration.
"""

from pglab.algorithms import MethodState, StepSchedule, beta_threshold, initial_state, step
from pglab.config import ExperimentConfig
from pglab.diagnostics import CheckReport, IterationRecord, Trace, check_inequality, kl
from pglab.evaluation import OptimalitySummary, optimal_values, policy_eval, soft_optimal
from pglab.mdp import Policy, StateDistribution, TabularMdp, random_mdp, two_arm_bandit
from pglab.rates import RateFit, estimate_rate
from pglab.runner import ExperimentRunner, RunResult

__version__ = "0.1.0"

__all__ = [
    "CheckReport",
    "ExperimentConfig",
    "ExperimentRunner",
    "IterationRecord",
    "MethodState",
    "OptimalitySummary",
    "Policy",
    "RateFit",
    "RunResult",
    "StateDistribution",
    "StepSchedule",
    "TabularMdp",
    "Trace",
    "beta_threshold",
    "check_inequality",
    "estimate_rate",
    "initial_state",
    "kl",
    "optimal_values",
    "policy_eval",
    "random_mdp",
    "soft_optimal",
    "step",
    "two_arm_bandit",
]
