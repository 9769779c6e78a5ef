"""One-step policy updates, step-size schedules and the entropy-PG step threshold.

Every step is a pure ``MethodState -> MethodState`` function. The returned
state carries the exact evaluation of its own policy plus the step size that
produced it, so diagnostics can reason about the transition without
re-solving anything.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, get_args

import numpy as np
from scipy import optimize

from pglab.evaluation import (
    AdvantageTable,
    QTable,
    ValueTable,
    advantage,
    policy_eval,
    q_from_v,
    soft_policy_eval,
    visitation,
)
from pglab.mdp import (
    TOL_GAP,
    EntropyConfig,
    FloatArray,
    Policy,
    StateDistribution,
    TabularMdp,
    greedy_policy,
    project_simplex_rows,
)

logger = logging.getLogger(__name__)

Method = Literal["pi", "ppg", "softmax-pg", "npg", "entropy-pg", "entropy-npg", "soft-pi"]
ScheduleKind = Literal["constant", "ppg_increasing", "pg_adaptive"]

METHODS: tuple[str, ...] = get_args(Method)
SCHEDULE_KINDS: tuple[str, ...] = get_args(ScheduleKind)
ENTROPY_METHODS = frozenset({"entropy-pg", "entropy-npg", "soft-pi"})
# Methods whose iterates must keep every action probability positive.
SOFTMAX_METHODS = frozenset({"softmax-pg", "npg", "entropy-pg", "entropy-npg", "soft-pi"})

BETA_CAP = 1e9


@dataclass(frozen=True)
class StepSchedule:
    """Step-size rule.

    Attributes:
        kind: ``constant``, ``ppg_increasing`` (geometrically growing PPG
            steps) or ``pg_adaptive`` (softmax PG step scaled by the current
            weighted advantages).
        eta: Base step size, used by ``constant``.
        c3: Growth constant for ``ppg_increasing``.
        c_adapt: Numerator constant for ``pg_adaptive``.
    """

    kind: ScheduleKind = "constant"
    eta: float = 1.0
    c3: float | None = None
    c_adapt: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(
                f"Unknown schedule kind {self.kind!r}; expected one of {', '.join(SCHEDULE_KINDS)}"
            )
        if not np.isfinite(self.eta) or self.eta <= 0:
            raise ValueError(f"step size eta must be a positive number, got {self.eta!r}")
        if self.kind == "ppg_increasing" and (self.c3 is None or self.c3 <= 0):
            raise ValueError(f"ppg_increasing needs c3 > 0, got {self.c3!r}")
        if self.kind == "pg_adaptive" and (self.c_adapt is None or self.c_adapt <= 0):
            raise ValueError(f"pg_adaptive needs c_adapt > 0, got {self.c_adapt!r}")

    @classmethod
    def constant(cls, eta: float) -> StepSchedule:
        return cls("constant", eta)

    def describe(self) -> str:
        if self.kind == "ppg_increasing":
            return f"ppg_increasing(c3={self.c3:g})"
        if self.kind == "pg_adaptive":
            return f"pg_adaptive(c={self.c_adapt:g})"
        return f"constant(eta={self.eta:g})"


@dataclass(frozen=True)
class ScheduleInfo:
    """Problem and iterate quantities a schedule may depend on.

    ``adaptive_scale`` is min over S^k of max_a |pi A|, where S^k holds the
    states with a strictly positive weighted advantage; ``None`` when S^k is
    empty, meaning the policy is already optimal.
    """

    n_actions: int
    mu_min: float
    gamma: float
    adaptive_scale: float | None = None


@dataclass(frozen=True, eq=False)
class MethodState:
    """A policy iterate together with its exact evaluation.

    ``eta`` and ``state_steps`` describe the update that produced this
    iterate: the scheduled step eta_k and, for the visitation-scaled methods,
    the per-state steps eta_k d_mu^k(s) / (1 - gamma). Both are ``None`` for
    the starting state.
    """

    policy: Policy
    iteration: int
    method: Method
    values: ValueTable
    q_values: QTable
    advantages: AdvantageTable
    entropy: EntropyConfig | None = None
    eta: float | None = None
    state_steps: FloatArray | None = None

    @property
    def tau(self) -> float | None:
        return self.entropy.tau if self.entropy is not None else None

    @property
    def weighted_advantages(self) -> FloatArray:
        """pi * A elementwise (the softmax PG gradient direction)."""
        result: FloatArray = self.policy.probs * self.advantages.values
        return result


def _evaluate(
    mdp: TabularMdp, policy: Policy, tau: float | None
) -> tuple[ValueTable, QTable, AdvantageTable]:
    if tau is None:
        value = policy_eval(mdp, policy)
    else:
        value = soft_policy_eval(mdp, policy, tau)
    q = q_from_v(mdp, value)
    return value, q, advantage(mdp, policy, value, q, tau)


def initial_state(
    mdp: TabularMdp,
    policy: Policy,
    method: Method,
    tau: float | None = None,
) -> MethodState:
    """Evaluate a starting policy for ``method``.

    Raises:
        ValueError: On an unknown method, a tau/method mismatch, or a
            policy with zeros for a softmax-family method.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method {method!r}; expected one of {', '.join(METHODS)}")
    if method in ENTROPY_METHODS and tau is None:
        raise ValueError(f"method {method!r} needs an entropy weight tau > 0")
    if method not in ENTROPY_METHODS and tau is not None:
        raise ValueError(f"method {method!r} is unregularized; got tau={tau!r}")
    if method in SOFTMAX_METHODS:
        policy.require_positive(method)

    entropy = EntropyConfig(tau) if tau is not None else None
    value, q, adv = _evaluate(mdp, policy, tau)
    return MethodState(policy, 0, method, value, q, adv, entropy)


def _advance(
    mdp: TabularMdp,
    state: MethodState,
    policy: Policy,
    eta: float | None,
    state_steps: FloatArray | None = None,
) -> MethodState:
    value, q, adv = _evaluate(mdp, policy, state.tau)
    return MethodState(
        policy, state.iteration + 1, state.method, value, q, adv, state.entropy, eta, state_steps
    )


def _tilt(state: MethodState, exponent: FloatArray) -> Policy:
    """Multiplicative update pi * exp(exponent), done on log-probabilities."""
    if not np.all(np.isfinite(exponent)):
        raise ArithmeticError(f"non-finite update exponent at iteration {state.iteration}")
    return Policy.from_logits(state.policy.log_probs + exponent)


def _require_unregularized(state: MethodState, operation: str) -> None:
    if state.tau is not None:
        raise ValueError(f"{operation} needs an unregularized state, got tau={state.tau!r}")


def _require_tau(state: MethodState, tau: float, operation: str) -> None:
    if state.tau is None or state.tau != tau:
        raise ValueError(
            f"{operation} with tau={tau!r} does not match the state's evaluation "
            f"(tau={state.tau!r})"
        )


def effective_steps(
    mdp: TabularMdp, policy: Policy, eta: float, mu: StateDistribution
) -> FloatArray:
    """Per-state steps eta d_mu^pi(s) / (1 - gamma)."""
    d = visitation(mdp, policy, mu)
    result: FloatArray = eta * d.weights / (1.0 - mdp.gamma)
    return result


def positive_advantage_scale(state: MethodState) -> float | None:
    """min over S^k of max_a |pi A|, with S^k = {s : max_a pi A > 0}; None if S^k is empty."""
    weighted = state.weighted_advantages
    active = weighted.max(axis=1) > 0.0
    if not np.any(active):
        return None
    return float(np.abs(weighted[active]).max(axis=1).min())


def schedule_info(
    mdp: TabularMdp, state: MethodState, mu: StateDistribution
) -> ScheduleInfo:
    scale = positive_advantage_scale(state) if state.tau is None else None
    return ScheduleInfo(mdp.n_actions, mu.min_weight, mdp.gamma, scale)


def schedule_eta(schedule: StepSchedule, k: int, info: ScheduleInfo) -> float | None:
    """Step size eta_k for iteration ``k``.

    ``ppg_increasing`` returns ((2 + 5|A|) / mu_min) ((1 - gamma) / c3)
    (1 + (1 - gamma) / c3)^(k + 1); ``pg_adaptive`` returns
    c_adapt / ``info.adaptive_scale``, or ``None`` when the scale is undefined
    because no state has a positive weighted advantage.
    """
    if k < 0:
        raise ValueError(f"iteration index must be non-negative, got {k}")
    if schedule.kind == "constant":
        return schedule.eta
    if schedule.kind == "ppg_increasing":
        assert schedule.c3 is not None
        if info.mu_min <= 0:
            raise ValueError("ppg_increasing needs a start distribution with full support")
        ratio = (1.0 - info.gamma) / schedule.c3
        return ((2 + 5 * info.n_actions) / info.mu_min) * ratio * (1.0 + ratio) ** (k + 1)
    assert schedule.c_adapt is not None
    if info.adaptive_scale is None:
        return None
    return schedule.c_adapt / info.adaptive_scale


def _check_mu(mu: StateDistribution, operation: str) -> None:
    if mu.min_weight <= 0:
        raise ValueError(f"{operation} needs mu with full support (min weight > 0)")


def pi_step(mdp: TabularMdp, state: MethodState) -> MethodState:
    """Policy iteration: uniform over argmax_a Q^k(s, a)."""
    _require_unregularized(state, "pi_step")
    policy = greedy_policy(state.q_values.values, TOL_GAP)
    return _advance(mdp, state, policy, None)


def ppg_step(
    mdp: TabularMdp,
    state: MethodState,
    schedule: StepSchedule,
    mu: StateDistribution,
) -> MethodState:
    """Projected policy gradient: Proj(pi_s + eta_s Q(s, .)) row by row."""
    _require_unregularized(state, "ppg_step")
    _check_mu(mu, "ppg_step")
    eta = schedule_eta(schedule, state.iteration, schedule_info(mdp, state, mu))
    assert eta is not None
    steps = effective_steps(mdp, state.policy, eta, mu)
    target = state.policy.probs + steps[:, None] * state.q_values.values
    policy = Policy.from_probs(project_simplex_rows(target))
    return _advance(mdp, state, policy, eta, steps)


def softmax_pg_step(
    mdp: TabularMdp,
    state: MethodState,
    schedule: StepSchedule,
    mu: StateDistribution,
) -> MethodState:
    """Softmax policy gradient: pi * exp(eta_s pi A), normalized per state.

    With ``pg_adaptive`` and no state carrying a positive weighted advantage
    the policy is already optimal; the returned state keeps the policy and
    has ``eta = None``.
    """
    _require_unregularized(state, "softmax_pg_step")
    _check_mu(mu, "softmax_pg_step")
    eta = schedule_eta(schedule, state.iteration, schedule_info(mdp, state, mu))
    if eta is None:
        logger.debug(f"No positive weighted advantage at iteration {state.iteration}")
        return _advance(mdp, state, state.policy, None)
    steps = effective_steps(mdp, state.policy, eta, mu)
    policy = _tilt(state, steps[:, None] * state.weighted_advantages)
    return _advance(mdp, state, policy, eta, steps)


def softmax_npg_step(mdp: TabularMdp, state: MethodState, eta: float) -> MethodState:
    """Natural policy gradient: pi * exp(eta A), the same step at every state."""
    _require_unregularized(state, "softmax_npg_step")
    if not eta > 0:
        raise ValueError(f"softmax_npg_step needs eta > 0, got {eta!r}")
    policy = _tilt(state, eta * state.advantages.values)
    return _advance(mdp, state, policy, eta)


def entropy_softmax_pg_step(
    mdp: TabularMdp,
    state: MethodState,
    eta: float,
    tau: float,
    mu: StateDistribution,
) -> MethodState:
    """Entropy-regularized softmax PG: pi * exp(eta_s pi A_tau)."""
    _require_tau(state, tau, "entropy_softmax_pg_step")
    _check_mu(mu, "entropy_softmax_pg_step")
    if not eta > 0:
        raise ValueError(f"entropy_softmax_pg_step needs eta > 0, got {eta!r}")
    steps = effective_steps(mdp, state.policy, eta, mu)
    policy = _tilt(state, steps[:, None] * state.weighted_advantages)
    return _advance(mdp, state, policy, eta, steps)


def entropy_softmax_npg_step(
    mdp: TabularMdp, state: MethodState, eta: float, tau: float
) -> MethodState:
    """Entropy-regularized NPG: pi * exp(eta / (eta tau + 1) A_tau)."""
    _require_tau(state, tau, "entropy_softmax_npg_step")
    if not eta > 0:
        raise ValueError(f"entropy_softmax_npg_step needs eta > 0, got {eta!r}")
    policy = _tilt(state, (eta / (eta * tau + 1.0)) * state.advantages.values)
    return _advance(mdp, state, policy, eta)


def soft_pi_step(mdp: TabularMdp, state: MethodState, tau: float) -> MethodState:
    """Soft policy iteration: softmax(Q_tau^k / tau)."""
    _require_tau(state, tau, "soft_pi_step")
    logits = state.q_values.values / tau
    if not np.all(np.isfinite(logits)):
        raise ArithmeticError(f"non-finite soft Q values at iteration {state.iteration}")
    return _advance(mdp, state, Policy.from_logits(logits), None)


def step(
    mdp: TabularMdp,
    state: MethodState,
    schedule: StepSchedule,
    mu: StateDistribution,
) -> MethodState:
    """Apply the update rule named by ``state.method``."""
    method = state.method
    if method == "pi":
        return pi_step(mdp, state)
    if method == "ppg":
        return ppg_step(mdp, state, schedule, mu)
    if method == "softmax-pg":
        return softmax_pg_step(mdp, state, schedule, mu)

    eta = schedule_eta(schedule, state.iteration, schedule_info(mdp, state, mu))
    assert eta is not None
    if method == "npg":
        return softmax_npg_step(mdp, state, eta)

    tau = state.tau
    assert tau is not None
    if method == "entropy-pg":
        return entropy_softmax_pg_step(mdp, state, eta, tau, mu)
    if method == "entropy-npg":
        return entropy_softmax_npg_step(mdp, state, eta, tau)
    return soft_pi_step(mdp, state, tau)


@lru_cache(maxsize=256)
def beta_threshold(tau: float, gamma: float, n_actions: int) -> float:
    """Largest step size for which entropy softmax PG is guaranteed monotone.

    The threshold is the unique positive root of
    exp(-2x (1 + tau log|A|) / (1 - gamma)^2) - tau x / (2 (1 - gamma)).
    The root grows only like log(1 / tau) as tau -> 0, so it stays far below
    ``BETA_CAP`` for every positive float tau (about 3.4 at tau = 1e-300,
    gamma = 0.9, five actions). The search bracket doubles from 1 and the cap is
    returned, with a warning, only if the bracket passes ``BETA_CAP``.

    Raises:
        ValueError: If tau <= 0, gamma is outside [0, 1) or fewer than two actions.
    """
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"beta_threshold needs tau > 0, got {tau!r}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"beta_threshold needs gamma in [0, 1), got {gamma!r}")
    if n_actions < 2:
        raise ValueError(f"beta_threshold needs at least two actions, got {n_actions}")

    decay = 2.0 * (1.0 + tau * np.log(n_actions)) / (1.0 - gamma) ** 2
    slope = tau / (2.0 * (1.0 - gamma))

    def f(x: float) -> float:
        return float(np.exp(-decay * x) - slope * x)

    upper = 1.0
    while f(upper) >= 0.0:
        upper *= 2.0
        if upper > BETA_CAP:
            logger.warning(
                f"beta threshold exceeds {BETA_CAP:g} for tau={tau!r}; reporting the cap"
            )
            return BETA_CAP

    root = optimize.bisect(
        f, 0.0, upper, xtol=1e-16, rtol=4 * np.finfo(np.float64).eps, maxiter=200
    )
    return float(root)
