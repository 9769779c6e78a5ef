"""Exact dynamic programming: evaluation, Bellman operators, optimality summaries.

Everything here is a pure function of immutable inputs. Value tables carry a
``tau`` flag: ``None`` for the plain discounted return, a positive float for
the entropy-regularized one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from pglab.mdp import (
    TOL_GAP,
    BoolArray,
    FloatArray,
    Policy,
    StateDistribution,
    TabularMdp,
    greedy_policy,
)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-12
MAX_VALUE_ITERATIONS = 1_000_000
MAX_POLISH_ITERATIONS = 200


class ConvergenceError(RuntimeError):
    """Raised when value iteration does not reach its tolerance in time."""


@dataclass(frozen=True, eq=False)
class ValueTable:
    """State values V(s); ``tau`` is set for entropy-regularized values."""

    values: FloatArray
    tau: float | None = None

    @property
    def regularized(self) -> bool:
        return self.tau is not None

    def at(self, rho: StateDistribution) -> float:
        """V(rho) = E_{s~rho} V(s)."""
        return rho.expect(self.values)


@dataclass(frozen=True, eq=False)
class QTable:
    """Action values Q(s, a) = r(s, a) + gamma E[V(s')]."""

    values: FloatArray
    tau: float | None = None


@dataclass(frozen=True, eq=False)
class AdvantageTable:
    """Advantages A(s, a); soft advantages subtract tau log pi as well."""

    values: FloatArray
    tau: float | None = None


@dataclass(frozen=True, eq=False)
class OptimalitySummary:
    """Optimal values, advantages, optimal action sets and the gap Delta.

    ``gap_delta`` is ``inf`` when every action is optimal at every state.
    """

    v_star: ValueTable
    q_star: QTable
    a_star: AdvantageTable
    optimal_action_sets: tuple[tuple[int, ...], ...]
    gap_delta: float
    optimal_policy: Policy

    @property
    def tau(self) -> float | None:
        return self.v_star.tau

    @cached_property
    def optimal_mask(self) -> BoolArray:
        """Boolean |S| x |A| table marking A_s^*."""
        mask = np.zeros(self.a_star.values.shape, dtype=bool)
        for s, actions in enumerate(self.optimal_action_sets):
            mask[s, list(actions)] = True
        return mask

    @property
    def max_optimal_set_size(self) -> int:
        return max(len(actions) for actions in self.optimal_action_sets)


@dataclass(frozen=True)
class NonOptimalMass:
    """Per-state mass on non-optimal actions and both sides of its value sandwich.

    ``lower <= gap <= upper`` holds for every policy, where ``gap`` is
    V*(rho) - V^pi(rho).
    """

    b: FloatArray
    lower: float
    gap: float
    upper: float


def _check_shapes(mdp: TabularMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )


def _check_tau(tau: float) -> None:
    if not np.isfinite(tau) or tau <= 0:
        raise ValueError(f"entropy-regularized operations need tau > 0, got {tau!r}")


def policy_transition(mdp: TabularMdp, policy: Policy) -> FloatArray:
    """State-to-state transition matrix P_pi."""
    result: FloatArray = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    return result


def policy_reward(mdp: TabularMdp, policy: Policy) -> FloatArray:
    result: FloatArray = np.sum(policy.probs * mdp.reward, axis=1)
    return result


def entropy(policy: Policy) -> FloatArray:
    """Per-state entropy, with 0 log 0 = 0."""
    with np.errstate(invalid="ignore"):
        terms = np.where(policy.probs > 0, policy.probs * policy.log_probs, 0.0)
    result: FloatArray = -terms.sum(axis=1)
    return result


def _solve(
    mdp: TabularMdp, p_pi: FloatArray, rhs: FloatArray, transpose: bool = False
) -> FloatArray:
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi
    if transpose:
        system = system.T
    try:
        solution: FloatArray = linalg.solve(system, rhs)
    except linalg.LinAlgError as e:
        raise ArithmeticError(f"singular Bellman system (gamma={mdp.gamma})") from e
    if not np.all(np.isfinite(solution)):
        raise ArithmeticError("Bellman system produced non-finite values")
    return solution


def policy_eval(mdp: TabularMdp, policy: Policy) -> ValueTable:
    """Solve (I - gamma P_pi) V = r_pi exactly."""
    _check_shapes(mdp, policy)
    values = _solve(mdp, policy_transition(mdp, policy), policy_reward(mdp, policy))
    return ValueTable(values)


def soft_policy_eval(mdp: TabularMdp, policy: Policy, tau: float) -> ValueTable:
    """Solve the entropy-regularized Bellman equation for a positive policy."""
    _check_tau(tau)
    _check_shapes(mdp, policy)
    policy.require_positive("soft_policy_eval")
    rhs = policy_reward(mdp, policy) + tau * entropy(policy)
    values = _solve(mdp, policy_transition(mdp, policy), rhs)
    return ValueTable(values, tau)


def q_from_v(mdp: TabularMdp, value: ValueTable) -> QTable:
    """Q(s, a) = r(s, a) + gamma sum_t P(t | s, a) V(t); keeps the tau flag."""
    q = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, value.values)
    return QTable(q, value.tau)


def advantage(
    mdp: TabularMdp,
    policy: Policy,
    value: ValueTable,
    q: QTable,
    tau: float | None = None,
) -> AdvantageTable:
    """A = Q - V, or the soft advantage Q - tau log pi - V when ``tau`` is given.

    Raises:
        ValueError: If the tau flags of ``value`` and ``q`` differ from ``tau``.
    """
    _check_shapes(mdp, policy)
    if value.tau != tau or q.tau != tau:
        raise ValueError(
            f"tau flag mismatch: requested {tau!r}, value table {value.tau!r}, Q table {q.tau!r}"
        )
    if tau is None:
        return AdvantageTable(q.values - value.values[:, None])
    _check_tau(tau)
    policy.require_positive("soft advantage")
    return AdvantageTable(q.values - tau * policy.log_probs - value.values[:, None], tau)


def bellman_apply(mdp: TabularMdp, policy: Policy, value: ValueTable) -> ValueTable:
    """(T^pi V)(s) = sum_a pi(a|s) Q^V(s, a)."""
    _check_shapes(mdp, policy)
    q = q_from_v(mdp, value).values
    return ValueTable(np.sum(policy.probs * q, axis=1))


def bellman_optimal(mdp: TabularMdp, value: ValueTable) -> ValueTable:
    """(T V)(s) = max_a Q^V(s, a)."""
    return ValueTable(q_from_v(mdp, value).values.max(axis=1))


def soft_bellman_apply(
    mdp: TabularMdp, policy: Policy, value: ValueTable, tau: float
) -> ValueTable:
    """(T_tau^pi V)(s) = sum_a pi(a|s) [Q^V(s, a) - tau log pi(a|s)]."""
    _check_tau(tau)
    _check_shapes(mdp, policy)
    q = q_from_v(mdp, value).values
    return ValueTable(np.sum(policy.probs * q, axis=1) + tau * entropy(policy), tau)


def soft_bellman_optimal(mdp: TabularMdp, value: ValueTable, tau: float) -> ValueTable:
    """(T_tau V)(s) = tau log sum_a exp(Q^V(s, a) / tau)."""
    _check_tau(tau)
    q = q_from_v(mdp, value).values
    return ValueTable(tau * logsumexp(q / tau, axis=1), tau)


def soft_greedy(mdp: TabularMdp, value: ValueTable, tau: float) -> Policy:
    """softmax(Q^V / tau) row by row."""
    _check_tau(tau)
    return Policy.from_logits(q_from_v(mdp, value).values / tau)


def _float_floor(values: FloatArray) -> float:
    """Smallest residual distinguishable from rounding noise for these values."""
    return 16.0 * float(np.finfo(np.float64).eps) * max(1.0, float(np.max(np.abs(values))))


def _value_iteration(
    mdp: TabularMdp,
    tau: float | None,
    tol: float,
    max_iterations: int,
) -> FloatArray:
    """Iterate the (soft) optimal operator until the residual certifies ``tol``.

    The residual bound ``tol (1 - gamma) / gamma`` is raised to the rounding
    floor of the current values; the exact polish that follows removes the
    remaining error.
    """
    threshold = tol * (1.0 - mdp.gamma) / mdp.gamma if mdp.gamma > 0 else np.inf
    current = ValueTable(np.zeros(mdp.n_states), tau)
    for iteration in range(1, max_iterations + 1):
        if tau is None:
            updated = bellman_optimal(mdp, current)
        else:
            updated = soft_bellman_optimal(mdp, current, tau)
        residual = float(np.max(np.abs(updated.values - current.values)))
        current = ValueTable(updated.values, tau)
        if residual <= max(threshold, _float_floor(current.values)):
            logger.debug(
                f"Value iteration converged after {iteration} sweeps (residual {residual:.3e})"
            )
            return current.values
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} within {max_iterations} sweeps "
        f"(gamma={mdp.gamma})"
    )


def _summary(
    mdp: TabularMdp,
    policy: Policy,
    v_star: ValueTable,
    tol_gap: float,
) -> OptimalitySummary:
    q_star = q_from_v(mdp, v_star)
    a_star = advantage(mdp, policy, v_star, q_star, v_star.tau)
    mask = a_star.values >= -tol_gap
    sets = tuple(tuple(int(a) for a in np.flatnonzero(row)) for row in mask)
    off = np.abs(a_star.values[~mask])
    gap_delta = float(off.min()) if off.size else float("inf")
    return OptimalitySummary(v_star, q_star, a_star, sets, gap_delta, policy)


def optimal_values(
    mdp: TabularMdp,
    tol: float = DEFAULT_TOL,
    tol_gap: float = TOL_GAP,
    max_iterations: int = MAX_VALUE_ITERATIONS,
) -> OptimalitySummary:
    """Optimal values via value iteration, polished by exact policy iteration.

    Raises:
        ValueError: If ``tol`` is not positive.
        ConvergenceError: If value iteration or the polish does not settle.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    values = _value_iteration(mdp, None, tol, max_iterations)
    policy = greedy_policy(q_from_v(mdp, ValueTable(values)).values, tol_gap)
    for _ in range(MAX_POLISH_ITERATIONS):
        v_pi = policy_eval(mdp, policy)
        improved = greedy_policy(q_from_v(mdp, v_pi).values, tol_gap)
        if np.array_equal(improved.probs > 0, policy.probs > 0):
            break
        policy = improved
    else:
        raise ConvergenceError("policy iteration polish did not settle on an optimal support")

    summary = _summary(mdp, policy, policy_eval(mdp, policy), tol_gap)
    logger.debug(f"Optimal values found: Delta={summary.gap_delta:.6g}")
    return summary


def soft_optimal(
    mdp: TabularMdp,
    tau: float,
    tol: float = DEFAULT_TOL,
    tol_gap: float = TOL_GAP,
    max_iterations: int = MAX_VALUE_ITERATIONS,
) -> OptimalitySummary:
    """Entropy-regularized optimum via soft value iteration and a soft PI polish.

    Raises:
        ValueError: If ``tau`` or ``tol`` is not positive.
        ConvergenceError: If the polish does not settle or the result misses
            Q* = V* + tau log pi* by more than 10 * tol.
    """
    _check_tau(tau)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    values = _value_iteration(mdp, tau, tol, max_iterations)
    previous = ValueTable(values, tau)
    policy = soft_greedy(mdp, previous, tau)
    for _ in range(MAX_POLISH_ITERATIONS):
        current = soft_policy_eval(mdp, policy, tau)
        change = float(np.max(np.abs(current.values - previous.values)))
        if change <= _float_floor(current.values):
            break
        previous = current
        policy = soft_greedy(mdp, current, tau)
    else:
        raise ConvergenceError("soft policy iteration polish did not settle")

    summary = _summary(mdp, policy, current, tol_gap)
    residual = float(
        np.max(np.abs(summary.q_star.values - current.values[:, None] - tau * policy.log_probs))
    )
    if residual > 10 * max(tol, _float_floor(current.values)):
        raise ConvergenceError(
            f"soft optimality residual {residual:.3e} exceeds 10 * tol after the polish"
        )
    return summary


def visitation(mdp: TabularMdp, policy: Policy, rho: StateDistribution) -> StateDistribution:
    """Discounted state visitation d_rho^pi = (1 - gamma) rho^T (I - gamma P_pi)^{-1}."""
    _check_shapes(mdp, policy)
    if len(rho) != mdp.n_states:
        raise ValueError(f"distribution has {len(rho)} states, MDP has {mdp.n_states}")
    d = (1.0 - mdp.gamma) * _solve(mdp, policy_transition(mdp, policy), rho.weights, transpose=True)
    d = np.maximum(d, 0.0)
    return StateDistribution(d / d.sum())


def nonoptimal_mass(
    mdp: TabularMdp,
    policy: Policy,
    summary: OptimalitySummary,
    rho: StateDistribution,
) -> NonOptimalMass:
    """Mass b_s on non-optimal actions with the bounds it puts on V*(rho) - V^pi(rho)."""
    if summary.tau is not None:
        raise ValueError("nonoptimal_mass needs an unregularized optimality summary")
    _check_shapes(mdp, policy)
    b = np.where(summary.optimal_mask, 0.0, policy.probs).sum(axis=1)
    v_pi = policy_eval(mdp, policy)
    gap = rho.expect(summary.v_star.values - v_pi.values)
    lower = summary.gap_delta * rho.expect(b) if np.isfinite(summary.gap_delta) else 0.0
    d = visitation(mdp, policy, rho)
    upper = d.expect(b) / (1.0 - mdp.gamma) ** 2
    return NonOptimalMass(b, lower, gap, upper)


def d_star_ratio(mdp: TabularMdp, summary: OptimalitySummary, rho: StateDistribution) -> float:
    """||d_rho^{pi*} / rho||_inf, or ``inf`` when rho misses a visited state."""
    d_star = visitation(mdp, summary.optimal_policy, rho).weights
    visited = d_star > 0
    if np.any(rho.weights[visited] == 0):
        return float("inf")
    return float(np.max(d_star[visited] / rho.weights[visited]))
