"""Iteration records, traces and the inequality checks run against them.

A check produces one signed slack per iteration: bound minus observed,
oriented so that a nonnegative slack means the inequality held. Identities
are recorded as ``-|residual|``. ``None`` marks an iteration where the
check did not apply.

Step checks are evaluated by :func:`record_iteration` while a run is in
progress; trace checks need the whole sequence and are evaluated by
:func:`check_inequality` from the records and the trace's context.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike

from pglab.algorithms import (
    ENTROPY_METHODS,
    METHODS,
    SCHEDULE_KINDS,
    MethodState,
    StepSchedule,
    beta_threshold,
)
from pglab.evaluation import (
    OptimalitySummary,
    bellman_apply,
    d_star_ratio,
    soft_bellman_apply,
    soft_bellman_optimal,
    visitation,
)
from pglab.mdp import FloatArray, Policy, StateDistribution, TabularMdp

logger = logging.getLogger(__name__)

SLACK_TOLERANCE = 1e-9
# KL values below this are treated as zero when forming ratios.
KL_FLOOR = 1e-16
# Greedy gaps at or below this are rounding noise, not progress to be made.
ACTIVE_FLOOR = 1e-13
ALL_CHECKS = "all"

CheckScope = Literal["step", "trace"]

_ANY_METHOD = frozenset(METHODS)
_UNREGULARIZED = frozenset(m for m in METHODS if m not in ENTROPY_METHODS)
_ANY_SCHEDULE = frozenset(SCHEDULE_KINDS)
_CONSTANT = frozenset({"constant"})


@dataclass(frozen=True)
class CheckSpec:
    """Registry entry describing one check and where it applies."""

    name: str
    scope: CheckScope
    methods: frozenset[str]
    description: str
    schedules: frozenset[str] = _ANY_SCHEDULE
    needs_next: bool = True

    def applies_to(self, method: str, schedule_kind: str) -> bool:
        return method in self.methods and schedule_kind in self.schedules


_SPECS = (
    CheckSpec(
        "visitation-floor", "step", _ANY_METHOD, "d_rho^k >= (1 - gamma) rho", needs_next=False
    ),
    CheckSpec("monotone", "step", _ANY_METHOD, "V^{k+1} >= V^k at every state"),
    CheckSpec("pdl-identity", "step", _ANY_METHOD, "performance difference identity"),
    CheckSpec("linear-inf", "step", _ANY_METHOD, "sup-norm linear recursion with C_k"),
    CheckSpec(
        "lstar-sandwich",
        "step",
        _UNREGULARIZED,
        "L_k^* <= E_{d*}[max A^k] / (1 - gamma) <= L_k^* / ((1 - gamma) rho_min)",
        needs_next=False,
    ),
    CheckSpec(
        "bsk-sandwich",
        "step",
        _UNREGULARIZED,
        "Delta E_rho[b^k] <= L_k^* <= E_{d^k}[b^k] / (1 - gamma)^2",
        needs_next=False,
    ),
    CheckSpec("ppg-improvement", "step", frozenset({"ppg"}), "PPG per-state improvement"),
    CheckSpec("ppg-termination", "step", frozenset({"ppg"}), "PPG exact termination"),
    CheckSpec("pg-identity", "step", frozenset({"softmax-pg"}), "softmax PG improvement identity"),
    CheckSpec("pg-lower", "step", frozenset({"softmax-pg"}), "softmax PG improvement lower bound"),
    CheckSpec("pg-upper", "step", frozenset({"softmax-pg"}), "softmax PG improvement upper bound"),
    CheckSpec("npg-identity-1", "step", frozenset({"npg"}), "NPG improvement as two KLs"),
    CheckSpec("npg-identity-2", "step", frozenset({"npg"}), "NPG three-point KL identity"),
    CheckSpec("npg-bound-1", "step", frozenset({"npg"}), "NPG improvement bound, global phase"),
    CheckSpec("npg-bound-2", "step", frozenset({"npg"}), "NPG improvement bound, local phase"),
    CheckSpec(
        "entropy-pg-lower", "step", frozenset({"entropy-pg"}), "entropy PG improvement, eta < beta"
    ),
    CheckSpec(
        "entropy-pg-linear", "step", frozenset({"entropy-pg"}), "entropy PG per-step linear rate"
    ),
    CheckSpec(
        "entropy-npg-identity-1", "step", frozenset({"entropy-npg"}), "entropy NPG improvement"
    ),
    CheckSpec(
        "entropy-npg-identity-2", "step", frozenset({"entropy-npg"}), "entropy NPG vs soft optimum"
    ),
    CheckSpec(
        "entropy-npg-sandwich", "step", frozenset({"entropy-npg"}), "two-sided bound on L_k^{k+1}"
    ),
    CheckSpec(
        "entropy-kl-gap",
        "step",
        ENTROPY_METHODS,
        "soft suboptimality as visitation-weighted KL",
        needs_next=False,
    ),
    CheckSpec("softpi-quadratic", "step", frozenset({"soft-pi"}), "soft PI quadratic contraction"),
    CheckSpec("npg-rate", "trace", frozenset({"npg"}), "NPG product-form linear rate"),
    CheckSpec(
        "npg-sublinear", "trace", frozenset({"npg"}), "NPG O(1/k) bound", schedules=_CONSTANT
    ),
    CheckSpec(
        "pg-sublinear",
        "trace",
        frozenset({"softmax-pg"}),
        "softmax PG O(1/k) bound with trace kappa",
        schedules=_CONSTANT,
    ),
    CheckSpec(
        "pg-adaptive",
        "trace",
        frozenset({"softmax-pg"}),
        "softmax PG linear rate with adaptive steps",
        schedules=frozenset({"pg_adaptive"}),
    ),
    CheckSpec(
        "ppg-linear", "trace", frozenset({"ppg"}), "PPG constant-step linear rate", _CONSTANT
    ),
    CheckSpec(
        "ppg-increasing",
        "trace",
        frozenset({"ppg"}),
        "PPG increasing-step linear rate",
        schedules=frozenset({"ppg_increasing"}),
    ),
    CheckSpec("softpi-envelope", "trace", frozenset({"soft-pi"}), "soft PI doubly-exponential"),
    CheckSpec(
        "entropy-npg-global",
        "trace",
        frozenset({"entropy-npg"}),
        "entropy NPG global linear rate",
        schedules=_CONSTANT,
    ),
)

CHECKS: dict[str, CheckSpec] = {spec.name: spec for spec in _SPECS}


def applicable_checks(method: str, schedule_kind: str = "constant") -> tuple[str, ...]:
    """Names of every registered check that applies to a method and schedule."""
    return tuple(name for name, spec in CHECKS.items() if spec.applies_to(method, schedule_kind))


def resolve_checks(
    names: Iterable[str], method: str, schedule_kind: str = "constant"
) -> tuple[str, ...]:
    """Expand ``all`` and validate check names, keeping first-seen order.

    Incompatible names are kept; they are reported as skipped.

    Raises:
        ValueError: On an unknown check name.
    """
    resolved: list[str] = []
    for name in names:
        expanded = applicable_checks(method, schedule_kind) if name == ALL_CHECKS else (name,)
        for item in expanded:
            if item not in CHECKS:
                raise ValueError(
                    f"Unknown check {item!r}; expected '{ALL_CHECKS}' or one of "
                    f"{', '.join(CHECKS)}"
                )
            if item not in resolved:
                resolved.append(item)
    return tuple(resolved)


@dataclass(frozen=True)
class TraceContext:
    """Run metadata plus the problem constants the trace checks need."""

    method: str
    schedule: StepSchedule
    tau: float | None
    gamma: float
    n_states: int
    n_actions: int
    mu_min: float
    rho_min: float
    gap_delta: float
    max_optimal_set: int
    d_star_ratio: float
    fingerprint: str = ""
    checks: tuple[str, ...] = ()
    npg_initial_kl: float | None = None
    entropy_npg_c1: float | None = None


def build_context(
    mdp: TabularMdp,
    summary: OptimalitySummary,
    initial: MethodState,
    schedule: StepSchedule,
    mu: StateDistribution,
    rho: StateDistribution,
    checks: Sequence[str] = (),
    fingerprint: str = "",
) -> TraceContext:
    """Collect the constants of a run before its first step."""
    npg_initial_kl = None
    entropy_npg_c1 = None
    if initial.method == "npg":
        d_star = visitation(mdp, summary.optimal_policy, rho)
        npg_initial_kl = d_star.expect(policy_kl(summary.optimal_policy, initial.policy))
    if initial.method == "entropy-npg" and initial.tau is not None:
        tau, eta = initial.tau, schedule.eta
        q_gap = float(np.max(np.abs(summary.q_star.values - initial.q_values.values)))
        log_gap = float(
            np.max(np.abs(summary.optimal_policy.log_probs - initial.policy.log_probs))
        )
        entropy_npg_c1 = q_gap + 2.0 * tau * (1.0 - eta * tau / (1.0 + eta * tau)) * log_gap

    return TraceContext(
        method=initial.method,
        schedule=schedule,
        tau=initial.tau,
        gamma=mdp.gamma,
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        mu_min=mu.min_weight,
        rho_min=rho.min_weight,
        gap_delta=summary.gap_delta,
        max_optimal_set=summary.max_optimal_set_size,
        d_star_ratio=d_star_ratio(mdp, summary, rho),
        fingerprint=fingerprint,
        checks=tuple(checks),
        npg_initial_kl=npg_initial_kl,
        entropy_npg_c1=entropy_npg_c1,
    )


@dataclass(frozen=True)
class IterationRecord:
    """Metrics of iterate k and the slacks of the step k -> k+1.

    ``eta_k``, ``l_k_kp1`` and the step-check residuals describe the step
    that leaves iterate k, so they are ``None`` on the last record.
    ``kappa_term`` is min_s (1 - b_s^k) for unregularized runs and min pi^k
    for entropy-regularized ones.
    """

    k: int
    eta_k: float | None
    v_gap_inf: float
    v_gap_rho: float
    l_k_kp1: float | None
    b_max: float | None
    kl_to_opt: float | None
    kappa_term: float | None
    residuals: dict[str, float | None] = field(default_factory=dict)
    rate_factors: dict[str, float] = field(default_factory=dict)


@dataclass
class Trace:
    """Ordered iteration records of one run."""

    context: TraceContext | None = None
    records: list[IterationRecord] = field(default_factory=list)
    policies: list[Policy] = field(default_factory=list)
    optimal_policy: Policy | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: IterationRecord, policy: Policy | None = None) -> None:
        """Add the next record; k must start at 0 and strictly increase."""
        if self.records and record.k <= self.records[-1].k:
            raise ValueError(f"record k={record.k} does not follow k={self.records[-1].k}")
        if not self.records and record.k != 0:
            raise ValueError(f"a trace starts at k=0, got k={record.k}")
        self.records.append(record)
        if policy is not None:
            self.policies.append(policy)

    @property
    def kappa_estimate(self) -> float | None:
        """Smallest ``kappa_term`` seen so far (an estimate of the infimum)."""
        terms = [r.kappa_term for r in self.records if r.kappa_term is not None]
        return min(terms) if terms else None

    def kappa_series(self) -> list[float | None]:
        """Running minimum of ``kappa_term``, one entry per record."""
        series: list[float | None] = []
        current: float | None = None
        for record in self.records:
            if record.kappa_term is not None:
                current = (
                    record.kappa_term if current is None else min(current, record.kappa_term)
                )
            series.append(current)
        return series

    def column(self, name: str) -> FloatArray:
        """A numeric record field as an array, NaN where unset."""
        values = [getattr(r, name) for r in self.records]
        return np.array([np.nan if v is None else v for v in values], dtype=np.float64)

    def ks(self) -> tuple[int, ...]:
        return tuple(r.k for r in self.records)


def policy_kl(p: Policy, q: Policy) -> FloatArray:
    """Per-state KL(p_s || q_s) from log-probabilities, with 0 log 0 = 0."""
    with np.errstate(invalid="ignore"):
        terms = np.where(p.probs > 0, p.probs * (p.log_probs - q.log_probs), 0.0)
    result: FloatArray = terms.sum(axis=1)
    return result


def kl(p: ArrayLike, q: ArrayLike) -> float:
    """KL(p || q) for two distributions, ``inf`` when p is not supported by q."""
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    if p_arr.shape != q_arr.shape or p_arr.ndim != 1:
        raise ValueError(f"kl needs two vectors of equal length, got {p_arr.shape}, {q_arr.shape}")
    support = p_arr > 0
    if np.any(q_arr[support] <= 0):
        return float("inf")
    value = float(np.sum(p_arr[support] * np.log(p_arr[support] / q_arr[support])))
    return max(value, 0.0)


def _nonoptimal_mass(policy: Policy, summary: OptimalitySummary) -> FloatArray:
    result: FloatArray = np.where(summary.optimal_mask, 0.0, policy.probs).sum(axis=1)
    return result


def _identity(residual: FloatArray | float) -> float:
    return -float(np.max(np.abs(residual)))


class _Iteration:
    """Lazily computed quantities for one step k -> k+1."""

    def __init__(
        self,
        mdp: TabularMdp,
        summary: OptimalitySummary,
        prev: MethodState,
        nxt: MethodState | None,
        rho: StateDistribution,
        mu: StateDistribution,
    ) -> None:
        self.mdp = mdp
        self.summary = summary
        self.prev = prev
        self._next = nxt
        self.rho = rho
        self.mu = mu
        self.gamma = mdp.gamma
        self.tau = prev.tau

    @property
    def next(self) -> MethodState:
        assert self._next is not None
        return self._next

    @property
    def has_next(self) -> bool:
        return self._next is not None

    @property
    def eta(self) -> float | None:
        return self.next.eta

    @cached_property
    def d_k(self) -> StateDistribution:
        return visitation(self.mdp, self.prev.policy, self.rho)

    @cached_property
    def d_next(self) -> StateDistribution:
        return visitation(self.mdp, self.next.policy, self.rho)

    @cached_property
    def d_star(self) -> StateDistribution:
        return visitation(self.mdp, self.summary.optimal_policy, self.rho)

    @cached_property
    def improvement(self) -> FloatArray:
        """(T^{k+1} V^k - V^k)(s), soft when the run is regularized."""
        if self.tau is None:
            applied = bellman_apply(self.mdp, self.next.policy, self.prev.values)
        else:
            applied = soft_bellman_apply(self.mdp, self.next.policy, self.prev.values, self.tau)
        result: FloatArray = applied.values - self.prev.values.values
        return result

    @cached_property
    def greedy_gap(self) -> FloatArray:
        """(T V^k - V^k)(s) for the optimal (soft) operator."""
        if self.tau is None:
            result: FloatArray = self.prev.advantages.values.max(axis=1)
            return result
        optimal = soft_bellman_optimal(self.mdp, self.prev.values, self.tau)
        soft: FloatArray = optimal.values - self.prev.values.values
        return soft

    @cached_property
    def gap(self) -> FloatArray:
        result: FloatArray = self.summary.v_star.values - self.prev.values.values
        return result

    @cached_property
    def next_gap(self) -> FloatArray:
        result: FloatArray = self.summary.v_star.values - self.next.values.values
        return result

    @property
    def gap_inf(self) -> float:
        return float(np.max(np.abs(self.gap)))

    @property
    def next_gap_inf(self) -> float:
        return float(np.max(np.abs(self.next_gap)))

    @property
    def gap_rho(self) -> float:
        return self.rho.expect(self.gap)

    @property
    def next_gap_rho(self) -> float:
        return self.rho.expect(self.next_gap)

    @cached_property
    def l_k_kp1(self) -> float:
        return self.d_star.expect(self.improvement) / (1.0 - self.gamma)

    @cached_property
    def b(self) -> FloatArray:
        return _nonoptimal_mass(self.prev.policy, self.summary)

    @cached_property
    def kl_next_prev(self) -> FloatArray:
        return policy_kl(self.next.policy, self.prev.policy)

    @cached_property
    def kl_prev_next(self) -> FloatArray:
        return policy_kl(self.prev.policy, self.next.policy)

    @cached_property
    def kl_opt_prev(self) -> FloatArray:
        return policy_kl(self.summary.optimal_policy, self.prev.policy)

    @cached_property
    def kl_opt_next(self) -> FloatArray:
        return policy_kl(self.summary.optimal_policy, self.next.policy)

    @cached_property
    def kl_prev_opt(self) -> FloatArray:
        return policy_kl(self.prev.policy, self.summary.optimal_policy)

    @cached_property
    def kl_next_opt(self) -> FloatArray:
        return policy_kl(self.next.policy, self.summary.optimal_policy)

    @cached_property
    def below_beta(self) -> bool:
        """Whether the entropy PG step size is under the monotonicity threshold."""
        assert self.tau is not None
        if self.mdp.n_actions < 2 or self.eta is None:
            return True
        return self.eta < beta_threshold(self.tau, self.gamma, self.mdp.n_actions)

    @property
    def optimal_weighted_advantage(self) -> FloatArray:
        """sum_a pi*(a|s) A^k(s, a)."""
        result: FloatArray = np.sum(
            self.summary.optimal_policy.probs * self.prev.advantages.values, axis=1
        )
        return result

    def _linear_rate_slack(self, c_k: float) -> float:
        return (1.0 - (1.0 - self.gamma) * c_k) * self.gap_inf - self.next_gap_inf

    def _unchecked_entropy_pg(self) -> bool:
        return self.prev.method == "entropy-pg" and not self.below_beta

    # Step checks. Each returns a slack or None when the check is inactive.

    def visitation_floor(self) -> float | None:
        floor = (1.0 - self.gamma) * self.rho.weights
        return float(np.min(self.d_k.weights - floor))

    def monotone(self) -> float | None:
        if self._unchecked_entropy_pg():
            return None
        return float(np.min(self.next.values.values - self.prev.values.values))

    def pdl_identity(self) -> float | None:
        change = self.next.values.at(self.rho) - self.prev.values.at(self.rho)
        return _identity(change - self.d_next.expect(self.improvement) / (1.0 - self.gamma))

    def linear_inf(self) -> float | None:
        if self._unchecked_entropy_pg():
            return None
        active = self.greedy_gap > ACTIVE_FLOOR
        if not np.any(active):
            c_k = 1.0
        else:
            ratios = self.improvement[active] / self.greedy_gap[active]
            c_k = float(np.clip(ratios.min(), 0.0, 1.0))
        return self._linear_rate_slack(c_k)

    def lstar_sandwich(self) -> float | None:
        middle = self.d_star.expect(self.greedy_gap) / (1.0 - self.gamma)
        lower_slack = middle - self.gap_rho
        rho_min = self.rho.min_weight
        if rho_min <= 0:
            return lower_slack
        upper_slack = self.gap_rho / ((1.0 - self.gamma) * rho_min) - middle
        return min(lower_slack, upper_slack)

    def bsk_sandwich(self) -> float | None:
        delta = self.summary.gap_delta
        lower = delta * self.rho.expect(self.b) if np.isfinite(delta) else 0.0
        upper = self.d_k.expect(self.b) / (1.0 - self.gamma) ** 2
        return min(self.gap_rho - lower, upper - self.gap_rho)

    def ppg_improvement(self) -> float | None:
        steps = self.next.state_steps
        if steps is None:
            return None
        best = self.prev.advantages.values.max(axis=1)
        offset = (2 + 5 * self.mdp.n_actions) / steps
        bound = np.where(best > 0, best**2 / (best + offset), 0.0)
        return float(np.min(self.improvement - bound))

    def ppg_termination(self) -> float | None:
        delta = self.summary.gap_delta
        steps = self.next.state_steps
        if not np.isfinite(delta) or steps is None:
            return None
        eta_min = float(steps.min())
        threshold = (delta / 2.0) * (eta_min * delta / (1.0 + eta_min * delta))
        if self.gap_inf > threshold:
            return None
        return -float(_nonoptimal_mass(self.next.policy, self.summary).max())

    def pg_identity(self) -> float | None:
        steps = self.next.state_steps
        if steps is None:
            return None
        weighted = self.prev.weighted_advantages
        exponent = steps[:, None] * weighted
        scaled = np.exp(exponent - exponent.max(axis=1, keepdims=True))
        z = np.sum(self.prev.policy.probs * scaled, axis=1)
        pair_adv = weighted[:, :, None] - weighted[:, None, :]
        pair_exp = scaled[:, :, None] - scaled[:, None, :]
        predicted = np.sum(pair_adv * pair_exp, axis=(1, 2)) / (2 * self.mdp.n_actions * z)
        return _identity(self.improvement - predicted)

    def pg_lower(self) -> float | None:
        eta = self.eta
        if eta is None:
            return None
        m = np.abs(self.prev.weighted_advantages).max(axis=1)
        bound = m * -np.expm1(-eta * self.mu.min_weight * m) / self.mdp.n_actions
        return float(np.min(self.improvement - bound))

    def pg_upper(self) -> float | None:
        eta = self.eta
        if eta is None:
            return None
        m = np.abs(self.prev.weighted_advantages).max(axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            scale = np.expm1(2.0 * eta / (1.0 - self.gamma) ** 2)
            bound = np.where(m > 0, scale * self.mdp.n_actions * (1.0 - self.gamma) * m**2, 0.0)
        return float(np.min(bound - self.improvement))

    def npg_identity_1(self) -> float | None:
        eta = self.eta
        if eta is None:
            return None
        predicted = (self.kl_next_prev + self.kl_prev_next) / eta
        return _identity(self.improvement - predicted)

    def npg_identity_2(self) -> float | None:
        eta = self.eta
        if eta is None:
            return None
        kl_terms = self.kl_opt_next - self.kl_opt_prev + self.kl_next_prev
        residual = self.improvement - self.optimal_weighted_advantage - kl_terms / eta
        return _identity(residual)

    def _npg_factors(self) -> tuple[FloatArray, FloatArray]:
        """Per-state improvement factors of the global NPG bound and max_a A^k."""
        eta = self.eta
        assert eta is not None
        adv = self.prev.advantages.values
        best = adv.max(axis=1)
        top = adv == best[:, None]
        top_mass = np.sum(np.where(top, self.prev.policy.probs, 0.0), axis=1)
        others = np.where(top, -np.inf, adv).max(axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            spread = np.expm1(eta * (best - others))
            factor = np.where(np.isfinite(spread), 1.0 - 1.0 / (1.0 + top_mass * spread), 1.0)
        return factor, best

    def npg_rate_factor(self) -> float:
        factor, best = self._npg_factors()
        active = best > ACTIVE_FLOOR
        c_k = float(factor[active].min()) if np.any(active) else 1.0
        return 1.0 - (1.0 - self.gamma) * c_k

    def npg_bound_1(self) -> float | None:
        if self.eta is None:
            return None
        factor, best = self._npg_factors()
        return float(np.min(self.improvement - factor * best))

    def npg_bound_2(self) -> float | None:
        eta = self.eta
        delta = self.summary.gap_delta
        if eta is None or not np.isfinite(delta) or self.gap_inf > delta / 4.0:
            return None
        epsilon = self.gap_inf
        optimal_mass = 1.0 - self.b
        xi = np.where(self.summary.optimal_mask, self.prev.policy.probs, 0.0)
        xi = xi / optimal_mass[:, None]
        xi_adv = np.sum(xi * self.prev.advantages.values, axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            spread = np.expm1(eta * (delta - epsilon))
            factor = np.where(
                np.isfinite(spread), 1.0 - 1.0 / (1.0 + optimal_mass * spread), 1.0
            )
        return float(np.min(self.improvement - factor * xi_adv))

    def _entropy_pg_exponential(self, eta: float) -> float:
        assert self.tau is not None
        decay = 2.0 * (1.0 + self.tau * np.log(self.mdp.n_actions)) / (1.0 - self.gamma) ** 2
        return float(np.exp(-decay * eta))

    def entropy_pg_lower(self) -> float | None:
        eta = self.eta
        if eta is None or self.tau is None or not self.below_beta:
            return None
        bracket = self._entropy_pg_exponential(eta) - self.tau * eta / (2.0 * (1.0 - self.gamma))
        m = np.abs(self.prev.weighted_advantages).max(axis=1)
        bound = eta * self.mu.min_weight * bracket * m**2
        return float(np.min(self.improvement - bound))

    def entropy_pg_linear(self) -> float | None:
        eta = self.eta
        if eta is None or self.tau is None or not self.below_beta:
            return None
        kappa = float(self.prev.policy.probs.min())
        bracket = 2.0 * self._entropy_pg_exponential(eta) - self.tau * eta / (1.0 - self.gamma)
        c_k = eta * self.mu.min_weight * self.tau * kappa**2 * bracket
        return self._linear_rate_slack(c_k)

    def entropy_npg_identity_1(self) -> float | None:
        eta = self.eta
        if eta is None or self.tau is None:
            return None
        predicted = self.kl_next_prev / eta + (eta * self.tau + 1.0) / eta * self.kl_prev_next
        return _identity(self.improvement - predicted)

    def entropy_npg_identity_2(self) -> float | None:
        eta = self.eta
        tau = self.tau
        if eta is None or tau is None:
            return None
        optimal_gap = self.optimal_weighted_advantage - tau * self.kl_opt_prev
        predicted = (
            optimal_gap
            + (eta * tau + 1.0) / eta * self.kl_opt_next
            - self.kl_opt_prev / eta
            + self.kl_next_prev / eta
        )
        return _identity(self.improvement - predicted)

    def entropy_npg_sandwich(self) -> float | None:
        eta = self.eta
        tau = self.tau
        if eta is None or tau is None:
            return None
        pairs = (
            (self.kl_next_prev, self.kl_prev_next),
            (self.kl_opt_prev, self.kl_prev_opt),
            (self.kl_opt_next, self.kl_next_opt),
        )
        if any(np.any(x < KL_FLOOR) or np.any(y < KL_FLOOR) for x, y in pairs):
            return None
        epsilon = max(
            float(np.max(np.abs(ratio - 1.0)))
            for x, y in pairs
            for ratio in (x / y, y / x)
        )
        delta = max(
            float(np.max(np.abs(ratio - 1.0)))
            for d in (self.d_k.weights, self.d_next.weights)
            for ratio in (self.d_star.weights / d, d / self.d_star.weights)
        )
        if epsilon >= 1.0 or delta >= 1.0:
            return None

        x = eta * tau
        now, after = self.gap_rho, self.next_gap_rho
        lower = (1.0 + 1.0 / ((x + 1.0) * (1.0 + epsilon))) * (
            (1.0 - (1.0 + epsilon) * (1.0 + delta) / x) * now
            + (1.0 + 1.0 / x) * (1.0 - epsilon) * (1.0 - delta) * after
        )
        upper = (1.0 + 1.0 / ((x + 1.0) * (1.0 - epsilon))) * (
            (1.0 - (1.0 - epsilon) * (1.0 - delta) / x) * now
            + (1.0 + 1.0 / x) * (1.0 + epsilon) * (1.0 + delta) * after
        )
        return min(self.l_k_kp1 - lower, upper - self.l_k_kp1)

    def entropy_kl_gap(self) -> float | None:
        if self.tau is None:
            return None
        predicted = self.tau / (1.0 - self.gamma) * self.d_k.expect(self.kl_prev_opt)
        return _identity(self.gap_rho - predicted)

    def softpi_quadratic(self) -> float | None:
        if self.tau is None:
            return None
        scale = self.gamma**2 / (2.0 * self.tau * (1.0 - self.gamma))
        return scale * self.gap_inf**2 - self.next_gap_inf


_STEP_CHECKS: dict[str, Callable[[_Iteration], float | None]] = {
    "visitation-floor": _Iteration.visitation_floor,
    "monotone": _Iteration.monotone,
    "pdl-identity": _Iteration.pdl_identity,
    "linear-inf": _Iteration.linear_inf,
    "lstar-sandwich": _Iteration.lstar_sandwich,
    "bsk-sandwich": _Iteration.bsk_sandwich,
    "ppg-improvement": _Iteration.ppg_improvement,
    "ppg-termination": _Iteration.ppg_termination,
    "pg-identity": _Iteration.pg_identity,
    "pg-lower": _Iteration.pg_lower,
    "pg-upper": _Iteration.pg_upper,
    "npg-identity-1": _Iteration.npg_identity_1,
    "npg-identity-2": _Iteration.npg_identity_2,
    "npg-bound-1": _Iteration.npg_bound_1,
    "npg-bound-2": _Iteration.npg_bound_2,
    "entropy-pg-lower": _Iteration.entropy_pg_lower,
    "entropy-pg-linear": _Iteration.entropy_pg_linear,
    "entropy-npg-identity-1": _Iteration.entropy_npg_identity_1,
    "entropy-npg-identity-2": _Iteration.entropy_npg_identity_2,
    "entropy-npg-sandwich": _Iteration.entropy_npg_sandwich,
    "entropy-kl-gap": _Iteration.entropy_kl_gap,
    "softpi-quadratic": _Iteration.softpi_quadratic,
}


def record_iteration(
    mdp: TabularMdp,
    summary: OptimalitySummary,
    prev_state: MethodState,
    next_state: MethodState | None,
    rho: StateDistribution,
    checks: Sequence[str] = (),
    *,
    mu: StateDistribution | None = None,
) -> IterationRecord:
    """Measure iterate k and the step to k+1 (pass ``None`` for the last iterate).

    Step checks that do not apply to the method are stored as ``None``;
    trace checks in ``checks`` are ignored here.

    Raises:
        ValueError: If the summary, states or check names are inconsistent.
    """
    if summary.tau != prev_state.tau:
        raise ValueError(
            f"optimality summary has tau={summary.tau!r} but the run uses tau={prev_state.tau!r}"
        )
    if next_state is not None and (
        next_state.iteration != prev_state.iteration + 1 or next_state.method != prev_state.method
    ):
        raise ValueError("next_state must be the successor of prev_state under the same method")
    for name in checks:
        if name not in CHECKS:
            raise ValueError(f"Unknown check {name!r}")

    mu = mu if mu is not None else StateDistribution.uniform(mdp.n_states)
    it = _Iteration(mdp, summary, prev_state, next_state, rho, mu)

    residuals: dict[str, float | None] = {}
    for name in checks:
        spec = CHECKS[name]
        if spec.scope != "step":
            continue
        if prev_state.method not in spec.methods or (spec.needs_next and not it.has_next):
            residuals[name] = None
            continue
        residuals[name] = _STEP_CHECKS[name](it)

    rate_factors: dict[str, float] = {}
    if prev_state.method == "npg" and it.has_next and it.eta is not None:
        rate_factors["npg-rate"] = it.npg_rate_factor()

    if prev_state.tau is None:
        b_max: float | None = float(it.b.max())
        kappa_term = float((1.0 - it.b).min())
        kl_to_opt = None
    else:
        b_max = None
        kappa_term = float(prev_state.policy.probs.min())
        kl_to_opt = it.d_k.expect(it.kl_prev_opt)

    record = IterationRecord(
        k=prev_state.iteration,
        eta_k=it.eta if it.has_next else None,
        v_gap_inf=it.gap_inf,
        v_gap_rho=it.gap_rho,
        l_k_kp1=it.l_k_kp1 if it.has_next else None,
        b_max=b_max,
        kl_to_opt=kl_to_opt,
        kappa_term=kappa_term,
        residuals=residuals,
        rate_factors=rate_factors,
    )
    logger.debug(
        f"k={record.k} gap_inf={record.v_gap_inf:.6e} gap_rho={record.v_gap_rho:.6e}"
    )
    return record


@dataclass(frozen=True)
class CheckReport:
    """Per-iteration slacks of one check with a pass/fail verdict."""

    name: str
    ks: tuple[int, ...]
    slacks: tuple[float | None, ...]
    tolerance: float = SLACK_TOLERANCE
    skipped: str | None = None

    @classmethod
    def from_slacks(
        cls,
        name: str,
        ks: Sequence[int],
        slacks: Sequence[float | None],
        tolerance: float = SLACK_TOLERANCE,
    ) -> CheckReport:
        return cls(name, tuple(ks), tuple(slacks), tolerance)

    def _active(self) -> list[tuple[int, float]]:
        return [(k, s) for k, s in zip(self.ks, self.slacks, strict=True) if s is not None]

    @property
    def min_slack(self) -> float | None:
        active = self._active()
        if not active:
            return None
        return min((s for _, s in active), key=lambda s: -np.inf if np.isnan(s) else s)

    @property
    def argmin(self) -> int | None:
        active = self._active()
        if not active:
            return None
        return min(active, key=lambda item: -np.inf if np.isnan(item[1]) else item[1])[0]

    @property
    def first_violation(self) -> int | None:
        for k, s in self._active():
            if not s >= -self.tolerance:
                return k
        return None

    @property
    def passed(self) -> bool:
        return self.skipped is not None or self.first_violation is None

    def format_line(self) -> str:
        if self.skipped is not None:
            return f"{self.name}: skipped: {self.skipped}"
        if self.min_slack is None:
            return f"{self.name}: no active iterations"
        verdict = "PASS" if self.passed else "FAIL"
        line = (
            f"{self.name}: min slack {self.min_slack:.3e} at k={self.argmin} "
            f"(tolerance {self.tolerance:g}) {verdict}"
        )
        if not self.passed:
            line += f", first violation at k={self.first_violation}"
        return line


_TraceCheck = Callable[[Trace, TraceContext], list[float | None] | None]


def _product_bound(
    trace: Trace, start: float, factors: Sequence[float | None], column: str
) -> list[float | None] | None:
    bound = start
    slacks: list[float | None] = []
    for i, record in enumerate(trace.records):
        slacks.append(bound - getattr(record, column))
        if i < len(factors):
            factor = factors[i]
            if factor is None:
                return None
            bound *= factor
    return slacks


def _npg_rate(trace: Trace, context: TraceContext) -> list[float | None] | None:
    factors = [r.rate_factors.get("npg-rate") for r in trace.records[:-1]]
    return _product_bound(trace, trace.records[0].v_gap_inf, factors, "v_gap_inf")


def _npg_sublinear(trace: Trace, context: TraceContext) -> list[float | None] | None:
    if context.npg_initial_kl is None:
        return None
    g = context.gamma
    constant = 1.0 / (1.0 - g) ** 2 + context.npg_initial_kl / (context.schedule.eta * (1.0 - g))
    return [None if r.k == 0 else constant / r.k - r.v_gap_rho for r in trace.records]


def _pg_sublinear(trace: Trace, context: TraceContext) -> list[float | None] | None:
    kappa = trace.kappa_estimate
    if kappa is None or kappa <= 0 or context.rho_min <= 0:
        return None
    g = context.gamma
    constant = (
        1.0
        / (context.rho_min * (1.0 - g) ** 3)
        * (context.n_actions / kappa**2)
        * context.max_optimal_set**2
        * (1.0 + (1.0 - g) / (context.schedule.eta * context.mu_min))
    )
    return [constant - r.k * r.v_gap_rho for r in trace.records]


def _pg_adaptive(trace: Trace, context: TraceContext) -> list[float | None] | None:
    c_adapt = context.schedule.c_adapt
    if c_adapt is None:
        return None
    g = context.gamma
    shrink = 1.0 - 1.0 / (c_adapt * context.mu_min + 1.0)
    scale = (1.0 - g) * context.rho_min / (context.n_actions * context.max_optimal_set)
    factors = [
        None if r.kappa_term is None else 1.0 - scale * r.kappa_term * shrink
        for r in trace.records[:-1]
    ]
    return _product_bound(trace, trace.records[0].v_gap_rho, factors, "v_gap_rho")


def _ppg_linear(trace: Trace, context: TraceContext) -> list[float | None] | None:
    delta = context.gap_delta
    if not np.isfinite(delta) or not np.isfinite(context.d_star_ratio):
        return [None] * len(trace.records)
    g, eta, mu_min = context.gamma, context.schedule.eta, context.mu_min
    c1 = (2 + 5 * context.n_actions) / (eta * mu_min)
    c2 = (context.rho_min * delta / 2.0) * (eta * mu_min * delta / (1.0 + eta * mu_min * delta))
    factor = 1.0 - (1.0 - g) / context.d_star_ratio * (1.0 - g) * c2 / ((1.0 - g) * c2 + c1)
    start = trace.records[0].v_gap_rho
    return [start * factor**r.k - r.v_gap_rho for r in trace.records]


def _ppg_increasing(trace: Trace, context: TraceContext) -> list[float | None] | None:
    c3 = context.schedule.c3
    if c3 is None or not np.isfinite(context.d_star_ratio):
        return None
    g = context.gamma
    factor = 1.0 - (1.0 - g) / context.d_star_ratio * (1.0 - g) / (1.0 - g + c3)
    return [factor**r.k / (1.0 - g) - r.v_gap_rho for r in trace.records]


def softpi_envelope(gap0: float, gamma: float, tau: float, k: int) -> float | None:
    """Doubly exponential soft PI bound on ||V* - V^k||_inf, or None before k0.

    With prefactor 2 tau (1 - gamma) / gamma^2 and a0 = gap0 / prefactor,
    k0 is 1 when a0 <= 1 and 2 + log(a0) / log(1 / gamma) otherwise.
    """
    if gamma <= 0:
        return None
    prefactor = 2.0 * tau * (1.0 - gamma) / gamma**2
    a0 = gap0 / prefactor
    k0 = 1.0 if a0 <= 1.0 else 2.0 + np.log(a0) / np.log(1.0 / gamma)
    if k < k0:
        return None
    exponent = k - k0
    if exponent > 60:
        return 0.0
    return float(prefactor * np.exp(2.0**exponent * np.log(gamma)))


def _softpi_envelope(trace: Trace, context: TraceContext) -> list[float | None] | None:
    if context.tau is None:
        return None
    gap0 = trace.records[0].v_gap_inf
    slacks: list[float | None] = []
    for record in trace.records:
        bound = softpi_envelope(gap0, context.gamma, context.tau, record.k)
        slacks.append(None if bound is None else bound - record.v_gap_inf)
    return slacks


def _entropy_npg_global(trace: Trace, context: TraceContext) -> list[float | None] | None:
    c1, tau = context.entropy_npg_c1, context.tau
    if c1 is None or tau is None:
        return None
    g, eta = context.gamma, context.schedule.eta
    constant = 2.0 * c1**2 / ((1.0 - g) * tau)
    factor = 1.0 - (1.0 - g) * eta * tau / (eta * tau + 1.0)
    return [
        None if r.k == 0 else constant * factor ** (2 * (r.k - 1)) - r.v_gap_inf
        for r in trace.records
    ]


_TRACE_CHECKS: dict[str, _TraceCheck] = {
    "npg-rate": _npg_rate,
    "npg-sublinear": _npg_sublinear,
    "pg-sublinear": _pg_sublinear,
    "pg-adaptive": _pg_adaptive,
    "ppg-linear": _ppg_linear,
    "ppg-increasing": _ppg_increasing,
    "softpi-envelope": _softpi_envelope,
    "entropy-npg-global": _entropy_npg_global,
}


def check_inequality(
    name: str, trace: Trace, tolerance: float = SLACK_TOLERANCE
) -> CheckReport:
    """Evaluate one named check over a trace.

    Step checks read the slacks stored on the records. Trace checks are
    recomputed from the records and context when possible and otherwise fall
    back to stored slacks (as in a trace read back from CSV).

    Raises:
        ValueError: On an unknown check name.
    """
    spec = CHECKS.get(name)
    if spec is None:
        raise ValueError(f"Unknown check {name!r}; expected one of {', '.join(CHECKS)}")
    ks = trace.ks()
    context = trace.context
    if context is not None and not spec.applies_to(context.method, context.schedule.kind):
        return CheckReport(name, ks, (), tolerance, "incompatible")

    computed: list[float | None] | None = None
    if spec.scope == "trace" and context is not None and trace.records:
        computed = _TRACE_CHECKS[name](trace, context)
    if computed is None:
        if not any(name in r.residuals for r in trace.records):
            return CheckReport(name, ks, (), tolerance, "not recorded")
        computed = [r.residuals.get(name) for r in trace.records]

    report = CheckReport.from_slacks(name, ks, computed, tolerance)
    if not report.passed:
        logger.warning(f"Check {name} violated at k={report.first_violation}")
    return report


@dataclass(frozen=True)
class KlRatioSample:
    """Largest deviation from 1 over states of each KL ratio at iteration k.

    ``step`` is KL(pi^k || pi^{k+1}) / KL(pi^{k+1} || pi^k) and ``step_inverse``
    its reciprocal; ``opt`` and ``opt_inverse`` are the same pair with pi*.
    """

    k: int
    step: float
    step_inverse: float
    opt: float
    opt_inverse: float

    @property
    def worst(self) -> float:
        return max(self.step, self.step_inverse, self.opt, self.opt_inverse)


def kl_ratio_probe(trace: Trace) -> list[KlRatioSample]:
    """Measure how far the four KL ratios of consecutive iterates are from 1.

    Iterations where any of the KLs is below ``KL_FLOOR`` at some state are
    skipped.

    Raises:
        ValueError: If the trace has no stored policies or optimal policy.
    """
    optimal = trace.optimal_policy
    if optimal is None or len(trace.policies) != len(trace.records) or not trace.policies:
        raise ValueError("kl_ratio_probe needs a trace with stored policies and pi*")

    samples: list[KlRatioSample] = []
    for k in range(len(trace.policies) - 1):
        current, following = trace.policies[k], trace.policies[k + 1]
        forward = policy_kl(current, following)
        backward = policy_kl(following, current)
        to_opt = policy_kl(current, optimal)
        from_opt = policy_kl(optimal, current)
        if min(forward.min(), backward.min(), to_opt.min(), from_opt.min()) < KL_FLOOR:
            continue
        samples.append(
            KlRatioSample(
                k=trace.records[k].k,
                step=float(np.max(np.abs(forward / backward - 1.0))),
                step_inverse=float(np.max(np.abs(backward / forward - 1.0))),
                opt=float(np.max(np.abs(to_opt / from_opt - 1.0))),
                opt_inverse=float(np.max(np.abs(from_opt / to_opt - 1.0))),
            )
        )
    return samples


def covariance_sides(probs: ArrayLike, f: ArrayLike, g: ArrayLike) -> tuple[float, float]:
    """Cov(f(X), g(X)) and 1/2 E[(f(X) - f(Y))(g(X) - g(Y))] for X, Y iid."""
    p = np.asarray(probs, dtype=np.float64)
    fv = np.asarray(f, dtype=np.float64)
    gv = np.asarray(g, dtype=np.float64)
    cov = float(p @ (fv * gv) - (p @ fv) * (p @ gv))
    pair = np.outer(p, p) * np.subtract.outer(fv, fv) * np.subtract.outer(gv, gv)
    return cov, 0.5 * float(pair.sum())


@dataclass(frozen=True)
class CovarianceReport:
    trials: int
    identity_residual: float
    monotone_min_cov: float
    tolerance: float = 1e-12

    @property
    def passed(self) -> bool:
        return (
            self.identity_residual <= self.tolerance
            and self.monotone_min_cov >= -self.tolerance
        )


def covariance_checks(seed: int, trials: int) -> CovarianceReport:
    """Random trials of the covariance pair identity and monotone positivity.

    Each trial draws a finite-support distribution; the identity is tested
    with arbitrary f, g and positivity with non-decreasing piecewise-linear
    f, g evaluated on sorted support points.
    """
    if trials < 1:
        raise ValueError(f"covariance_checks needs trials >= 1, got {trials}")
    rng = np.random.Generator(np.random.PCG64(seed))
    worst_residual = 0.0
    min_cov = np.inf
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        probs = rng.dirichlet(np.ones(n))
        cov, half = covariance_sides(probs, rng.random(n), rng.random(n))
        worst_residual = max(worst_residual, abs(cov - half))

        points = np.sort(rng.random(n))
        knots = np.sort(rng.random(int(rng.integers(2, 6))))
        f = np.interp(points, knots, np.cumsum(rng.random(knots.size)))
        g = np.interp(points, knots, np.cumsum(rng.random(knots.size)))
        cov, _ = covariance_sides(probs, f, g)
        min_cov = min(min_cov, cov)

    report = CovarianceReport(trials, worst_residual, float(min_cov))
    logger.debug(
        f"Covariance checks over {trials} trials: residual {worst_residual:.3e}, "
        f"min monotone covariance {min_cov:.3e}"
    )
    return report
