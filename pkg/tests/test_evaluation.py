"""Tests for exact policy evaluation, Bellman operators and optimal values."""

from __future__ import annotations

import math

import numpy as np
import pytest

import pglab.evaluation as evaluation_module
from pglab.evaluation import (
    ConvergenceError,
    ValueTable,
    advantage,
    bellman_apply,
    bellman_optimal,
    d_star_ratio,
    nonoptimal_mass,
    optimal_values,
    policy_eval,
    q_from_v,
    soft_bellman_apply,
    soft_bellman_optimal,
    soft_greedy,
    soft_optimal,
    soft_policy_eval,
    visitation,
)
from pglab.mdp import (
    Policy,
    StateDistribution,
    TabularMdp,
    random_mdp,
    two_arm_bandit,
    uniform_policy,
)


@pytest.fixture
def mdp() -> TabularMdp:
    """Small random MDP shared by the identity tests."""
    return random_mdp(7, 6, 3, 0.9)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for random policies."""
    return np.random.default_rng(2024)


def _random_policy(rng: np.random.Generator, mdp: TabularMdp) -> Policy:
    return Policy.from_probs(rng.random((mdp.n_states, mdp.n_actions)) + 1e-3)


class TestPolicyEvaluation:
    """Tests for exact and soft evaluation."""

    def test_bandit_uniform_value(self) -> None:
        bandit = two_arm_bandit()
        value = policy_eval(bandit, Policy.from_probs([[0.5, 0.5]]))

        assert value.values[0] == pytest.approx(0.5)
        assert not value.regularized

    def test_value_is_bellman_fixed_point(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        policy = _random_policy(rng, mdp)
        value = policy_eval(mdp, policy)

        residual = bellman_apply(mdp, policy, value).values - value.values
        assert np.max(np.abs(residual)) <= 1e-10

    def test_soft_value_is_soft_fixed_point(
        self, mdp: TabularMdp, rng: np.random.Generator
    ) -> None:
        policy = _random_policy(rng, mdp)
        value = soft_policy_eval(mdp, policy, 0.3)

        residual = soft_bellman_apply(mdp, policy, value, 0.3).values - value.values
        assert np.max(np.abs(residual)) <= 1e-10
        assert value.tau == 0.3

    def test_soft_eval_rejects_zero_probabilities(self) -> None:
        with pytest.raises(ValueError, match="strictly positive"):
            soft_policy_eval(two_arm_bandit(), Policy.from_probs([[1.0, 0.0]]), 1.0)

    def test_soft_eval_rejects_bad_tau(self) -> None:
        with pytest.raises(ValueError, match="tau > 0"):
            soft_policy_eval(two_arm_bandit(), Policy.from_probs([[0.5, 0.5]]), 0.0)

    def test_shape_mismatch(self, mdp: TabularMdp) -> None:
        with pytest.raises(ValueError, match="does not match MDP"):
            policy_eval(mdp, Policy.from_probs([[0.5, 0.5]]))


class TestAdvantage:
    """Tests for advantage tables and their tau flags."""

    def test_weighted_advantage_sums_to_zero(
        self, mdp: TabularMdp, rng: np.random.Generator
    ) -> None:
        """E_{a~pi}[A(s, a)] = 0 at every state."""
        policy = _random_policy(rng, mdp)
        value = policy_eval(mdp, policy)
        adv = advantage(mdp, policy, value, q_from_v(mdp, value))

        np.testing.assert_allclose(np.sum(policy.probs * adv.values, axis=1), 0.0, atol=1e-12)

    def test_soft_weighted_advantage_sums_to_zero(
        self, mdp: TabularMdp, rng: np.random.Generator
    ) -> None:
        policy = _random_policy(rng, mdp)
        value = soft_policy_eval(mdp, policy, 0.5)
        adv = advantage(mdp, policy, value, q_from_v(mdp, value), 0.5)

        np.testing.assert_allclose(np.sum(policy.probs * adv.values, axis=1), 0.0, atol=1e-12)

    def test_tau_mismatch(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        """Mixing soft and plain tables is rejected."""
        policy = _random_policy(rng, mdp)
        value = policy_eval(mdp, policy)

        with pytest.raises(ValueError, match="tau flag mismatch"):
            advantage(mdp, policy, value, q_from_v(mdp, value), 0.5)


class TestBellmanOperators:
    """Tests for operator contraction."""

    def test_optimal_operator_contracts(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        for _ in range(20):
            first = ValueTable(rng.normal(size=mdp.n_states) * 5.0)
            second = ValueTable(rng.normal(size=mdp.n_states) * 5.0)

            diff = bellman_optimal(mdp, first).values - bellman_optimal(mdp, second).values
            bound = mdp.gamma * np.max(np.abs(first.values - second.values))
            assert np.max(np.abs(diff)) <= bound + 1e-12

    def test_soft_optimal_operator_contracts(
        self, mdp: TabularMdp, rng: np.random.Generator
    ) -> None:
        for _ in range(20):
            first = ValueTable(rng.normal(size=mdp.n_states) * 5.0, 0.2)
            second = ValueTable(rng.normal(size=mdp.n_states) * 5.0, 0.2)

            diff = soft_bellman_optimal(mdp, first, 0.2).values - soft_bellman_optimal(
                mdp, second, 0.2
            ).values
            assert np.max(np.abs(diff)) <= mdp.gamma * np.max(
                np.abs(first.values - second.values)
            ) + 1e-12

    def test_soft_greedy_uniform_for_equal_values(self) -> None:
        """With equal rewards the soft-greedy policy is uniform."""
        equal = TabularMdp(np.ones((1, 3, 1)), np.full((1, 3), 0.4), 0.5)

        policy = soft_greedy(equal, ValueTable(np.zeros(1), 1.0), 1.0)

        np.testing.assert_allclose(policy.probs, 1.0 / 3.0)


class TestOptimalValues:
    """Tests for the unregularized and soft optimal solvers."""

    def test_bandit_optimum(self) -> None:
        summary = optimal_values(two_arm_bandit())

        assert summary.v_star.values[0] == pytest.approx(1.0)
        assert summary.optimal_action_sets == ((0,),)
        assert summary.gap_delta == pytest.approx(1.0)
        np.testing.assert_array_equal(summary.optimal_policy.probs, [[1.0, 0.0]])

    def test_soft_bandit_optimum(self) -> None:
        """V_tau* = log(e + 1) and pi* = (e / (e + 1), 1 / (e + 1)) for tau = 1."""
        summary = soft_optimal(two_arm_bandit(), 1.0)

        assert summary.v_star.values[0] == pytest.approx(math.log(math.e + 1.0), abs=1e-12)
        np.testing.assert_allclose(
            summary.optimal_policy.probs, [[0.731058578630, 0.268941421370]], atol=1e-11
        )
        assert summary.tau == 1.0

    def test_optimal_values_are_fixed_point(self, mdp: TabularMdp) -> None:
        summary = optimal_values(mdp)

        residual = bellman_optimal(mdp, summary.v_star).values - summary.v_star.values
        assert np.max(np.abs(residual)) <= 1e-10
        assert summary.a_star.values.max() <= 1e-9
        assert summary.max_optimal_set_size >= 1

    def test_soft_optimal_is_fixed_point(self, mdp: TabularMdp) -> None:
        summary = soft_optimal(mdp, 0.1)

        residual = soft_bellman_optimal(mdp, summary.v_star, 0.1).values - summary.v_star.values
        assert np.max(np.abs(residual)) <= 1e-10

    def test_optimal_mask_matches_sets(self, mdp: TabularMdp) -> None:
        summary = optimal_values(mdp)

        for s, actions in enumerate(summary.optimal_action_sets):
            assert list(np.flatnonzero(summary.optimal_mask[s])) == list(actions)

    def test_all_actions_optimal_gives_infinite_gap(self) -> None:
        equal = TabularMdp(np.ones((1, 2, 1)), np.full((1, 2), 0.5), 0.5)

        assert optimal_values(equal).gap_delta == float("inf")

    def test_iteration_cap(self) -> None:
        with pytest.raises(ConvergenceError):
            optimal_values(random_mdp(0, 5, 3, 0.99), max_iterations=2)

    def test_non_positive_tol(self, mdp: TabularMdp) -> None:
        with pytest.raises(ValueError, match="tol must be positive"):
            optimal_values(mdp, tol=0.0)

    def test_soft_optimum_that_misses_fixed_point_raises(
        self, mdp: TabularMdp, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """A polish stuck on a non-greedy policy fails instead of returning."""
        monkeypatch.setattr(
            evaluation_module, "soft_greedy", lambda mdp, value, tau: uniform_policy(mdp)
        )

        with pytest.raises(ConvergenceError, match="soft optimality residual"):
            soft_optimal(mdp, 0.1)


class TestVisitation:
    """Tests for the discounted state visitation."""

    def test_is_distribution_with_floor(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        """d sums to one and dominates (1 - gamma) rho."""
        rho = StateDistribution(rng.dirichlet(np.ones(mdp.n_states)))
        d = visitation(mdp, _random_policy(rng, mdp), rho)

        assert d.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(d.weights >= (1.0 - mdp.gamma) * rho.weights - 1e-12)

    def test_bandit_visitation_is_rho(self) -> None:
        policy = Policy.from_probs([[0.3, 0.7]])
        d = visitation(two_arm_bandit(), policy, StateDistribution.uniform(1))

        np.testing.assert_allclose(d.weights, [1.0])

    def test_d_star_ratio_bounds(self, mdp: TabularMdp) -> None:
        """For uniform rho the ratio lies between 1 and |S|."""
        ratio = d_star_ratio(mdp, optimal_values(mdp), StateDistribution.uniform(mdp.n_states))

        assert 1.0 - 1e-12 <= ratio <= mdp.n_states + 1e-12

    def test_d_star_ratio_point_mass(self, mdp: TabularMdp) -> None:
        """A point mass misses states the optimal policy visits."""
        ratio = d_star_ratio(mdp, optimal_values(mdp), StateDistribution.point(mdp.n_states, 0))

        assert ratio == float("inf")


class TestPerformanceDifference:
    """Performance difference identities on random policy pairs."""

    def test_unregularized_identity(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        rho = StateDistribution.uniform(mdp.n_states)
        for _ in range(200):
            old, new = _random_policy(rng, mdp), _random_policy(rng, mdp)
            v_old = policy_eval(mdp, old)
            adv = advantage(mdp, old, v_old, q_from_v(mdp, v_old))
            d_new = visitation(mdp, new, rho)

            lhs = policy_eval(mdp, new).at(rho) - v_old.at(rho)
            rhs = d_new.expect(np.sum(new.probs * adv.values, axis=1)) / (1.0 - mdp.gamma)
            assert abs(lhs - rhs) <= 1e-9

    def test_soft_identity(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        """V_tau^new - V_tau^old = E_{d^new}[T_tau^new V^old - V^old] / (1 - gamma)."""
        rho = StateDistribution.uniform(mdp.n_states)
        tau = 0.2
        for _ in range(200):
            old, new = _random_policy(rng, mdp), _random_policy(rng, mdp)
            v_old = soft_policy_eval(mdp, old, tau)
            improvement = soft_bellman_apply(mdp, new, v_old, tau).values - v_old.values

            lhs = soft_policy_eval(mdp, new, tau).at(rho) - v_old.at(rho)
            rhs = visitation(mdp, new, rho).expect(improvement) / (1.0 - mdp.gamma)
            assert abs(lhs - rhs) <= 1e-9


class TestNonOptimalMass:
    """Tests for the non-optimal mass sandwich."""

    def test_sandwich_holds(self, mdp: TabularMdp, rng: np.random.Generator) -> None:
        summary = optimal_values(mdp)
        rho = StateDistribution.uniform(mdp.n_states)
        for _ in range(50):
            mass = nonoptimal_mass(mdp, _random_policy(rng, mdp), summary, rho)

            assert mass.lower <= mass.gap + 1e-10
            assert mass.gap <= mass.upper + 1e-10

    def test_bandit_sandwich_is_tight(self) -> None:
        bandit = two_arm_bandit()
        mass = nonoptimal_mass(
            bandit,
            Policy.from_probs([[0.75, 0.25]]),
            optimal_values(bandit),
            StateDistribution.uniform(1),
        )

        np.testing.assert_allclose(mass.b, [0.25])
        assert mass.lower == pytest.approx(0.25)
        assert mass.gap == pytest.approx(0.25)
        assert mass.upper == pytest.approx(0.25)

    def test_rejects_soft_summary(self) -> None:
        bandit = two_arm_bandit()

        with pytest.raises(ValueError, match="unregularized"):
            nonoptimal_mass(
                bandit,
                Policy.from_probs([[0.5, 0.5]]),
                soft_optimal(bandit, 1.0),
                StateDistribution.uniform(1),
            )
