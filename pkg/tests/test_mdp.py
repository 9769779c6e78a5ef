"""Tests for MDP types, validation, generators and simplex projection."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from pglab.mdp import (
    MdpValidationError,
    Policy,
    StateDistribution,
    TabularMdp,
    greedy_policy,
    mdp_fingerprint,
    project_simplex,
    project_simplex_rows,
    random_mdp,
    two_arm_bandit,
    uniform_policy,
    validate_mdp,
)


def _simplex_grid(n: int, steps: int) -> np.ndarray:
    """All points of the n-simplex with coordinates in multiples of 1 / steps."""
    points = [
        np.array(c, dtype=np.float64) / steps
        for c in itertools.product(range(steps + 1), repeat=n)
        if sum(c) == steps
    ]
    return np.array(points)


class TestValidateMdp:
    """Tests for MDP validation."""

    def test_random_mdp_is_valid(self) -> None:
        """Generated MDPs satisfy every invariant."""
        validate_mdp(random_mdp(7, 6, 3, 0.9))

    def test_bandit_is_valid(self) -> None:
        """The two-armed bandit is a valid MDP."""
        mdp = two_arm_bandit()
        validate_mdp(mdp)
        np.testing.assert_array_equal(mdp.reward, [[1.0, 0.0]])
        assert mdp.gamma == 0.0

    def test_row_sum_violation_names_first_row(self) -> None:
        """A transition row that does not sum to 1 is reported by index."""
        transition = np.full((2, 2, 2), 0.5)
        transition[1, 0] = [0.7, 0.7]
        mdp = TabularMdp(transition, np.zeros((2, 2)), 0.5)

        with pytest.raises(MdpValidationError) as excinfo:
            validate_mdp(mdp)

        assert excinfo.value.field_name == "transition"
        assert excinfo.value.index == (1, 0)

    def test_negative_probability(self) -> None:
        """Negative transition entries are reported with their full index."""
        transition = np.full((1, 2, 2), 0.5)
        transition[0, 1] = [1.5, -0.5]
        mdp = TabularMdp(transition, np.zeros((1, 2)), 0.5)

        with pytest.raises(MdpValidationError) as excinfo:
            validate_mdp(mdp)

        assert excinfo.value.index == (0, 1, 1)

    def test_reward_out_of_range(self) -> None:
        """Rewards must lie in [0, 1]."""
        mdp = TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 1.5]]), 0.5)

        with pytest.raises(MdpValidationError) as excinfo:
            validate_mdp(mdp)

        assert excinfo.value.field_name == "reward"
        assert excinfo.value.index == (0, 1)

    def test_gamma_one_rejected(self) -> None:
        """Undiscounted problems are not supported."""
        with pytest.raises(MdpValidationError) as excinfo:
            validate_mdp(TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0))

        assert excinfo.value.field_name == "gamma"

    def test_shape_mismatch(self) -> None:
        """Construction rejects inconsistent shapes."""
        with pytest.raises(ValueError):
            TabularMdp(np.ones((2, 2, 3)), np.zeros((2, 2)), 0.5)


class TestRandomMdp:
    """Tests for the seeded random generator."""

    def test_same_seed_same_mdp(self) -> None:
        """The same seed reproduces the same tensors bit for bit."""
        first = random_mdp(11, 5, 4, 0.9)
        second = random_mdp(11, 5, 4, 0.9)

        np.testing.assert_array_equal(first.transition, second.transition)
        np.testing.assert_array_equal(first.reward, second.reward)
        assert mdp_fingerprint(first) == mdp_fingerprint(second)

    def test_different_seeds_differ(self) -> None:
        """Different seeds give different problems."""
        assert mdp_fingerprint(random_mdp(1, 4, 3, 0.9)) != mdp_fingerprint(
            random_mdp(2, 4, 3, 0.9)
        )

    def test_rows_are_stochastic(self) -> None:
        """Transition rows sum to one and rewards stay in [0, 1)."""
        mdp = random_mdp(3, 8, 5, 0.99)

        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
        assert mdp.reward.min() >= 0.0
        assert mdp.reward.max() < 1.0

    @pytest.mark.parametrize(
        ("n_states", "n_actions", "gamma"), [(0, 2, 0.5), (3, 1, 0.5), (3, 2, 1.0)]
    )
    def test_invalid_arguments(self, n_states: int, n_actions: int, gamma: float) -> None:
        """Degenerate sizes and gamma = 1 are rejected."""
        with pytest.raises(ValueError):
            random_mdp(0, n_states, n_actions, gamma)

    def test_arrays_are_read_only(self) -> None:
        """MDP tensors cannot be modified in place."""
        mdp = random_mdp(0, 2, 2, 0.5)

        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 0.3


class TestStateDistribution:
    """Tests for StateDistribution."""

    def test_uniform(self) -> None:
        dist = StateDistribution.uniform(4)

        assert len(dist) == 4
        assert dist.min_weight == pytest.approx(0.25)

    def test_point_mass(self) -> None:
        """A point mass has zero minimum weight."""
        dist = StateDistribution.point(3, 1)

        assert dist.expect([1.0, 2.0, 3.0]) == 2.0
        assert dist.min_weight == 0.0

    @pytest.mark.parametrize("weights", [[0.5, 0.6], [1.5, -0.5], [np.nan, 1.0]])
    def test_invalid_weights(self, weights: list[float]) -> None:
        """Weights must be a probability vector."""
        with pytest.raises(ValueError):
            StateDistribution(np.array(weights))


class TestPolicy:
    """Tests for Policy construction."""

    def test_from_probs_normalizes(self) -> None:
        """Rows are renormalized."""
        policy = Policy.from_probs([[1.0, 3.0]])

        np.testing.assert_allclose(policy.probs, [[0.25, 0.75]])
        assert policy.is_strictly_positive

    def test_zero_entry_sentinel(self) -> None:
        """Zero probabilities carry -inf logs and fail the positivity requirement."""
        policy = Policy.from_probs([[1.0, 0.0]])

        assert policy.log_probs[0, 1] == -np.inf
        assert not policy.is_strictly_positive
        with pytest.raises(ValueError, match="strictly positive"):
            policy.require_positive("npg")

    def test_from_logits_is_shift_invariant(self) -> None:
        """Adding a constant to a row of logits leaves the policy unchanged."""
        logits = np.array([[0.5, -1.0, 2.0]])

        shifted = Policy.from_logits(logits + 1024.0)
        base = Policy.from_logits(logits)

        np.testing.assert_array_equal(shifted.probs, base.probs)

    def test_from_logits_keeps_tiny_probabilities_positive(self) -> None:
        """Underflowing probabilities keep finite log-probabilities."""
        policy = Policy.from_logits([[0.0, -2000.0]])

        assert policy.probs[0, 1] == 0.0
        assert policy.log_probs[0, 1] == pytest.approx(-2000.0)
        assert policy.is_strictly_positive

    def test_from_logits_rejects_nan(self) -> None:
        with pytest.raises(ValueError):
            Policy.from_logits([[np.nan, 0.0]])

    def test_empty_row_rejected(self) -> None:
        with pytest.raises(ValueError, match="no mass"):
            Policy.from_probs([[0.0, 0.0]])

    def test_uniform_policy(self) -> None:
        policy = uniform_policy(random_mdp(0, 3, 4, 0.5))

        np.testing.assert_allclose(policy.probs, 0.25)

    def test_greedy_policy_splits_ties(self) -> None:
        """Actions within the tie tolerance share the mass equally."""
        policy = greedy_policy([[1.0, 1.0 - 1e-12, 0.0]])

        np.testing.assert_allclose(policy.probs, [[0.5, 0.5, 0.0]])

    def test_greedy_bandit(self) -> None:
        """Greedy on the bandit rewards picks the paying arm."""
        policy = greedy_policy(two_arm_bandit().reward)

        np.testing.assert_array_equal(policy.probs, [[1.0, 0.0]])


class TestProjectSimplex:
    """Tests for the Euclidean simplex projection."""

    def test_bandit_ppg_example(self) -> None:
        """(1.5, 0.5) projects onto the vertex (1, 0)."""
        np.testing.assert_allclose(project_simplex([1.5, 0.5]), [1.0, 0.0])

    def test_point_on_simplex_is_fixed(self) -> None:
        point = np.array([0.2, 0.3, 0.5])

        np.testing.assert_allclose(project_simplex(point), point, atol=1e-15)

    def test_rows_projected_independently(self) -> None:
        rows = np.array([[1.5, 0.5], [0.0, 0.0]])

        np.testing.assert_allclose(project_simplex_rows(rows), [[1.0, 0.0], [0.5, 0.5]])

    def test_rejects_non_finite(self) -> None:
        with pytest.raises(ValueError):
            project_simplex([np.inf, 0.0])

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_matches_brute_force_on_grid(self, n: int) -> None:
        """No simplex grid point is closer than the projection, for all grid inputs."""
        values = (-1.0, -0.25, 0.0, 0.5, 1.0, 2.0)
        candidates = _simplex_grid(n, 12)
        for vector in itertools.product(values, repeat=n):
            x = np.array(vector)
            projected = project_simplex(x)

            assert projected.min() >= 0.0
            assert projected.sum() == pytest.approx(1.0, abs=1e-12)
            best = float(np.min(np.sum((candidates - x) ** 2, axis=1)))
            assert float(np.sum((projected - x) ** 2)) <= best + 1e-12
