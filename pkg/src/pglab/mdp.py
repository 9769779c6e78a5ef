"""Tabular MDP, state distribution and policy types, plus problem generators."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import log_softmax

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]

# Row sums and distribution totals must match 1 within this.
ROW_TOL = 1e-12
# Tie tolerance used when forming argmax sets.
TOL_GAP = 1e-9


class MdpValidationError(ValueError):
    """Raised when an MDP violates one of its invariants.

    Attributes:
        field_name: The offending field ("transition", "reward" or "gamma").
        index: Location of the first violation; empty for scalar fields.
    """

    def __init__(self, message: str, field_name: str, index: tuple[int, ...] = ()) -> None:
        super().__init__(message)
        self.field_name = field_name
        self.index = index


def _frozen(values: ArrayLike) -> FloatArray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with dense transition tensor and reward table.

    ``transition[s, a, t]`` is the probability of moving from ``s`` to ``t``
    under action ``a``; ``reward[s, a]`` is the expected one-step reward.
    Construction only checks shapes; use :func:`validate_mdp` for the
    probabilistic invariants.
    """

    transition: FloatArray
    reward: FloatArray
    gamma: float

    def __post_init__(self) -> None:
        transition = _frozen(self.transition)
        reward = _frozen(self.reward)
        if reward.ndim != 2:
            raise ValueError(f"reward must be a |S| x |A| table, got shape {reward.shape}")
        n_states, n_actions = reward.shape
        if transition.shape != (n_states, n_actions, n_states):
            raise ValueError(
                f"transition must have shape {(n_states, n_actions, n_states)}, "
                f"got {transition.shape}"
            )
        if n_states < 1 or n_actions < 1:
            raise ValueError("an MDP needs at least one state and one action")
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return int(self.reward.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.reward.shape[1])


@dataclass(frozen=True, eq=False)
class StateDistribution:
    """A probability vector over states (used for both mu and rho)."""

    weights: FloatArray

    def __post_init__(self) -> None:
        weights = _frozen(self.weights)
        if weights.ndim != 1 or weights.size == 0:
            raise ValueError(f"state distribution must be a non-empty vector, got {weights.shape}")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("state distribution has negative or non-finite weights")
        total = float(weights.sum())
        if abs(total - 1.0) > ROW_TOL:
            raise ValueError(f"state distribution sums to {total!r}, expected 1")
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return int(self.weights.size)

    @property
    def min_weight(self) -> float:
        """Smallest state weight (mu-tilde / rho-tilde)."""
        return float(self.weights.min())

    def expect(self, values: ArrayLike) -> float:
        """Expectation of a per-state quantity."""
        return float(self.weights @ np.asarray(values, dtype=np.float64))

    @classmethod
    def uniform(cls, n_states: int) -> StateDistribution:
        return cls(np.full(n_states, 1.0 / n_states))

    @classmethod
    def point(cls, n_states: int, state: int) -> StateDistribution:
        weights = np.zeros(n_states)
        weights[state] = 1.0
        return cls(weights)


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic policy table with its log-space companion.

    Zero probabilities are stored as ``-inf`` in ``log_probs``. Softmax-family
    methods work on ``log_probs`` directly, so a row whose probabilities
    underflow to zero stays usable as long as its logs are finite.
    """

    probs: FloatArray
    log_probs: FloatArray

    def __post_init__(self) -> None:
        probs = _frozen(self.probs)
        log_probs = _frozen(self.log_probs)
        if probs.ndim != 2 or probs.shape != log_probs.shape:
            raise ValueError(
                "policy tables must be matching 2-D arrays, "
                f"got {probs.shape} and {log_probs.shape}"
            )
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "log_probs", log_probs)

    @classmethod
    def from_probs(cls, probs: ArrayLike) -> Policy:
        """Build a policy from nonnegative rows, renormalizing each row."""
        table = np.array(probs, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError(f"policy must be a |S| x |A| table, got shape {table.shape}")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise ValueError("policy has negative or non-finite entries")
        sums = table.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            state = int(np.argmax(sums.ravel() <= 0))
            raise ValueError(f"policy row {state} has no mass")
        table = table / sums
        with np.errstate(divide="ignore"):
            log_table = np.log(table)
        return cls(table, log_table)

    @classmethod
    def from_logits(cls, logits: ArrayLike) -> Policy:
        """Build the row-wise softmax policy of ``logits``.

        Entries may be ``-inf`` (excluded actions) but every row needs at
        least one finite entry.
        """
        table = np.array(logits, dtype=np.float64)
        if table.ndim != 2:
            raise ValueError(f"logits must be a |S| x |A| table, got shape {table.shape}")
        if np.any(np.isnan(table)) or np.any(table == np.inf):
            raise ValueError("logits contain NaN or +inf")
        if not np.all(np.any(np.isfinite(table), axis=1)):
            raise ValueError("every logit row needs a finite entry")
        log_table = log_softmax(table, axis=1)
        return cls(np.exp(log_table), log_table)

    @property
    def n_states(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.probs.shape[1])

    @property
    def is_strictly_positive(self) -> bool:
        return bool(np.all(np.isfinite(self.log_probs)))

    def require_positive(self, operation: str) -> None:
        """Raise ValueError if any row carries the zero-probability sentinel."""
        if not self.is_strictly_positive:
            rows = np.flatnonzero(~np.all(np.isfinite(self.log_probs), axis=1))
            raise ValueError(
                f"{operation} requires a strictly positive policy; row {int(rows[0])} has zeros"
            )


@dataclass(frozen=True)
class EntropyConfig:
    """Entropy regularization weight tau (reward units)."""

    tau: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"entropy regularization needs tau > 0, got {self.tau!r}")


def validate_mdp(mdp: TabularMdp) -> None:
    """Check the probabilistic invariants of an MDP.

    Rows are scanned in (state, action) order and the first offending row is
    reported, then rewards, then the discount.

    Raises:
        MdpValidationError: Naming the first violated row or entry.
    """
    transition = mdp.transition
    negative = np.any((transition < 0) | ~np.isfinite(transition), axis=2)
    sums = transition.sum(axis=2)
    off = np.abs(sums - 1.0) > ROW_TOL
    bad_rows = np.argwhere(negative | off)
    if bad_rows.size:
        s, a = (int(i) for i in bad_rows[0])
        if negative[s, a]:
            t = int(np.argmax((transition[s, a] < 0) | ~np.isfinite(transition[s, a])))
            raise MdpValidationError(
                f"negative probability {transition[s, a, t]!r} at transition[{s}, {a}, {t}]",
                "transition",
                (s, a, t),
            )
        raise MdpValidationError(
            f"transition row ({s}, {a}) sums to {sums[s, a]!r}, expected 1",
            "transition",
            (s, a),
        )

    reward = mdp.reward
    bad_rewards = np.argwhere(~np.isfinite(reward) | (reward < 0) | (reward > 1))
    if bad_rewards.size:
        s, a = (int(i) for i in bad_rewards[0])
        raise MdpValidationError(
            f"reward {reward[s, a]!r} at ({s}, {a}) is outside [0, 1]", "reward", (s, a)
        )

    if not 0.0 <= mdp.gamma < 1.0:
        raise MdpValidationError(f"discount {mdp.gamma!r} is outside [0, 1)", "gamma")


def random_mdp(seed: int, n_states: int, n_actions: int, gamma: float) -> TabularMdp:
    """Generate a random MDP with uniform rewards and normalized uniform transitions.

    Uses numpy's PCG64 bit generator, so the same seed reproduces the same
    MDP bit for bit on every platform.
    """
    if n_states < 1:
        raise ValueError(f"n_states must be >= 1, got {n_states}")
    if n_actions < 2:
        raise ValueError(f"n_actions must be >= 2, got {n_actions}")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma!r}")

    rng = np.random.Generator(np.random.PCG64(seed))
    reward = rng.random((n_states, n_actions))
    raw = rng.random((n_states, n_actions, n_states))
    transition = raw / raw.sum(axis=2, keepdims=True)
    mdp = TabularMdp(transition, reward, gamma)
    logger.debug(f"Generated random MDP seed={seed} |S|={n_states} |A|={n_actions} gamma={gamma}")
    return mdp


def two_arm_bandit() -> TabularMdp:
    """One state, two actions paying 1 and 0, no discounting."""
    return TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 0.0)


def project_simplex_rows(values: ArrayLike) -> FloatArray:
    """Euclidean projection of every row onto the probability simplex.

    Sort-based threshold method: with ``u`` sorted in decreasing order and
    ``c = cumsum(u) - 1``, the threshold is ``c[r-1] / r`` for the largest
    ``r`` such that ``u[r-1] > c[r-1] / r``.
    """
    table = np.array(values, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {table.shape}")
    if not np.all(np.isfinite(table)):
        raise ValueError("cannot project non-finite values onto the simplex")
    n = table.shape[1]
    ordered = -np.sort(-table, axis=1)
    cssv = np.cumsum(ordered, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.count_nonzero(ordered - cssv / ind > 0, axis=1)
    theta = cssv[np.arange(table.shape[0]), rho - 1] / rho
    result: FloatArray = np.maximum(table - theta[:, None], 0.0)
    return result


def project_simplex(values: ArrayLike) -> FloatArray:
    """Euclidean projection of a vector onto the probability simplex."""
    vector = np.array(values, dtype=np.float64)
    if vector.ndim != 1:
        raise ValueError(f"expected a vector, got shape {vector.shape}")
    return project_simplex_rows(vector[None, :])[0]


def uniform_policy(mdp: TabularMdp) -> Policy:
    return Policy.from_probs(np.ones((mdp.n_states, mdp.n_actions)))


def greedy_policy(scores: ArrayLike, tol_gap: float = TOL_GAP) -> Policy:
    """Uniform mass over the actions within ``tol_gap`` of each row's maximum."""
    table = np.array(scores, dtype=np.float64)
    if table.ndim != 2 or not np.all(np.isfinite(table)):
        raise ValueError("greedy_policy needs a finite |S| x |A| score table")
    best = table.max(axis=1, keepdims=True)
    return Policy.from_probs((table >= best - tol_gap).astype(np.float64))


def mdp_fingerprint(mdp: TabularMdp) -> str:
    """Short content hash identifying an MDP."""
    digest = hashlib.sha256()
    digest.update(f"{mdp.n_states}:{mdp.n_actions}:{mdp.gamma!r}".encode())
    digest.update(np.ascontiguousarray(mdp.reward).tobytes())
    digest.update(np.ascontiguousarray(mdp.transition).tobytes())
    return digest.hexdigest()[:16]
