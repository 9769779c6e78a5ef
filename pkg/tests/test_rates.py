"""Tests for empirical convergence-rate fits."""

from __future__ import annotations

import math

import numpy as np
import pytest

from pglab.algorithms import StepSchedule
from pglab.diagnostics import IterationRecord, Trace, TraceContext
from pglab.rates import default_envelope, estimate_rate, fit_series


def _trace(gaps: list[float], context: TraceContext | None = None) -> Trace:
    trace = Trace(context=context)
    for k, gap in enumerate(gaps):
        trace.append(IterationRecord(k, 1.0, gap, gap, None, None, None, None))
    return trace


@pytest.fixture
def soft_pi_context() -> TraceContext:
    """Context of a soft PI run with tau = 1 and gamma = 0.5."""
    return TraceContext(
        method="soft-pi",
        schedule=StepSchedule.constant(1.0),
        tau=1.0,
        gamma=0.5,
        n_states=1,
        n_actions=2,
        mu_min=1.0,
        rho_min=1.0,
        gap_delta=1.0,
        max_optimal_set=1,
        d_star_ratio=1.0,
    )


class TestLinearFit:
    """Tests for the geometric model."""

    def test_halving_series(self) -> None:
        fit = fit_series([0, 1, 2, 3], [1.0, 0.5, 0.25, 0.125], "linear", (0, 3))

        assert fit.value == pytest.approx(0.5, abs=1e-12)
        assert fit.residual <= 1e-12
        assert not fit.truncated
        assert fit.format_line().startswith("linear: rate 0.5 over k=0..3")

    def test_default_window_is_trailing_quarter(self) -> None:
        ks = list(range(8))
        fit = fit_series(ks, [0.5**k for k in ks], "linear")

        assert (fit.k_lo, fit.k_hi) == (6, 7)
        assert fit.value == pytest.approx(0.5)

    def test_window_fraction(self) -> None:
        ks = list(range(8))
        fit = fit_series(ks, [0.5**k for k in ks], "linear", window_fraction=1.0)

        assert (fit.k_lo, fit.k_hi) == (0, 7)

    def test_converged_tail_is_truncated(self) -> None:
        gaps = [0.5**k for k in range(8)] + [0.0, 0.0]
        fit = fit_series(list(range(10)), gaps, "linear", (0, 9))

        assert fit.truncated
        assert fit.k_hi == 7
        assert "window truncated at k=8" in fit.note
        assert fit.value == pytest.approx(0.5)

    def test_growing_series_is_flagged(self) -> None:
        fit = fit_series([0, 1, 2], [1.0, 2.0, 4.0], "linear", (0, 2))

        assert fit.value == pytest.approx(2.0)
        assert "not contracting" in fit.note


class TestOtherModels:
    """Tests for the sublinear and doubly exponential models."""

    def test_sublinear_constant(self) -> None:
        ks = np.arange(1, 101)
        fit = fit_series(ks, 1.0 / ks, "sublinear")

        assert fit.value == pytest.approx(1.0, abs=1e-12)
        assert fit.format_line().startswith("sublinear: constant 1 over k=1..100")

    def test_sublinear_default_window_skips_zero(self) -> None:
        ks = np.arange(0, 11)
        gaps = np.concatenate([[5.0], 2.0 / ks[1:]])

        fit = fit_series(ks, gaps, "sublinear")

        assert fit.k_lo == 1
        assert fit.value == pytest.approx(2.0)

    def test_sublinear_rejects_k_zero(self) -> None:
        with pytest.raises(ValueError, match="k >= 1"):
            fit_series([0, 1, 2], [1.0, 1.0, 0.5], "sublinear", (0, 2))

    def test_quadratic_order(self) -> None:
        ks = np.arange(0, 5)
        gaps = np.exp(-(2.0**ks))

        fit = fit_series(ks, gaps, "quadratic", envelope=1.0)

        assert fit.value == pytest.approx(2.0, abs=1e-9)
        assert fit.format_line().startswith("quadratic: order 2")

    def test_quadratic_needs_envelope(self) -> None:
        with pytest.raises(ValueError, match="envelope"):
            fit_series([0, 1, 2], [0.5, 0.1, 0.01], "quadratic")


class TestFitValidation:
    """Tests for argument validation."""

    def test_unknown_model(self) -> None:
        with pytest.raises(ValueError, match="unknown rate model"):
            fit_series([0, 1], [1.0, 0.5], "cubic")

    @pytest.mark.parametrize("window", [(2, 2), (3, 1), (-1, 2), (0, 10)])
    def test_bad_windows(self, window: tuple[int, int]) -> None:
        with pytest.raises(ValueError, match="window"):
            fit_series([0, 1, 2, 3], [1.0, 0.5, 0.25, 0.125], "linear", window)

    def test_too_few_points(self) -> None:
        with pytest.raises(ValueError, match="at least two points"):
            fit_series([0], [1.0], "linear")

    def test_all_converged(self) -> None:
        with pytest.raises(ValueError, match="fewer than two positive gaps"):
            fit_series([0, 1, 2], [1.0, 0.0, 0.0], "linear", (0, 2))

    def test_length_mismatch(self) -> None:
        with pytest.raises(ValueError, match="equal length"):
            fit_series([0, 1, 2], [1.0, 0.5], "linear")


class TestEstimateRate:
    """Tests for fits over traces."""

    def test_trace_column(self) -> None:
        trace = _trace([0.9**k for k in range(40)])

        fit = estimate_rate(trace, "linear", column="v_gap_inf")

        assert fit.value == pytest.approx(0.9)
        assert fit.k_hi == 39

    def test_quadratic_uses_context_envelope(self, soft_pi_context: TraceContext) -> None:
        """The envelope prefactor is 2 tau (1 - gamma) / gamma^2 = 4 here."""
        assert default_envelope(_trace([1.0], soft_pi_context)) == pytest.approx(4.0)
        trace = _trace([4.0 * math.exp(-(2.0**k)) for k in range(5)], soft_pi_context)

        fit = estimate_rate(trace, "quadratic")

        assert fit.value == pytest.approx(2.0, abs=1e-9)

    def test_unknown_column(self) -> None:
        with pytest.raises(ValueError, match="v_gap_rho or v_gap_inf"):
            estimate_rate(_trace([1.0, 0.5]), "linear", column="b_max")

    def test_empty_trace(self) -> None:
        with pytest.raises(ValueError, match="empty trace"):
            estimate_rate(Trace(), "linear")

    def test_no_envelope_without_context(self) -> None:
        assert default_envelope(_trace([1.0])) is None
