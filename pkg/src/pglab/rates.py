"""Empirical convergence-rate fits over a trace's gap column."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal, get_args

import numpy as np
from numpy.typing import ArrayLike

from pglab.diagnostics import Trace
from pglab.mdp import FloatArray

logger = logging.getLogger(__name__)

RateModel = Literal["linear", "sublinear", "quadratic"]
RATE_MODELS: tuple[str, ...] = get_args(RateModel)

# Gaps below this have converged past double precision.
GAP_FLOOR = 1e-14
DEFAULT_WINDOW_FRACTION = 0.25


@dataclass(frozen=True)
class RateFit:
    """Result of fitting one convergence model to a window of a gap series.

    ``value`` is the contraction rate for ``linear``, the constant c in
    gap ~ c / k for ``sublinear`` and the growth order of log(envelope / gap)
    for ``quadratic`` (2 for a quadratically convergent run).
    """

    model: str
    k_lo: int
    k_hi: int
    value: float
    residual: float
    truncated: bool = False
    note: str = ""

    def format_line(self) -> str:
        label = {"linear": "rate", "sublinear": "constant", "quadratic": "order"}[self.model]
        line = (
            f"{self.model}: {label} {self.value:.12g} over k={self.k_lo}..{self.k_hi} "
            f"(max relative residual {self.residual:.3g})"
        )
        if self.note:
            line += f"; {self.note}"
        return line


def _default_window(ks: Sequence[int], model: str, fraction: float) -> tuple[int, int]:
    if model != "linear":
        start = 1 if model == "sublinear" and len(ks) > 1 and ks[0] == 0 else 0
        return ks[start], ks[-1]
    count = max(2, math.ceil(len(ks) * fraction))
    return ks[max(0, len(ks) - count)], ks[-1]


def _max_relative(fitted: FloatArray, observed: FloatArray) -> float:
    return float(np.max(np.abs(fitted / observed - 1.0)))


def _fit_linear(ks: FloatArray, gaps: FloatArray) -> tuple[float, float]:
    design = np.column_stack([np.ones_like(ks), ks])
    (intercept, slope), *_ = np.linalg.lstsq(design, np.log(gaps), rcond=None)
    fitted = np.exp(intercept + slope * ks)
    return float(np.exp(slope)), _max_relative(fitted, gaps)


def _fit_sublinear(ks: FloatArray, gaps: FloatArray) -> tuple[float, float]:
    if np.any(ks <= 0):
        raise ValueError("the sublinear model needs k >= 1 throughout the window")
    constant = float(np.mean(ks * gaps))
    return constant, _max_relative(constant / ks, gaps)


def _fit_quadratic(
    ks: FloatArray, gaps: FloatArray, envelope: float
) -> tuple[float, float, FloatArray, FloatArray]:
    below = gaps < envelope
    ks, gaps = ks[below], gaps[below]
    if len(ks) < 2:
        raise ValueError(
            f"the quadratic model needs two gaps below the envelope prefactor {envelope:g}"
        )
    design = np.column_stack([np.ones_like(ks), ks])
    y = np.log(np.log(envelope / gaps))
    (intercept, slope), *_ = np.linalg.lstsq(design, y, rcond=None)
    fitted = envelope * np.exp(-np.exp(intercept + slope * ks))
    return float(np.exp(slope)), _max_relative(fitted, gaps), ks, gaps


def fit_series(
    ks: ArrayLike,
    gaps: ArrayLike,
    model: str,
    window: tuple[int, int] | None = None,
    *,
    envelope: float | None = None,
    window_fraction: float = DEFAULT_WINDOW_FRACTION,
) -> RateFit:
    """Fit ``model`` to the series ``gaps`` indexed by ``ks``.

    Args:
        ks: Strictly increasing iteration indices.
        gaps: Suboptimality gaps, one per index.
        model: One of ``linear``, ``sublinear`` or ``quadratic``.
        window: Inclusive ``(k_lo, k_hi)``; defaults to the trailing
            ``window_fraction`` of the series for ``linear`` and the whole
            series (from k=1 for ``sublinear``) otherwise.
        envelope: Prefactor E of the doubly exponential envelope; required
            for ``quadratic``.
        window_fraction: Share of the series used by the default linear window.

    Returns:
        The fit, with the window actually used.

    Raises:
        ValueError: If the model is unknown, the window lies outside the
            series, or fewer than two usable points remain.
    """
    if model not in RATE_MODELS:
        raise ValueError(f"unknown rate model {model!r}; expected one of {', '.join(RATE_MODELS)}")
    k_arr = np.asarray(ks, dtype=np.float64)
    g_arr = np.asarray(gaps, dtype=np.float64)
    if k_arr.shape != g_arr.shape or k_arr.ndim != 1:
        raise ValueError("ks and gaps must be 1-d arrays of equal length")
    if len(k_arr) < 2:
        raise ValueError("a rate fit needs at least two points")
    if not 0.0 < window_fraction <= 1.0:
        raise ValueError(f"window fraction must lie in (0, 1], got {window_fraction}")
    if model == "quadratic" and (envelope is None or not envelope > 0):
        raise ValueError("the quadratic model needs a positive envelope prefactor")

    int_ks = [int(k) for k in k_arr]
    k_lo, k_hi = window if window is not None else _default_window(int_ks, model, window_fraction)
    if k_lo >= k_hi or k_lo < int_ks[0] or k_hi > int_ks[-1]:
        raise ValueError(f"window [{k_lo}, {k_hi}] is not inside k={int_ks[0]}..{int_ks[-1]}")

    inside = (k_arr >= k_lo) & (k_arr <= k_hi)
    k_win, g_win = k_arr[inside], g_arr[inside]

    truncated = False
    note = ""
    converged = ~(g_win >= GAP_FLOOR)
    if np.any(converged):
        first = int(np.argmax(converged))
        truncated = True
        note = f"window truncated at k={int(k_win[first])} (gap below {GAP_FLOOR:g})"
        logger.warning(f"Rate fit {note}")
        k_win, g_win = k_win[:first], g_win[:first]
    if len(k_win) < 2:
        raise ValueError(f"fewer than two positive gaps in window [{k_lo}, {k_hi}]")

    if model == "linear":
        value, residual = _fit_linear(k_win, g_win)
        if not 0.0 < value < 1.0:
            note = "; ".join(filter(None, [note, "series is not contracting"]))
    elif model == "sublinear":
        value, residual = _fit_sublinear(k_win, g_win)
    else:
        assert envelope is not None
        value, residual, k_win, g_win = _fit_quadratic(k_win, g_win, envelope)

    fit = RateFit(
        model=model,
        k_lo=int(k_win[0]),
        k_hi=int(k_win[-1]),
        value=value,
        residual=residual,
        truncated=truncated,
        note=note,
    )
    logger.debug(f"Fitted {fit.format_line()}")
    return fit


def default_envelope(trace: Trace) -> float | None:
    """Prefactor 2 tau (1 - gamma) / gamma^2 of the soft policy iteration envelope."""
    context = trace.context
    if context is None or context.tau is None or context.gamma <= 0:
        return None
    return 2.0 * context.tau * (1.0 - context.gamma) / context.gamma**2


def estimate_rate(
    trace: Trace,
    model: str,
    window: tuple[int, int] | None = None,
    *,
    column: str = "v_gap_rho",
    envelope: float | None = None,
    window_fraction: float = DEFAULT_WINDOW_FRACTION,
) -> RateFit:
    """Fit ``model`` to one gap column of ``trace``.

    The quadratic model falls back to the soft policy iteration envelope of
    the trace's context when ``envelope`` is not given.
    """
    if column not in ("v_gap_rho", "v_gap_inf"):
        raise ValueError(f"rates are fitted to v_gap_rho or v_gap_inf, not {column!r}")
    if len(trace) == 0:
        raise ValueError("empty trace")
    if model == "quadratic" and envelope is None:
        envelope = default_envelope(trace)
    return fit_series(
        trace.ks(),
        trace.column(column),
        model,
        window,
        envelope=envelope,
        window_fraction=window_fraction,
    )
