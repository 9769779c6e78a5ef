"""Convergence plots: gap curves on a log scale with theoretical envelopes, as SVG."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from pglab.diagnostics import Trace  # noqa: E402
from pglab.mdp import FloatArray  # noqa: E402

logger = logging.getLogger(__name__)

ENVELOPES = ("gamma", "gamma-squared", "entropy-npg")

_ENVELOPE_LABELS = {
    "gamma": r"$\gamma^k$",
    "gamma-squared": r"$\gamma^{2k}$",
    "entropy-npg": r"$(1/(\eta\tau+1)^2)^k$",
}

_AXIS_LABELS = {
    "v_gap_inf": r"$\|V^* - V^k\|_\infty$",
    "v_gap_rho": r"$V^*(\rho) - V^k(\rho)$",
}

# Fixed ids and no timestamp so identical inputs give identical files.
_SVG_RC = {
    "svg.hashsalt": "pglab",
    "svg.fonttype": "path",
    "figure.figsize": (7.0, 4.5),
}


def envelope_rate(name: str, trace: Trace) -> float:
    """Per-iteration factor of an envelope, from the trace's run constants.

    Raises:
        ValueError: On an unknown envelope or a trace without the constants it needs.
    """
    if name not in ENVELOPES:
        raise ValueError(f"Unknown envelope {name!r}; expected one of {', '.join(ENVELOPES)}")
    context = trace.context
    if context is None:
        raise ValueError(f"envelope {name!r} needs trace metadata (gamma, eta, tau)")
    if name == "gamma":
        return context.gamma
    if name == "gamma-squared":
        return context.gamma**2
    if context.tau is None:
        raise ValueError("the entropy-npg envelope needs an entropy-regularized trace")
    return float(1.0 / (context.schedule.eta * context.tau + 1.0) ** 2)


def _positive(values: FloatArray) -> FloatArray:
    return np.where(values > 0, values, np.nan)


def plot_traces(
    series: Sequence[tuple[str, Trace]],
    out_path: Path,
    envelopes: Sequence[str] = (),
    column: str = "v_gap_inf",
    title: str | None = None,
) -> list[str]:
    """Render gap curves and envelopes to a self-contained SVG.

    Envelopes take their constants from the first trace and start at its
    first gap.

    Args:
        series: ``(label, trace)`` pairs; labels must be distinct.
        out_path: Destination SVG file.
        envelopes: Names from :data:`ENVELOPES`.
        column: ``v_gap_inf`` or ``v_gap_rho``.
        title: Optional plot title.

    Returns:
        The legend labels, curves first, in drawing order.

    Raises:
        ValueError: If no trace is given, a trace is empty, or labels repeat.
    """
    if not series:
        raise ValueError("nothing to plot")
    labels = [label for label, _ in series]
    if len(set(labels)) != len(labels):
        raise ValueError(f"legend labels must be distinct, got {labels}")
    for label, trace in series:
        if len(trace) == 0:
            raise ValueError(f"empty trace: {label}")

    first = series[0][1]
    start = float(first.column(column)[0])
    horizon = max(trace.ks()[-1] for _, trace in series)
    rates = {name: envelope_rate(name, first) for name in envelopes}

    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots()
        try:
            for label, trace in series:
                ax.plot(trace.ks(), _positive(trace.column(column)), label=label, linewidth=1.5)
            ks = np.arange(horizon + 1, dtype=np.float64)
            for name, rate in rates.items():
                with np.errstate(under="ignore"):
                    curve = start * rate**ks
                label = _ENVELOPE_LABELS[name]
                ax.plot(ks, _positive(curve), linestyle="--", linewidth=1.0, label=label)
                labels.append(label)

            ax.set_yscale("log")
            ax.set_xlabel("iteration k")
            ax.set_ylabel(_AXIS_LABELS.get(column, column))
            if title:
                ax.set_title(title)
            ax.grid(True, which="major", alpha=0.3)
            ax.legend()
            fig.tight_layout()

            out_path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out_path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)

    logger.info(f"Wrote plot with {len(labels)} curves to {out_path}")
    return labels
