"""CSV trace schema and the sidecar metadata written next to each trace."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import pandas as pd
import yaml

from pglab.algorithms import StepSchedule
from pglab.diagnostics import (
    CHECKS,
    CheckReport,
    IterationRecord,
    Trace,
    TraceContext,
)
from pglab.files import atomic_write_text

logger = logging.getLogger(__name__)

BASE_COLUMNS = (
    "k",
    "eta_k",
    "v_gap_inf",
    "v_gap_rho",
    "l_k_kp1",
    "b_max",
    "kappa_est",
    "kl_to_opt",
)
SLACK_PREFIX = "slack:"
META_SUFFIX = ".meta.yaml"


def meta_path(trace_path: Path) -> Path:
    """Sidecar path for a trace: ``<trace>.meta.yaml``."""
    return trace_path.with_name(trace_path.name + META_SUFFIX)


def _check_names(trace: Trace, reports: Sequence[CheckReport] | None) -> list[str]:
    if trace.context is not None and trace.context.checks:
        return list(trace.context.checks)
    if reports:
        return [r.name for r in reports]
    seen: dict[str, None] = {}
    for record in trace.records:
        seen.update(dict.fromkeys(record.residuals))
    return list(seen)


def trace_frame(trace: Trace, reports: Sequence[CheckReport] | None = None) -> pd.DataFrame:
    """Trace records as a frame in the fixed column order.

    Slack columns come from ``reports`` where given (so trace checks are
    included) and from the stored residuals otherwise. Skipped checks and
    inactive iterations are left empty.
    """
    by_name = {r.name: r for r in reports or ()}
    columns: dict[str, list[Any]] = {
        "k": [r.k for r in trace.records],
        "eta_k": [r.eta_k for r in trace.records],
        "v_gap_inf": [r.v_gap_inf for r in trace.records],
        "v_gap_rho": [r.v_gap_rho for r in trace.records],
        "l_k_kp1": [r.l_k_kp1 for r in trace.records],
        "b_max": [r.b_max for r in trace.records],
        "kappa_est": trace.kappa_series(),
        "kl_to_opt": [r.kl_to_opt for r in trace.records],
    }
    for name in _check_names(trace, reports):
        report = by_name.get(name)
        if report is None:
            values: list[float | None] = [r.residuals.get(name) for r in trace.records]
        elif report.skipped is not None or not report.slacks:
            values = [None] * len(trace.records)
        else:
            values = list(report.slacks)
        columns[SLACK_PREFIX + name] = values

    frame = pd.DataFrame(columns)
    frame["k"] = frame["k"].astype("int64")
    for name in frame.columns[1:]:
        frame[name] = pd.to_numeric(frame[name], errors="coerce").astype("float64")
    return frame


def write_trace(
    trace: Trace, path: Path, reports: Sequence[CheckReport] | None = None
) -> Path:
    """Write ``trace`` as CSV, plus its sidecar metadata when it has a context.

    Floats carry 17 significant digits so a read reproduces them exactly.
    Both files are replaced atomically.
    """
    frame = trace_frame(trace, reports)
    text = frame.to_csv(index=False, float_format="%.17g", na_rep="", lineterminator="\n")
    atomic_write_text(path, text)
    if trace.context is not None:
        write_meta(trace.context, meta_path(path))
    logger.info(f"Wrote trace with {len(trace)} records to {path}")
    return path


def _optional(value: Any) -> float | None:
    if value is None:
        return None
    number = float(value)
    return None if math.isnan(number) else number


def read_trace(path: Path) -> Trace:
    """Read a CSV trace, and its sidecar metadata if present.

    Raises:
        FileNotFoundError: If the trace does not exist.
        ValueError: If a required column is missing.
    """
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in BASE_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} is not a trace: missing columns {', '.join(missing)}")
    slack_columns = [c for c in frame.columns if c.startswith(SLACK_PREFIX)]
    unknown = [c for c in slack_columns if c[len(SLACK_PREFIX) :] not in CHECKS]
    if unknown:
        raise ValueError(f"{path} has slack columns for unknown checks: {', '.join(unknown)}")

    sidecar = meta_path(path)
    context = read_meta(sidecar) if sidecar.exists() else None
    trace = Trace(context=context)
    for row in frame.to_dict(orient="records"):
        residuals = {c[len(SLACK_PREFIX) :]: _optional(row[c]) for c in slack_columns}
        v_gap_inf = _optional(row["v_gap_inf"])
        v_gap_rho = _optional(row["v_gap_rho"])
        trace.append(
            IterationRecord(
                k=int(row["k"]),
                eta_k=_optional(row["eta_k"]),
                v_gap_inf=math.nan if v_gap_inf is None else v_gap_inf,
                v_gap_rho=math.nan if v_gap_rho is None else v_gap_rho,
                l_k_kp1=_optional(row["l_k_kp1"]),
                b_max=_optional(row["b_max"]),
                kl_to_opt=_optional(row["kl_to_opt"]),
                kappa_term=_optional(row["kappa_est"]),
                residuals=residuals,
            )
        )
    logger.debug(f"Read {len(trace)} records from {path}")
    return trace


def context_to_dict(context: TraceContext) -> dict[str, Any]:
    schedule = context.schedule
    return {
        "method": context.method,
        "schedule": {
            "kind": schedule.kind,
            "eta": schedule.eta,
            "c3": schedule.c3,
            "c_adapt": schedule.c_adapt,
        },
        "tau": context.tau,
        "gamma": context.gamma,
        "n_states": context.n_states,
        "n_actions": context.n_actions,
        "mu_min": context.mu_min,
        "rho_min": context.rho_min,
        "gap_delta": context.gap_delta,
        "max_optimal_set": context.max_optimal_set,
        "d_star_ratio": context.d_star_ratio,
        "fingerprint": context.fingerprint,
        "checks": list(context.checks),
        "npg_initial_kl": context.npg_initial_kl,
        "entropy_npg_c1": context.entropy_npg_c1,
    }


def context_from_dict(data: dict[str, Any]) -> TraceContext:
    schedule = data.get("schedule") or {}
    try:
        return TraceContext(
            method=data["method"],
            schedule=StepSchedule(
                kind=schedule.get("kind", "constant"),
                eta=float(schedule.get("eta", 1.0)),
                c3=schedule.get("c3"),
                c_adapt=schedule.get("c_adapt"),
            ),
            tau=data.get("tau"),
            gamma=float(data["gamma"]),
            n_states=int(data["n_states"]),
            n_actions=int(data["n_actions"]),
            mu_min=float(data["mu_min"]),
            rho_min=float(data["rho_min"]),
            gap_delta=float(data["gap_delta"]),
            max_optimal_set=int(data["max_optimal_set"]),
            d_star_ratio=float(data["d_star_ratio"]),
            fingerprint=str(data.get("fingerprint", "")),
            checks=tuple(data.get("checks") or ()),
            npg_initial_kl=data.get("npg_initial_kl"),
            entropy_npg_c1=data.get("entropy_npg_c1"),
        )
    except KeyError as e:
        raise ValueError(f"trace metadata is missing field {e.args[0]!r}") from e


def write_meta(context: TraceContext, path: Path) -> None:
    text = yaml.safe_dump(context_to_dict(context), sort_keys=False)
    atomic_write_text(path, text)


def read_meta(path: Path) -> TraceContext:
    """Load a sidecar metadata file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If required fields are missing.
    """
    if not path.exists():
        raise FileNotFoundError(f"Trace metadata not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path} does not hold a metadata mapping")
    return context_from_dict(data)
