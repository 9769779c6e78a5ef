"""Experiment configuration and YAML loading."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, cast

import yaml

from pglab.algorithms import ENTROPY_METHODS, METHODS, ScheduleKind, StepSchedule
from pglab.diagnostics import SLACK_TOLERANCE, resolve_checks
from pglab.evaluation import DEFAULT_TOL, MAX_VALUE_ITERATIONS
from pglab.mdp import TOL_GAP
from pglab.rates import DEFAULT_WINDOW_FRACTION, RATE_MODELS

DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

MdpSource = Literal["file", "random", "bandit"]


def default_tau(method: str) -> float | None:
    """Entropy weight used when a config names a method but no tau."""
    return 0.05 if method in ENTROPY_METHODS else None


@dataclass
class LoggingSettings:
    """Logging configuration."""

    level: str = "INFO"
    file: str | None = None
    format: str = DEFAULT_LOG_FORMAT


@dataclass
class MdpSettings:
    """Where the problem comes from."""

    source: MdpSource = "random"
    path: Path | None = None
    seed: int = 7
    n_states: int = 50
    n_actions: int = 20
    gamma: float = 0.99


@dataclass
class ScheduleSettings:
    """Step-size schedule configuration."""

    kind: str = "constant"
    eta: float = 10.0
    c3: float | None = None
    c_adapt: float | None = None

    def to_schedule(self) -> StepSchedule:
        """Build the schedule (raises ValueError on invalid values)."""
        return StepSchedule(
            kind=cast(ScheduleKind, self.kind), eta=self.eta, c3=self.c3, c_adapt=self.c_adapt
        )


@dataclass
class SolverSettings:
    """Exact solver and check tolerances."""

    tol: float = DEFAULT_TOL
    tol_gap: float = TOL_GAP
    slack_tolerance: float = SLACK_TOLERANCE
    max_value_iterations: int = MAX_VALUE_ITERATIONS


@dataclass
class RateSettings:
    """Defaults for rate fits."""

    model: str = "linear"
    window_fraction: float = DEFAULT_WINDOW_FRACTION
    column: str = "v_gap_rho"


@dataclass
class OutputSettings:
    """Output locations."""

    trace: Path | None = None
    plot: Path | None = None
    store_policies: bool = False


@dataclass
class ExperimentConfig:
    """Main settings container for one experiment run."""

    mdp: MdpSettings = field(default_factory=MdpSettings)
    method: str = "entropy-npg"
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    tau: float | None = 0.05
    mu: list[float] | None = None
    rho: list[float] | None = None
    max_iters: int = 1000
    stop_gap: float = 0.0
    checks: list[str] = field(default_factory=lambda: ["all"])
    rate: RateSettings = field(default_factory=RateSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    logging: LoggingSettings = field(default_factory=LoggingSettings)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        """Load a configuration from a YAML file.

        Args:
            path: Path to the configuration YAML file.

        Returns:
            ExperimentConfig populated from the file; missing keys keep their
            defaults.

        Raises:
            FileNotFoundError: If the file doesn't exist.
            yaml.YAMLError: If the file contains invalid YAML.
            ValueError: If the document is not a mapping.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")

        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"Config file {path} must hold a mapping")

        return cls._from_dict(data)

    @classmethod
    def _from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        """Create an ExperimentConfig from a dictionary."""
        mdp_data = data.get("mdp") or {}
        mdp_path = mdp_data.get("path")
        mdp_settings = MdpSettings(
            source=mdp_data.get("source", "file" if mdp_path else "random"),
            path=Path(mdp_path) if mdp_path else None,
            seed=int(mdp_data.get("seed", 7)),
            n_states=int(mdp_data.get("n_states", 50)),
            n_actions=int(mdp_data.get("n_actions", 20)),
            gamma=float(mdp_data.get("gamma", 0.99)),
        )

        schedule_data = data.get("schedule") or {}
        schedule_settings = ScheduleSettings(
            kind=schedule_data.get("kind", "constant"),
            eta=float(schedule_data.get("eta", 10.0)),
            c3=schedule_data.get("c3"),
            c_adapt=schedule_data.get("c_adapt"),
        )

        rate_data = data.get("rate") or {}
        rate_settings = RateSettings(
            model=rate_data.get("model", "linear"),
            window_fraction=float(rate_data.get("window_fraction", DEFAULT_WINDOW_FRACTION)),
            column=rate_data.get("column", "v_gap_rho"),
        )

        solver_data = data.get("solver") or {}
        solver_settings = SolverSettings(
            tol=float(solver_data.get("tol", DEFAULT_TOL)),
            tol_gap=float(solver_data.get("tol_gap", TOL_GAP)),
            slack_tolerance=float(solver_data.get("slack_tolerance", SLACK_TOLERANCE)),
            max_value_iterations=int(
                solver_data.get("max_value_iterations", MAX_VALUE_ITERATIONS)
            ),
        )

        output_data = data.get("output") or {}
        output_settings = OutputSettings(
            trace=Path(output_data["trace"]) if output_data.get("trace") else None,
            plot=Path(output_data["plot"]) if output_data.get("plot") else None,
            store_policies=bool(output_data.get("store_policies", False)),
        )

        logging_data = data.get("logging") or {}
        logging_settings = LoggingSettings(
            level=logging_data.get("level", "INFO"),
            file=logging_data.get("file"),
            format=logging_data.get("format", DEFAULT_LOG_FORMAT),
        )

        checks = data.get("checks", ["all"])
        if isinstance(checks, str):
            checks = [checks]

        method = data.get("method", "entropy-npg")
        return cls(
            mdp=mdp_settings,
            method=method,
            schedule=schedule_settings,
            tau=data.get("tau", default_tau(method)),
            mu=data.get("mu"),
            rho=data.get("rho"),
            max_iters=int(data.get("max_iters", 1000)),
            stop_gap=float(data.get("stop_gap", 0.0)),
            checks=list(checks),
            rate=rate_settings,
            solver=solver_settings,
            output=output_settings,
            logging=logging_settings,
        )

    @classmethod
    def default(cls) -> ExperimentConfig:
        """Create an ExperimentConfig with default values."""
        return cls()

    def validate(self) -> None:
        """Check cross-field consistency.

        Raises:
            ValueError: On the first inconsistency found.
        """
        if self.method not in METHODS:
            raise ValueError(
                f"Unknown method {self.method!r}; expected one of {', '.join(METHODS)}"
            )
        if self.method in ENTROPY_METHODS:
            if self.tau is None or not self.tau > 0:
                raise ValueError(f"method {self.method!r} needs tau > 0, got {self.tau!r}")
        elif self.tau is not None:
            raise ValueError(f"method {self.method!r} is unregularized; remove tau={self.tau!r}")

        schedule = self.schedule.to_schedule()
        if schedule.kind == "ppg_increasing" and self.method != "ppg":
            raise ValueError("the ppg_increasing schedule only applies to ppg")
        if schedule.kind == "pg_adaptive" and self.method != "softmax-pg":
            raise ValueError("the pg_adaptive schedule only applies to softmax-pg")

        if self.max_iters < 1:
            raise ValueError(f"max_iters must be at least 1, got {self.max_iters}")
        if not self.stop_gap >= 0:
            raise ValueError(f"stop_gap must be nonnegative, got {self.stop_gap!r}")
        resolve_checks(self.checks, self.method, schedule.kind)

        source = self.mdp.source
        if source not in ("file", "random", "bandit"):
            raise ValueError(f"Unknown MDP source {source!r}")
        if source == "file" and self.mdp.path is None:
            raise ValueError("mdp.source 'file' needs mdp.path")
        if source == "random":
            if not 0.0 <= self.mdp.gamma < 1.0:
                raise ValueError(f"gamma must lie in [0, 1), got {self.mdp.gamma!r}")
            if self.mdp.n_states < 1 or self.mdp.n_actions < 2:
                raise ValueError("random MDPs need at least one state and two actions")

        if self.rate.model not in RATE_MODELS:
            raise ValueError(f"Unknown rate model {self.rate.model!r}")
        if not 0.0 < self.rate.window_fraction <= 1.0:
            raise ValueError(
                f"rate.window_fraction must lie in (0, 1], got {self.rate.window_fraction!r}"
            )
        if self.rate.column not in ("v_gap_rho", "v_gap_inf"):
            raise ValueError(f"Unknown rate column {self.rate.column!r}")
        if self.solver.tol <= 0 or self.solver.slack_tolerance < 0:
            raise ValueError("solver tolerances must be positive")
