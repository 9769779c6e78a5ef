"""Run loop: drive a method to its stop condition, record checks, write the trace."""

from __future__ import annotations

import logging
import os
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import cast

import numpy as np

from pglab.algorithms import Method, MethodState, StepSchedule, initial_state, step
from pglab.config import ExperimentConfig
from pglab.diagnostics import (
    CheckReport,
    Trace,
    build_context,
    check_inequality,
    record_iteration,
    resolve_checks,
)
from pglab.evaluation import OptimalitySummary, optimal_values, soft_optimal
from pglab.mdp import (
    StateDistribution,
    TabularMdp,
    mdp_fingerprint,
    random_mdp,
    two_arm_bandit,
    uniform_policy,
)
from pglab.mdp_file import load_mdp
from pglab.trace_io import write_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_BLOW_UP = 3

THREADS_ENV = "PGLAB_THREADS"


class NumericBlowUpError(ArithmeticError):
    """An iterate stopped being finite."""

    def __init__(self, message: str, iteration: int) -> None:
        super().__init__(message)
        self.iteration = iteration


@dataclass
class RunResult:
    """Outcome of one run."""

    trace: Trace
    reports: list[CheckReport]
    exit_code: int
    stop_reason: str
    blow_up_at: int | None = None
    elapsed_ms: float = 0.0
    trace_path: Path | None = None

    @property
    def final_gap(self) -> float:
        return self.trace.records[-1].v_gap_inf

    @property
    def iterations(self) -> int:
        return self.trace.records[-1].k

    @property
    def min_slack(self) -> float | None:
        slacks = [r.min_slack for r in self.reports if r.skipped is None]
        active = [s for s in slacks if s is not None]
        return min(active) if active else None


@dataclass
class SweepEntry:
    eta: float
    result: RunResult = field(repr=False)

    def format_line(self) -> str:
        min_slack = self.result.min_slack
        slack = "n/a" if min_slack is None else f"{min_slack:.3e}"
        return (
            f"eta={self.eta:g}: final gap {self.result.final_gap:.6e} after "
            f"{self.result.iterations} iterations, min slack {slack}, "
            f"exit {self.result.exit_code}"
        )


def sweep_threads(n_jobs: int) -> int:
    """Worker count for a sweep, capped by ``PGLAB_THREADS`` when set.

    Raises:
        ValueError: If the variable is not a positive integer.
    """
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError as e:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return max(1, min(cap, n_jobs))


class ExperimentRunner:
    """Runs one configured experiment.

    Each runner owns its problem and iterates; sweeps build one runner per
    step size so runs never share mutable state.
    """

    def __init__(self, config: ExperimentConfig) -> None:
        config.validate()
        self.config = config

    def load_problem(self) -> TabularMdp:
        settings = self.config.mdp
        if settings.source == "bandit":
            return two_arm_bandit()
        if settings.source == "file":
            assert settings.path is not None
            return load_mdp(settings.path)
        return random_mdp(settings.seed, settings.n_states, settings.n_actions, settings.gamma)

    def distributions(self, mdp: TabularMdp) -> tuple[StateDistribution, StateDistribution]:
        """The (mu, rho) pair; a missing weight list means uniform.

        Raises:
            ValueError: If a weight list does not match the state count or
                is not a distribution.
        """

        def build(weights: list[float] | None, name: str) -> StateDistribution:
            if weights is None:
                return StateDistribution.uniform(mdp.n_states)
            if len(weights) != mdp.n_states:
                raise ValueError(
                    f"{name} has {len(weights)} weights for {mdp.n_states} states"
                )
            return StateDistribution(np.asarray(weights, dtype=np.float64))

        return build(self.config.mu, "mu"), build(self.config.rho, "rho")

    def solve(self, mdp: TabularMdp) -> OptimalitySummary:
        solver = self.config.solver
        if self.config.tau is None:
            return optimal_values(mdp, solver.tol, solver.tol_gap, solver.max_value_iterations)
        return soft_optimal(
            mdp, self.config.tau, solver.tol, solver.tol_gap, solver.max_value_iterations
        )

    def _advance(
        self,
        mdp: TabularMdp,
        state: MethodState,
        schedule: StepSchedule,
        mu: StateDistribution,
    ) -> MethodState:
        try:
            nxt = step(mdp, state, schedule, mu)
        except ArithmeticError as e:
            raise NumericBlowUpError(
                f"non-finite iterate after k={state.iteration}: {e}", state.iteration
            ) from e
        if not np.all(np.isfinite(nxt.values.values)):
            raise NumericBlowUpError(
                f"non-finite values at k={nxt.iteration}", state.iteration
            )
        return nxt

    def run(self, trace_path: Path | None = None) -> RunResult:
        """Iterate until the gap reaches ``stop_gap`` or ``max_iters`` steps were taken.

        A numeric blow-up ends the run without raising: the trace keeps the
        records up to the last finite iterate and the exit code is 3.
        Otherwise the exit code is 2 if any check was violated and 0 if not.
        """
        config = self.config
        started = time.perf_counter()

        mdp = self.load_problem()
        fingerprint = mdp_fingerprint(mdp)
        mu, rho = self.distributions(mdp)
        schedule = config.schedule.to_schedule()
        summary = self.solve(mdp)
        checks = resolve_checks(config.checks, config.method, schedule.kind)
        method = cast(Method, config.method)
        state = initial_state(mdp, uniform_policy(mdp), method, config.tau)
        context = build_context(
            mdp, summary, state, schedule, mu, rho, checks=checks, fingerprint=fingerprint
        )
        trace = Trace(context=context, optimal_policy=summary.optimal_policy)
        store = config.output.store_policies
        logger.info(
            f"Running {config.method} with {schedule.describe()} on MDP {fingerprint} "
            f"({mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma:g})"
        )

        blow_up_at: int | None = None
        while True:
            gap_inf = float(np.max(np.abs(summary.v_star.values - state.values.values)))
            if gap_inf <= config.stop_gap:
                stop_reason = f"gap {gap_inf:.3e} reached stop_gap"
                break
            if state.iteration >= config.max_iters:
                stop_reason = f"max_iters={config.max_iters} reached"
                break
            try:
                nxt = self._advance(mdp, state, schedule, mu)
            except NumericBlowUpError as e:
                blow_up_at = e.iteration
                stop_reason = str(e)
                logger.warning(f"Numeric blow-up: {e}")
                break
            if nxt.eta is None and schedule.kind == "pg_adaptive":
                stop_reason = f"no positive weighted advantage at k={state.iteration}"
                break
            trace.append(
                record_iteration(mdp, summary, state, nxt, rho, checks, mu=mu),
                state.policy if store else None,
            )
            state = nxt

        trace.append(
            record_iteration(mdp, summary, state, None, rho, checks, mu=mu),
            state.policy if store else None,
        )

        tolerance = config.solver.slack_tolerance
        reports = [check_inequality(name, trace, tolerance) for name in checks]
        if blow_up_at is not None:
            exit_code = EXIT_BLOW_UP
        elif any(not r.passed for r in reports):
            exit_code = EXIT_VIOLATION
        else:
            exit_code = EXIT_OK

        written = None
        target = trace_path if trace_path is not None else config.output.trace
        if target is not None:
            written = write_trace(trace, target, reports)

        elapsed_ms = (time.perf_counter() - started) * 1000.0
        logger.info(
            f"Finished after {trace.records[-1].k} iterations ({stop_reason}); "
            f"exit code {exit_code}, {elapsed_ms:.0f} ms"
        )
        return RunResult(
            trace=trace,
            reports=reports,
            exit_code=exit_code,
            stop_reason=stop_reason,
            blow_up_at=blow_up_at,
            elapsed_ms=elapsed_ms,
            trace_path=written,
        )

    def sweep(self, etas: Sequence[float], out_dir: Path | None = None) -> list[SweepEntry]:
        """Run the config once per step size, in parallel, results in input order.

        With ``out_dir`` each run writes ``trace_eta<eta>.csv`` there; without it
        nothing is written, not even ``output.trace``.
        """
        if not etas:
            raise ValueError("a sweep needs at least one step size")

        def run_one(eta: float) -> SweepEntry:
            config = replace(
                self.config,
                schedule=replace(self.config.schedule, eta=eta),
                output=replace(self.config.output, trace=None, plot=None),
            )
            path = out_dir / f"trace_eta{eta:g}.csv" if out_dir is not None else None
            return SweepEntry(eta, ExperimentRunner(config).run(path))

        workers = sweep_threads(len(etas))
        logger.info(f"Sweeping {len(etas)} step sizes on {workers} threads")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_one, etas))
