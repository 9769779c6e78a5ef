"""Click CLI entry point for pglab."""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, TypeVar

import click
import yaml

from pglab.config import ExperimentConfig, default_tau
from pglab.diagnostics import ALL_CHECKS, CheckReport, Trace, check_inequality, resolve_checks
from pglab.logging_config import setup_logging
from pglab.mdp import random_mdp, two_arm_bandit
from pglab.mdp_file import save_mdp
from pglab.plotting import ENVELOPES, plot_traces
from pglab.rates import RATE_MODELS, estimate_rate
from pglab.runner import (
    EXIT_BLOW_UP,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VIOLATION,
    ExperimentRunner,
)
from pglab.trace_io import read_trace

F = TypeVar("F", bound=Callable[..., Any])


class PglabGroup(click.Group):
    """Command group mapping usage and input errors to exit code 1."""

    def make_context(
        self,
        info_name: str | None,
        args: list[str],
        parent: click.Context | None = None,
        **extra: Any,
    ) -> click.Context:
        try:
            return super().make_context(info_name, args, parent, **extra)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except (ValueError, FileNotFoundError, yaml.YAMLError) as e:
            raise click.ClickException(str(e)) from e


@click.group(cls=PglabGroup)
def cli() -> None:
    """Exact tabular policy-gradient experiments with inequality checks."""


def experiment_options(func: F) -> F:
    """Flags shared by ``run``, ``verify`` and ``sweep``; each overrides the config file."""
    options = [
        click.option(
            "--config",
            "-c",
            "config_path",
            type=click.Path(exists=True, dir_okay=False, path_type=Path),
            help="Experiment config YAML",
        ),
        click.option(
            "--mdp",
            "mdp_path",
            type=click.Path(dir_okay=False, path_type=Path),
            help="MDP file to load",
        ),
        click.option("--bandit", is_flag=True, help="Use the two-armed bandit"),
        click.option("--seed", type=int, help="Seed of a generated MDP"),
        click.option("--states", type=click.IntRange(min=1), help="States of a generated MDP"),
        click.option("--actions", type=click.IntRange(min=2), help="Actions of a generated MDP"),
        click.option(
            "--gamma",
            type=click.FloatRange(0.0, 1.0, max_open=True),
            help="Discount of a generated MDP",
        ),
        click.option("--method", "-m", help="Update rule"),
        click.option("--schedule", help="Step-size schedule kind"),
        click.option("--eta", type=float, help="Step size"),
        click.option("--c3", type=float, help="Growth constant of ppg_increasing"),
        click.option("--c-adapt", type=float, help="Constant of pg_adaptive"),
        click.option("--tau", type=float, help="Entropy weight"),
        click.option("--max-iters", type=int, help="Iteration cap"),
        click.option("--stop-gap", type=float, help="Stop once the sup-norm gap is this small"),
        click.option("--check", "checks", multiple=True, help="Check to record (repeatable)"),
        click.option("--store-policies", is_flag=True, help="Keep every iterate's policy"),
        click.option("--verbose", "-v", is_flag=True, help="Enable verbose output"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(
    config_path: Path | None,
    mdp_path: Path | None = None,
    bandit: bool = False,
    seed: int | None = None,
    states: int | None = None,
    actions: int | None = None,
    gamma: float | None = None,
    method: str | None = None,
    schedule: str | None = None,
    eta: float | None = None,
    c3: float | None = None,
    c_adapt: float | None = None,
    tau: float | None = None,
    max_iters: int | None = None,
    stop_gap: float | None = None,
    checks: Sequence[str] = (),
    store_policies: bool = False,
    **_: Any,
) -> ExperimentConfig:
    """Load the config file (or defaults) and apply command-line overrides."""
    config = ExperimentConfig.load(config_path) if config_path else ExperimentConfig.default()

    mdp = config.mdp
    if mdp_path is not None:
        mdp = dataclasses.replace(mdp, source="file", path=mdp_path)
    elif bandit:
        mdp = dataclasses.replace(mdp, source="bandit")
    elif any(v is not None for v in (seed, states, actions, gamma)):
        mdp = dataclasses.replace(mdp, source="random")
    mdp = dataclasses.replace(
        mdp,
        seed=mdp.seed if seed is None else seed,
        n_states=mdp.n_states if states is None else states,
        n_actions=mdp.n_actions if actions is None else actions,
        gamma=mdp.gamma if gamma is None else gamma,
    )

    step = config.schedule
    step = dataclasses.replace(
        step,
        kind=step.kind if schedule is None else schedule,
        eta=step.eta if eta is None else eta,
        c3=step.c3 if c3 is None else c3,
        c_adapt=step.c_adapt if c_adapt is None else c_adapt,
    )

    new_method = config.method if method is None else method
    new_tau = config.tau
    if tau is not None:
        new_tau = tau
    elif method is not None and (config.tau is None) != (default_tau(method) is None):
        new_tau = default_tau(method)

    output = config.output
    if store_policies:
        output = dataclasses.replace(output, store_policies=True)

    return dataclasses.replace(
        config,
        mdp=mdp,
        method=new_method,
        schedule=step,
        tau=new_tau,
        max_iters=config.max_iters if max_iters is None else max_iters,
        stop_gap=config.stop_gap if stop_gap is None else stop_gap,
        checks=list(checks) if checks else config.checks,
        output=output,
    )


def _echo_reports(reports: Sequence[CheckReport]) -> None:
    for report in reports:
        click.echo(report.format_line())


@cli.command()
@click.option("--random", "kind", flag_value="random", default=True, help="Random MDP (default)")
@click.option("--bandit", "kind", flag_value="bandit", help="Two-armed bandit")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--states", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--actions", type=click.IntRange(min=2), default=20, show_default=True)
@click.option(
    "--gamma", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.99, show_default=True
)
@click.option(
    "--output", "-o", type=click.Path(dir_okay=False, path_type=Path), required=True
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
def gen(
    kind: str,
    seed: int,
    states: int,
    actions: int,
    gamma: float,
    output: Path,
    verbose: bool,
) -> None:
    """Generate an MDP file."""
    setup_logging(ExperimentConfig.default().logging, verbose)
    mdp = two_arm_bandit() if kind == "bandit" else random_mdp(seed, states, actions, gamma)
    fingerprint = save_mdp(mdp, output)
    click.echo(f"Wrote {output} ({mdp.n_states} states, {mdp.n_actions} actions)")
    click.echo(f"fingerprint {fingerprint}")


@cli.command()
@experiment_options
@click.option(
    "--output", "-o", type=click.Path(dir_okay=False, path_type=Path), help="Trace CSV path"
)
@click.option(
    "--plot", "plot_path", type=click.Path(dir_okay=False, path_type=Path), help="SVG plot path"
)
@click.pass_context
def run(
    ctx: click.Context,
    output: Path | None,
    plot_path: Path | None,
    verbose: bool,
    **options: Any,
) -> None:
    """Run one method and write its trace.

    Exits 0 when every recorded check held, 2 on a violation and 3 when an
    iterate stopped being finite.
    """
    config = build_config(**options)
    setup_logging(config.logging, verbose)
    result = ExperimentRunner(config).run(output)

    _echo_reports(result.reports)
    if result.blow_up_at is not None:
        click.echo(f"Numeric blow-up after k={result.blow_up_at}")
    click.echo(
        f"Stopped after {result.iterations} iterations ({result.stop_reason}); "
        f"final gap {result.final_gap:.6e}"
    )
    if result.trace_path is not None:
        click.echo(f"Trace written to {result.trace_path}")

    plot_target = plot_path or config.output.plot
    if plot_target is not None:
        plot_traces([(config.method, result.trace)], plot_target)
        click.echo(f"Plot written to {plot_target}")
    ctx.exit(result.exit_code)


def _verify_trace(path: Path, checks: Sequence[str], tolerance: float) -> list[CheckReport]:
    trace = read_trace(path)
    names = _trace_checks(trace, checks)
    return [check_inequality(name, trace, tolerance) for name in names]


def _trace_checks(trace: Trace, checks: Sequence[str]) -> tuple[str, ...]:
    context = trace.context
    if context is not None:
        requested = checks or context.checks or (ALL_CHECKS,)
        return resolve_checks(requested, context.method, context.schedule.kind)
    if checks and ALL_CHECKS not in checks:
        return resolve_checks(checks, "pi")
    recorded: dict[str, None] = {}
    for record in trace.records:
        recorded.update(dict.fromkeys(record.residuals))
    return tuple(recorded)


@cli.command()
@click.argument("target", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@experiment_options
@click.pass_context
def verify(ctx: click.Context, target: Path, verbose: bool, **options: Any) -> None:
    """Run the inequality checks on a trace CSV or on a fresh run of a config.

    TARGET: a trace CSV (with its .meta.yaml sidecar when available) or an
    experiment config YAML.
    """
    if target.suffix.lower() == ".csv":
        config = ExperimentConfig.default()
        setup_logging(config.logging, verbose)
        reports = _verify_trace(target, options.get("checks", ()), config.solver.slack_tolerance)
        _echo_reports(reports)
        ctx.exit(EXIT_VIOLATION if any(not r.passed for r in reports) else EXIT_OK)

    options["config_path"] = target
    config = build_config(**options)
    setup_logging(config.logging, verbose)
    result = ExperimentRunner(config).run()
    _echo_reports(result.reports)
    if result.blow_up_at is not None:
        click.echo(f"Numeric blow-up after k={result.blow_up_at}")
    ctx.exit(result.exit_code)


@cli.command()
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Experiment config YAML whose rate section sets the defaults",
)
@click.option("--model", type=click.Choice(RATE_MODELS), help="Rate model  [default: linear]")
@click.option("--window", nargs=2, type=int, help="Inclusive iteration window K_LO K_HI")
@click.option(
    "--column",
    type=click.Choice(["v_gap_rho", "v_gap_inf"]),
    help="Gap column to fit  [default: v_gap_rho]",
)
@click.option("--envelope", type=float, help="Envelope prefactor for the quadratic model")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
def rate(
    trace_path: Path,
    config_path: Path | None,
    model: str | None,
    window: tuple[int, int] | None,
    column: str | None,
    envelope: float | None,
    verbose: bool,
) -> None:
    """Fit a convergence rate to a trace.

    Flags win over the rate section of ``--config``.
    """
    config = ExperimentConfig.load(config_path) if config_path else ExperimentConfig.default()
    config.validate()
    setup_logging(config.logging, verbose)
    settings = config.rate
    trace = read_trace(trace_path)
    fit = estimate_rate(
        trace,
        model or settings.model,
        window or None,
        column=column or settings.column,
        envelope=envelope,
        window_fraction=settings.window_fraction,
    )
    click.echo(fit.format_line())


def _labels(paths: Sequence[Path], given: Sequence[str]) -> list[str]:
    if given:
        if len(given) != len(paths):
            raise click.BadParameter("give one --label per trace", param_hint="--label")
        return list(given)
    stems = [p.stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [str(p) for p in paths]


@cli.command()
@click.argument(
    "traces", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path)
)
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.option("--envelope", "envelopes", multiple=True, type=click.Choice(ENVELOPES))
@click.option("--label", "labels", multiple=True, help="Legend label per trace")
@click.option(
    "--column",
    type=click.Choice(["v_gap_inf", "v_gap_rho"]),
    default="v_gap_inf",
    show_default=True,
)
@click.option("--title", help="Plot title")
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose output")
def plot(
    traces: tuple[Path, ...],
    output: Path,
    envelopes: tuple[str, ...],
    labels: tuple[str, ...],
    column: str,
    title: str | None,
    verbose: bool,
) -> None:
    """Plot gap curves of one or more traces to an SVG file."""
    setup_logging(ExperimentConfig.default().logging, verbose)
    names = _labels(traces, labels)
    series = [(name, read_trace(path)) for name, path in zip(names, traces, strict=True)]
    drawn = plot_traces(series, output, envelopes, column, title)
    click.echo(f"Wrote {output} with {len(drawn)} curves")


def _parse_etas(raw: str) -> list[float]:
    try:
        etas = [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise click.BadParameter(f"not a comma-separated list of numbers: {raw}") from e
    if not etas:
        raise click.BadParameter("no step sizes given")
    return etas


@cli.command()
@experiment_options
@click.option("--etas", required=True, help="Comma-separated step sizes, e.g. 0.1,1,10")
@click.option(
    "--out-dir",
    type=click.Path(file_okay=False, path_type=Path),
    required=True,
    help="Directory for one trace CSV per step size",
)
@click.pass_context
def sweep(
    ctx: click.Context, etas: str, out_dir: Path, verbose: bool, **options: Any
) -> None:
    """Run one config over several step sizes in parallel (PGLAB_THREADS caps workers)."""
    values = _parse_etas(etas)
    config = build_config(**options)
    setup_logging(config.logging, verbose)
    entries = ExperimentRunner(config).sweep(values, out_dir)
    for entry in entries:
        click.echo(entry.format_line())
    codes = {entry.result.exit_code for entry in entries}
    if EXIT_BLOW_UP in codes:
        ctx.exit(EXIT_BLOW_UP)
    ctx.exit(EXIT_VIOLATION if EXIT_VIOLATION in codes else EXIT_OK)


def main() -> None:
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
