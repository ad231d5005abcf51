"""
SKDMAR Command Line Interface.

Provides `skdmar simulate`, `skdmar estimate`, `skdmar calibrate` and
`skdmar generate` for simulation studies and ATE estimation on
datasets with decaying, missing-at-random outcome labels.
"""

import functools
import io
import logging
from typing import Optional

import click
import numpy as np
from pydantic import ValidationError as PydanticValidationError
from rich import box
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table

from . import __version__
from .errors import SkdmarError, TableInvalidError, ValidationError
from .estimators import ESTIMATOR_NAMES, estimate_ate
from .models import DgpName, DgpSpec, LambdaPolicy, LearnerSpec, SolverConfig, StudyConfig
from .simulate import build_oracle, gen_dataset, realized_rates, run_replications
from .storage import (
    load_config,
    load_dataset_csv,
    save_dataset_csv,
    write_metadata,
    write_metrics_csv,
    write_report_csv,
)

console = Console()
logger = logging.getLogger("skdmar.cli")


def _handle_errors(fn):
    """Print skdmar errors and exit with their code."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SkdmarError as e:
            console.print(f"[red]Error:[/red] {escape(str(e))}")
            raise SystemExit(e.exit_code)
        except PydanticValidationError as e:
            console.print(f"[red]Error:[/red] {escape(str(e))}")
            raise SystemExit(ValidationError.exit_code)

    return wrapper


def _load_config(ctx: click.Context, param: click.Parameter, value: Optional[str]):
    """Eager ``--config`` callback: file values become option defaults."""
    if value:
        try:
            defaults = load_config(value)
        except SkdmarError as e:
            raise click.BadParameter(str(e), ctx=ctx, param=param)
        ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


config_option = click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    is_eager=True,
    expose_value=False,
    callback=_load_config,
    help="YAML or key=value file of option defaults; flags win",
)


def tuning_options(fn):
    """Penalty selection and solver flags shared by every command that fits."""
    options = [
        click.option(
            "--lambda-policy",
            type=click.Choice(["cv", "fixed"]),
            default="cv",
            help="Choose penalties by cross-validation or fix them",
        ),
        click.option("--lambda-or", type=float, help="Outcome penalty for --lambda-policy fixed"),
        click.option("--lambda-ps", type=float, help="Propensity penalty for --lambda-policy fixed"),
        click.option("--cv-folds", type=click.IntRange(min=2), default=5, help="CV folds"),
        click.option("--n-lambda", type=click.IntRange(min=1), default=50, help="λ grid size"),
        click.option("--tol", type=float, default=1e-7, help="KKT residual tolerance"),
        click.option("--max-iter", type=click.IntRange(min=1), default=10_000, help="Solver iteration cap"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def design_options(fn):
    """Simulation design flags."""
    options = [
        click.option("--dgp", required=True, help="Design: a, b, c, d or e"),
        click.option("--n", "n", type=click.IntRange(min=2), default=10_000, help="Sample size N"),
        click.option("--d", "d", type=click.IntRange(min=3), default=51, help="Dimension incl. intercept"),
        click.option("--s-alpha", type=click.IntRange(min=2), default=3, help="Outcome sparsity"),
        click.option("--s-beta", type=click.IntRange(min=2), default=3, help="Propensity sparsity"),
        click.option("--gamma", type=float, help="Target labeling rate for both arms"),
        click.option("--gamma1", type=float, help="Target labeling rate for arm 1"),
        click.option("--gamma0", type=float, help="Target labeling rate for arm 0"),
        click.option("--seed", type=click.IntRange(min=0), default=0, help="Base seed"),
        click.option("--mc-draws", type=click.IntRange(min=1), default=1_000_000, help="Calibration draws"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _learner(
    lambda_policy: str,
    lambda_or: Optional[float],
    lambda_ps: Optional[float],
    cv_folds: int,
    n_lambda: int,
    tol: float,
    max_iter: int,
) -> LearnerSpec:
    policy = (
        LambdaPolicy.fixed(lambda_or, lambda_ps)
        if lambda_policy == "fixed"
        else LambdaPolicy(lambda_or=lambda_or, lambda_ps=lambda_ps)
    )
    return LearnerSpec(
        lambda_policy=policy,
        cv_folds=cv_folds,
        n_lambda=n_lambda,
        solver=SolverConfig(tol=tol, max_iter=max_iter),
    )


def _design(
    dgp: str,
    n: int,
    d: int,
    s_alpha: int,
    s_beta: int,
    gamma: Optional[float],
    gamma1: Optional[float],
    gamma0: Optional[float],
    seed: int,
) -> DgpSpec:
    valid = [name.value for name in DgpName]
    if dgp not in valid:
        raise ValidationError(f"unknown DGP '{dgp}'. Valid: {', '.join(valid)}")
    g1 = gamma1 if gamma1 is not None else gamma
    g0 = gamma0 if gamma0 is not None else gamma
    target = None
    if not DgpName(dgp).supervised:
        if g1 is None or g0 is None:
            raise ValidationError(f"DGP ({dgp}) needs --gamma or both --gamma1 and --gamma0")
        target = (g1, g0)
    return DgpSpec(
        dgp=dgp, n=n, d=d, s_alpha=s_alpha, s_beta=s_beta, gamma_target=target, seed=seed
    )


def _render_text(table: Table) -> str:
    buffer = io.StringIO()
    Console(file=buffer, width=120, color_system=None).print(table)
    return buffer.getvalue()


@click.group()
@click.version_option(version=__version__, prog_name="skdmar")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """SKDMAR - semi-supervised ATE estimation under decaying labeling.

    Estimate average treatment effects when outcome labels get rarer
    as samples grow, and run the Monte Carlo studies behind them.

    Examples:

        skdmar estimate data.csv --method ss-lasso

        skdmar simulate --dgp a --n 10000 --gamma 0.1 --reps 200 -o results.csv
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@cli.command()
@config_option
@design_options
@click.option("--reps", type=click.IntRange(min=1), default=200, help="Replications")
@click.option(
    "--estimators",
    default="oracle,mcar,ss-lasso,brss",
    help=f"Comma-separated estimators: {', '.join(ESTIMATOR_NAMES)}",
)
@click.option(
    "--workers",
    type=click.IntRange(min=1),
    default=1,
    envvar="SKDMAR_WORKERS",
    show_envvar=True,
    help="Parallel worker processes",
)
@click.option("--k-folds", type=click.IntRange(min=2), default=2, help="Cross-fitting folds")
@click.option("--n-repeats", type=click.IntRange(min=1), default=1, help="Cross-fitting repeats")
@click.option("--level", type=float, default=0.95, help="Confidence level")
@click.option("--truth-draws", type=click.IntRange(min=1), default=10_000_000, help="Draws for the true ATE")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Metrics CSV")
@click.option("--table", "table_path", type=click.Path(dir_okay=False), help="Text table path")
@tuning_options
@_handle_errors
def simulate(
    dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed, mc_draws,
    reps, estimators, workers, k_folds, n_repeats, level, truth_draws, out, table_path,
    lambda_policy, lambda_or, lambda_ps, cv_folds, n_lambda, tol, max_iter,
):
    """Run a Monte Carlo study of several estimators on one design.

    Examples:

        skdmar simulate --dgp a --n 10000 --d 51 --gamma 0.1 --reps 200 -o a.csv

        skdmar simulate --dgp d --n 300 --estimators ss-lasso,brss -o d.csv
    """
    spec = _design(dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed)
    names = tuple(name.strip() for name in estimators.split(",") if name.strip())
    if not names:
        raise ValidationError(f"no estimator given in --estimators. Valid: {', '.join(ESTIMATOR_NAMES)}")
    study = StudyConfig(
        estimators=names,
        n_reps=reps,
        base_seed=seed,
        workers=workers,
        k_folds=k_folds,
        n_repeats=n_repeats,
        ci_level=level,
        tuning=_learner(lambda_policy, lambda_or, lambda_ps, cv_folds, n_lambda, tol, max_iter),
    )
    oracle = build_oracle(spec, mc_draws=mc_draws, truth_draws=truth_draws)
    console.print(f"[cyan]{spec.header()}[/cyan]  mu0={oracle.mu0:.6g}, {reps} replications")
    table = run_replications(spec, study, oracle)

    rendered = table.render()
    console.print(rendered)
    metadata = {
        "design": spec.model_dump(mode="json"),
        "study": study.model_dump(mode="json"),
        "offsets": None if oracle.offsets is None else list(oracle.offsets),
        "mu0_se": oracle.mu0_se,
    }
    write_metrics_csv(table, out, metadata)
    text_path = table_path or str(out).rsplit(".", 1)[0] + ".txt"
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(_render_text(table.render(box=box.ASCII)))
    console.print(f"[green]Metrics saved to {out}[/green] (table: {text_path})")

    if not table.valid:
        raise TableInvalidError(
            f"table invalid: at least {study.max_fail_rate:.0%} of replications failed "
            "for some estimator"
        )


@cli.command()
@config_option
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--method", "-m", default="ss-lasso", help=f"Estimator: {', '.join(ESTIMATOR_NAMES)}")
@click.option("--k-folds", type=click.IntRange(min=2), default=2, help="Cross-fitting folds")
@click.option("--n-repeats", type=click.IntRange(min=1), default=1, help="Cross-fitting repeats")
@click.option("--seed", type=click.IntRange(min=0), default=0, help="Seed of all random splits")
@click.option("--level", type=float, default=0.95, help="Confidence level")
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Save the report as CSV")
@tuning_options
@_handle_errors
def estimate(
    input_csv, method, k_folds, n_repeats, seed, level, out,
    lambda_policy, lambda_or, lambda_ps, cv_folds, n_lambda, tol, max_iter,
):
    """Estimate the ATE of a dataset CSV.

    The CSV has header r,t,y,x1..xd (optionally rt); y is empty where
    r = 0. An intercept is added to the covariates.

    Examples:

        skdmar estimate data.csv

        skdmar estimate data.csv --method brss --out report.csv
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    dataset = load_dataset_csv(input_csv)
    tuning = _learner(lambda_policy, lambda_or, lambda_ps, cv_folds, n_lambda, tol, max_iter)
    report = estimate_ate(
        method, dataset, tuning=tuning, k_folds=k_folds, seed=seed,
        n_repeats=n_repeats, ci_level=level,
    )

    table = Table(title=f"ATE ({report.method}, N={report.n})")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", justify="right", style="green")
    for key, value in report.to_records():
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)

    if out:
        metadata = {
            "input": str(input_csv),
            "method": method,
            "k_folds": k_folds,
            "n_repeats": n_repeats,
            "seed": seed,
            "lambda_policy": lambda_policy,
            "lambdas": [fit.lambda_used for arm in report.arms for fit in arm.fits],
        }
        write_report_csv(report, out, metadata)
        console.print(f"\n[green]Report saved to {out}[/green]")


@cli.command()
@config_option
@design_options
@click.option("--tol", type=float, default=2e-3, help="Allowed miss of the target rate")
@click.option("--check-draws", type=click.IntRange(min=1), default=1_000_000, help="Fresh draws for the check")
@_handle_errors
def calibrate(dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed, mc_draws, tol, check_draws):
    """Calibrate labeling intercepts to hit the target rates.

    Examples:

        skdmar calibrate --dgp a --d 51 --gamma 0.1
    """
    spec = _design(dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed)
    if spec.dgp.supervised:
        raise ValidationError(f"DGP ({dgp}) is fully labeled and has no labeling offset")
    oracle = build_oracle(spec, mc_draws=mc_draws, tol=tol, truth_draws=1)
    rates = realized_rates(oracle, check_draws, seed=seed + 1)

    table = Table(title=spec.header())
    table.add_column("Arm", style="cyan")
    table.add_column("Offset", justify="right")
    table.add_column("Target", justify="right")
    table.add_column("Realized", justify="right", style="green")
    for arm, offset, target, rate in zip(
        (1, 0), oracle.offsets, spec.gamma_target, rates
    ):
        table.add_row(str(arm), f"{offset:.6g}", f"{target:.6g}", f"{rate:.6g}")
    console.print(table)


@cli.command()
@config_option
@design_options
@click.option("--truth-draws", type=click.IntRange(min=1), default=1_000_000, help="Draws for the true ATE")
@click.option("--out", "-o", required=True, type=click.Path(dir_okay=False), help="Dataset CSV")
@_handle_errors
def generate(dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed, mc_draws, truth_draws, out):
    """Write one simulated dataset in the estimate input format.

    The draw equals replication 0 of `skdmar simulate` with the same seed.

    Examples:

        skdmar generate --dgp a --n 2000 --d 11 --gamma 0.2 -o sample.csv
    """
    spec = _design(dgp, n, d, s_alpha, s_beta, gamma, gamma1, gamma0, seed)
    oracle = build_oracle(spec, mc_draws=mc_draws, truth_draws=truth_draws)
    dataset = gen_dataset(spec, oracle, np.random.default_rng(seed))
    save_dataset_csv(dataset, out)
    write_metadata(
        {
            "design": spec.model_dump(mode="json"),
            "mu0": oracle.mu0,
            "offsets": None if oracle.offsets is None else list(oracle.offsets),
            "labeled": int(dataset.outcome_label.sum()),
        },
        out,
    )
    console.print(
        f"[green]Dataset saved to {out}[/green] "
        f"(N={dataset.n}, labeled={int(dataset.outcome_label.sum())}, mu0={oracle.mu0:.6g})"
    )


def main():
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
