#!/usr/bin/env python3

"""Reproduce the terminal surplus table on the four rebalancing profiles.

Read the profiles from the 'profiles' directory next to this one.

'evaluate': the optimal policy is computed in closed form, the Lagrange
multiplier γ is calibrated so the expected terminal surplus equals the
target d, and the terminal surplus is simulated.

'train': the policy is learned from simulated episodes with each profile's
training settings, and the learned policy is simulated at the learned γ.

The sample mean, sample variance and Sharpe ratio are printed next to the
published reference values and written to 'table.csv' (or
'trained_table.csv') in the output directory.
"""

from typing import Annotated, List, Optional

import sys
from pathlib import Path

from explq.cli import _fmt, _write_csv
from explq.config import RunConfig, load_config
from explq.lq_core import optimal_gaussian_policy, riccati_backward
from explq.mv_alm import EVAL_CSV_HEADER, EvalReport, calibrate_gamma, evaluate_policy
from explq.rl import theta_policy, train

try:
    import typer
    from rich import print
    from rich.table import Table
except ModuleNotFoundError:
    _TYPER_MISSING = """
To use the command line tool install explq with the 'cli' optional dependency:
    python3 -m pip install 'explq[cli]'
"""
    print(_TYPER_MISSING, file=sys.stderr)
    sys.exit(1)

profiles_dir = Path(__file__).parent.parent / "profiles"

# Published (sample mean, sample variance, Sharpe ratio) per profile
REFERENCE = {
    "monthly_5y": (8.07335, 1.47720, 6.60138),
    "monthly_1y": (1.40067, 0.06056, 5.48819),
    "daily_halfy": (1.19658, 0.03186, 6.42324),
    "daily_1y": (1.39368, 0.04920, 6.05735),
}

app = typer.Typer()


def _die(msg: str, exit_code: int = 1) -> None:
    print(msg, file=sys.stderr)
    raise typer.Exit(exit_code)


def _profiles(names: Optional[List[str]]) -> list[str]:
    if not profiles_dir.is_dir():
        _die(f"Profiles directory {profiles_dir} missing.")
    chosen = names or list(REFERENCE)
    unknown = [n for n in chosen if n not in REFERENCE]
    if unknown:
        _die(f"Unknown profiles: {', '.join(unknown)} (choose from {', '.join(REFERENCE)})")
    return chosen


def _table(title: str) -> Table:
    table = Table(title=title)
    for col in ("profile", "γ", "mean", "(ref)", "variance", "(ref)", "Sharpe", "(ref)"):
        table.add_column(col, justify="right")
    return table


def _add_row(table: Table, name: str, gamma: float, report: EvalReport) -> None:
    ref_mean, ref_var, ref_sharpe = REFERENCE[name]
    table.add_row(
        name,
        f"{gamma:.4f}",
        f"{report.sample_mean:.5f}",
        f"{ref_mean:.5f}",
        f"{report.sample_variance:.5f}",
        f"{ref_var:.5f}",
        f"{report.sharpe:.5f}",
        f"{ref_sharpe:.5f}",
    )


def _evaluate_learned(name: str, config: RunConfig, episodes: int, seed: int) -> tuple[float, EvalReport]:
    market = config.market()
    theta, log = train(config.train_config(), market.params, market.periods)
    first, last = log.loss_deciles()
    print(f"{name}: γ = {_fmt(theta.gamma)}, θ = {theta.as_array().tolist()}, Σδ² {_fmt(first)} -> {_fmt(last)}")
    policy = theta_policy(theta, market.periods, config.lam, market.params.a)
    report = evaluate_policy(
        market.params, policy, config.mv_problem(theta.gamma), episodes, seed, config.sharpe_base
    )
    return theta.gamma, report


@app.command()
def evaluate(
    episodes: Annotated[int, typer.Option(min=2, help="Episodes per profile.")] = 100_000,
    seed: Annotated[int, typer.Option(min=0, help="Random seed.")] = 0,
    profile: Annotated[Optional[List[str]], typer.Option(help="Profiles to run (default: all).")] = None,
    out: Annotated[Path, typer.Option(help="Output directory.")] = Path("explq_out"),
):
    table = _table("Terminal surplus under the optimal policy")
    rows: list[tuple[str, ...]] = []
    for name in _profiles(profile):
        config = load_config(profiles_dir / f"{name}.cfg")
        market = config.market()
        policy = optimal_gaussian_policy(riccati_backward(market.params, market.periods))
        gamma = calibrate_gamma(market.params, policy, config.mv_problem())
        report = evaluate_policy(
            market.params, policy, config.mv_problem(gamma), episodes, seed, config.sharpe_base
        )
        rows.append(report.csv_row(name))
        _add_row(table, name, gamma, report)
        print(f"{name}: γ = {_fmt(gamma)}")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "table.csv", EVAL_CSV_HEADER, rows)
    print(table)


@app.command(name="train")
def train_profiles(
    episodes: Annotated[
        Optional[int], typer.Option(min=1, help="Training episodes (default: the profile's).")
    ] = None,
    eval_episodes: Annotated[int, typer.Option(min=2, help="Episodes simulated with the learned policy.")] = 100_000,
    seed: Annotated[int, typer.Option(min=0, help="Random seed of training and evaluation.")] = 0,
    profile: Annotated[Optional[List[str]], typer.Option(help="Profiles to run (default: all).")] = None,
    out: Annotated[Path, typer.Option(help="Output directory.")] = Path("explq_out"),
):
    table = _table("Terminal surplus under the learned policy")
    rows: list[tuple[str, ...]] = []
    for name in _profiles(profile):
        config = load_config(profiles_dir / f"{name}.cfg").with_overrides(episodes=episodes, seed=seed)
        gamma, report = _evaluate_learned(name, config, eval_episodes, seed)
        rows.append(report.csv_row(name))
        _add_row(table, name, gamma, report)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "trained_table.csv", EVAL_CSV_HEADER, rows)
    print(table)


if __name__ == "__main__":
    app()
