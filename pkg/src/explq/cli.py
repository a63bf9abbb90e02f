"""

Explq - Exploratory LQ control and mean-variance ALM

Copyright (C) 2024 Miðeind ehf.

   This program is free software: you can redistribute it and/or modify
   it under the terms of the GNU General Public License as published by
   the Free Software Foundation, either version 3 of the License, or
   (at your option) any later version.
   This program is distributed in the hope that it will be useful,
   but WITHOUT ANY WARRANTY; without even the implied warranty of
   MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
   GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with this program.  If not, see http://www.gnu.org/licenses/.


Command line interface for solving, iterating, training and evaluating.
Returns 0 on success, 1 on configuration errors and 2 on numerical failures.

Run the following command for a list of options:

    explq --help

"""

from collections.abc import Callable, Iterable, Sequence
from typing import Annotated, Optional

import csv
import logging
import sys
from pathlib import Path

try:
    import typer
    from rich import print
    from rich.console import Console
    from rich.logging import RichHandler
    from rich.table import Table
except ModuleNotFoundError:
    _TYPER_MISSING = """
To use the command line tool install explq with the 'cli' optional dependency:
    python3 -m pip install 'explq[cli]'
"""
    print(_TYPER_MISSING, file=sys.stderr)
    sys.exit(1)

import numpy as np
from pydantic import ValidationError

from .closed_form import proposition1_solution
from .config import RunConfig, load_config
from .lq_core import NumericalError, optimal_gaussian_policy, riccati_backward
from .mv_alm import EVAL_CSV_HEADER, EvalReport, calibrate_gamma, check_target, evaluate_policy, report_from_surplus
from .policy_iter import iterate
from .rl import TRAIN_CSV_HEADER, train
from .settings import SETTINGS, ConfigError

_LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2

RICCATI_CSV_HEADER = ("t", "p11", "p12", "p22", "g", "gain_x", "gain_y", "value_const")
IMPROVEMENT_CSV_HEADER = ("j", "max_value_gap", "value_at_probe")

# Grid of states for the improvement gap
GAP_GRID_X = np.linspace(-3.0, 3.0, 7)
GAP_GRID_L = np.linspace(0.0, 1.0, 5)


def _fmt(v: float) -> str:
    return format(v, ".17g")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    _LOG.info("Wrote %s", path)


def _out_dir(config: RunConfig, out: Optional[Path]) -> Path:
    target = out or config.output_dir
    if target is None:
        return SETTINGS.get_out_dir()
    target.mkdir(parents=True, exist_ok=True)
    return target


def _guarded(action: Callable[[], None]) -> int:
    """Run `action`, mapping failures to exit codes."""
    try:
        action()
    except ValueError as e:
        # ConfigError, pydantic ValidationError and rejected inputs
        _LOG.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except NumericalError as e:
        _LOG.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    return EXIT_OK


def run_solve(config: RunConfig, out: Optional[Path] = None) -> int:
    def action() -> None:
        market = config.market()
        solution = proposition1_solution(market.params, market.periods)
        if _LOG.isEnabledFor(logging.DEBUG):
            riccati = riccati_backward(market.params, market.periods)
            gap = max(
                float(np.abs(solution.p_matrix(t) - riccati.value_matrix(t)).max()) for t in range(market.periods)
            )
            _LOG.debug("Closed form vs recursion, max |ΔP| = %.3e", gap)
        rows = [
            (s.t, _fmt(s.p11), _fmt(s.p12), _fmt(s.p22), _fmt(s.g), _fmt(s.gain_x), _fmt(s.gain_y), _fmt(s.value_const))
            for s in solution.stages
        ]
        _write_csv(_out_dir(config, out) / "riccati.csv", RICCATI_CSV_HEADER, rows)

        table = Table(title=f"Optimal solution ({market.periods} periods)")
        for col in RICCATI_CSV_HEADER:
            table.add_column(col, justify="right")
        for t in sorted({0, market.periods - 1}):
            s = solution.stage(t)
            table.add_row(str(t), *(f"{v:.6g}" for v in s[1:]))
        print(table)

    return _guarded(action)


def run_iterate(config: RunConfig, out: Optional[Path] = None) -> int:
    def action() -> None:
        market = config.market()
        params, horizon = market.params, market.periods
        optimum = riccati_backward(params, horizon)
        grid_x, grid_l = np.meshgrid(GAP_GRID_X, GAP_GRID_L)
        optimal_grid = [optimum.value(t).evaluate(grid_x, grid_l) for t in range(horizon + 1)]

        rows: list[tuple[object, ...]] = []
        for state in iterate(params, config.seed_policy(), horizon):
            gap = max(
                float(np.abs(state.values.at(t).evaluate(grid_x, grid_l) - optimal_grid[t]).max())
                for t in range(horizon + 1)
            )
            start_value = state.values.evaluate(0, config.x0, config.l0)
            rows.append((state.j, _fmt(gap), _fmt(start_value)))
        _write_csv(_out_dir(config, out) / "improvement.csv", IMPROVEMENT_CSV_HEADER, rows)
        print(f"Improvement converged after {horizon} sweeps, final gap {rows[-1][1]}")

    return _guarded(action)


def run_train(config: RunConfig, out: Optional[Path] = None) -> int:
    def action() -> None:
        market = config.market()
        train_config = config.train_config()
        theta, log = train(train_config, market.params, market.periods)
        out_dir = _out_dir(config, out)
        _write_csv(
            out_dir / "training_log.csv",
            TRAIN_CSV_HEADER,
            ((r.episode, *(_fmt(v) for v in r[1:])) for r in log.rows),
        )
        tail = log.terminal_surplus()[-4 * train_config.batch :]
        if tail.shape[0] < 2:
            raise ConfigError("training summary needs at least 2 episodes")
        report = report_from_surplus(tail, config.d, config.sharpe_base)
        _write_csv(out_dir / "summary.csv", EVAL_CSV_HEADER, [report.csv_row(config.label)])
        print(f"θ = {theta.as_array().tolist()}, γ = {theta.gamma:.6g}")
        _print_report(config.label, report)

    return _guarded(action)


def run_evaluate(config: RunConfig, out: Optional[Path] = None) -> int:
    def action() -> None:
        market = config.market()
        params, horizon = market.params, market.periods
        policy = optimal_gaussian_policy(riccati_backward(params, horizon))
        mv = config.mv_problem()
        check_target(params, mv, horizon)
        gamma = config.gamma if config.gamma is not None else calibrate_gamma(params, policy, mv)
        report = evaluate_policy(
            params,
            policy,
            config.mv_problem(gamma),
            config.eval_episodes,
            config.seed,
            config.sharpe_base,
        )
        _write_csv(_out_dir(config, out) / "summary.csv", EVAL_CSV_HEADER, [report.csv_row(config.label)])
        print(f"γ = {gamma:.10g}")
        _print_report(config.label, report)

    return _guarded(action)


def _print_report(label: str, report: EvalReport) -> None:
    table = Table(title=label)
    for col in EVAL_CSV_HEADER[1:]:
        table.add_column(col, justify="right")
    table.add_row(
        str(report.episodes),
        f"{report.sample_mean:.6g}",
        f"{report.sample_variance:.6g}",
        f"{report.sharpe:.6g}",
        f"{report.constraint_gap:.6g}",
    )
    print(table)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _load(config: Path, log_level: Optional[str]) -> RunConfig:
    _setup_logging(log_level or SETTINGS.LOG_LEVEL)
    try:
        return load_config(config)
    except ConfigError as e:
        print(f"[red]Configuration error in {config}: {e}", file=sys.stderr)
        raise typer.Exit(EXIT_CONFIG) from e


def _override(config: RunConfig, **overrides: object) -> RunConfig:
    try:
        return config.with_overrides(**overrides)
    except ValidationError as e:
        print(f"[red]Invalid option: {e}", file=sys.stderr)
        raise typer.Exit(EXIT_CONFIG) from e


app = typer.Typer(help="Exploratory LQ control and mean-variance asset-liability management.")

ConfigOpt = Annotated[
    Path,
    typer.Option("--config", "-c", exists=True, dir_okay=False, help="Run configuration file (key = value)."),
]
OutOpt = Annotated[Optional[Path], typer.Option("--out", "-o", help="Output directory (overrides output_dir).")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", min=0, help="Random seed (overrides seed).")]
EpisodesOpt = Annotated[Optional[int], typer.Option("--episodes", "-n", min=1, help="Number of episodes.")]
LogLevelOpt = Annotated[Optional[str], typer.Option("--log-level", help="Log level (default EXPLQ_LOG_LEVEL).")]


@app.command()
def solve(config: ConfigOpt, out: OutOpt = None, log_level: LogLevelOpt = None) -> None:
    """Closed-form optimal value and policy, written to riccati.csv."""
    raise typer.Exit(run_solve(_load(config, log_level), out))


@app.command(name="iterate")
def iterate_cmd(config: ConfigOpt, out: OutOpt = None, log_level: LogLevelOpt = None) -> None:
    """Policy improvement from the configured seed policy, written to improvement.csv."""
    raise typer.Exit(run_iterate(_load(config, log_level), out))


@app.command(name="train")
def train_cmd(
    config: ConfigOpt,
    out: OutOpt = None,
    seed: SeedOpt = None,
    episodes: EpisodesOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Learn θ and γ from simulated episodes; writes training_log.csv and summary.csv."""
    cfg = _override(_load(config, log_level), seed=seed, episodes=episodes)
    raise typer.Exit(run_train(cfg, out))


@app.command()
def evaluate(
    config: ConfigOpt,
    out: OutOpt = None,
    seed: SeedOpt = None,
    episodes: EpisodesOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Monte Carlo statistics of the optimal policy, written to summary.csv."""
    cfg = _override(_load(config, log_level), seed=seed, eval_episodes=episodes)
    raise typer.Exit(run_evaluate(cfg, out))


def main():
    app()


if __name__ == "__main__":
    main()
