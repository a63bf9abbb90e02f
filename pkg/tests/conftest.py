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


"""

from pathlib import Path

import numpy as np
import pytest

from explq.closed_form import proposition1_solution
from explq.config import load_config
from explq.lq_core import ModelParams, SingularGainError, riccati_backward

PROFILES_DIR = Path(__file__).parent.parent / "profiles"


@pytest.fixture
def annual_params() -> ModelParams:
    """Annual figures used throughout the worked examples."""
    return ModelParams(a=1.05, b=0.25, c=0.0, d=0.2, a_bar=1.1, c_bar=0.1, rho=0.2, lam=0.1)


@pytest.fixture
def monthly_market():
    """Discretized monthly one-year profile."""
    return load_config(PROFILES_DIR / "monthly_1y.cfg").market()


def random_alm_params(rng: np.random.Generator, max_horizon: int = 8) -> ModelParams:
    """
    Random asset-liability parameters (C = 0): A, Ā ∈ [0.8, 1.5], B, D ∈ [0.05, 0.5],
    C̄ ∈ [0, 0.3], ρ ∈ [-0.9, 0.9] and λ ∈ [0.01, 1].

    Small D against large B makes α = A²D²/S small, and G_t = S α^(n-1) can drop
    below the absolute PIVOT_TOL within `max_horizon` periods (e.g. G = 6.6e-14 at
    α = 0.016, T = 8; roughly one draw in 2000). Those draws raise
    SingularGainError and are skipped. G only shrinks with n when α < 1, so a
    draw that passes at `max_horizon` passes at every shorter horizon.
    """
    while True:
        params = ModelParams(
            a=rng.uniform(0.8, 1.5),
            b=rng.uniform(0.05, 0.5),
            c=0.0,
            d=rng.uniform(0.05, 0.5),
            a_bar=rng.uniform(0.8, 1.5),
            c_bar=rng.uniform(0.0, 0.3),
            rho=rng.uniform(-0.9, 0.9),
            lam=rng.uniform(0.01, 1.0),
        )
        try:
            riccati_backward(params, max_horizon)
            proposition1_solution(params, max_horizon)
        except SingularGainError:
            continue
        return params


# The following is for marking specific tests
# with custom marks registered in pyproject.toml.
#
# These marked tests are *skipped by default*.
#
# To mark a test decorate it with e.g.
# `@pytest.mark.slow`
#
# Run the marked tests, use the corresponding
# CLI options e.g. `--run-slow`

SKIP_MARKERS = ("slow",)


def pytest_addoption(parser: pytest.Parser):
    """Add options to the pytest CLI interface."""
    for marker in SKIP_MARKERS:
        # Add --run-{marker} arguments for each skip marker
        parser.addoption(
            f"--run-{marker}",
            action="store_true",
            default=False,
            help=f"run {marker} tests",
        )

    # The option `--run-all` is special, it runs *all* tests
    parser.addoption(
        "--run-all",
        action="store_true",
        default=False,
        help="run all tests that are skipped by default",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]):
    """Add skip markers to tests, based on how pytest was invoked."""
    if config.getoption("--run-all"):
        # --run-all flag provided: don't skip any tests
        return

    # Set of markers which weren't specified to run with `--run-{marker}`
    skipped: set[str] = {marker for marker in SKIP_MARKERS if not config.getoption(f"--run-{marker}")}

    if len(skipped) == 0:
        return

    # For each test item, find whether it has a mark which should be skipped
    for item in items:
        for marker in skipped.intersection(m.name for m in item.own_markers):
            # Add `pytest.mark.skip` to this test item
            item.add_marker(pytest.mark.skip(reason=f"run with --run-{marker}"))
