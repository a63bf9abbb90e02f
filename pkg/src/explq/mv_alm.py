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


Mean-variance asset-liability layer.

Minimising Var(X_T - l_T) subject to E[X_T - l_T] = d is relaxed with
a multiplier 2γ into the LQ problem on (x_t, l_t) with the shifted
wealth x_t = X_t - γ r_f^-(T-t) and terminal weight [[1, -1], [-1, 1]].

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import NamedTuple, Optional

import math
from logging import getLogger

import numpy as np
from pydantic import BaseModel, Field
from scipy import optimize

from .lq_core import GaussianPolicy, ModelParams, NumericalError
from .market import shift_offsets, simulate_terminal
from .settings import SHARPE_BASE

_LOG = getLogger(__name__)

EVAL_CSV_HEADER = ("label", "episodes", "sample_mean", "sample_variance", "sharpe", "constraint_gap")


class MVProblem(BaseModel):
    """Target surplus, multiplier and initial position."""

    model_config = {"frozen": True, "extra": "forbid"}

    d: float = Field(default=1.4, description="Target expected terminal surplus.")
    gamma: float = Field(default=0.0, description="Lagrange multiplier γ (the relaxation uses 2γ).")
    x0: float = Field(default=1.0, description="Initial wealth X_0.")
    l0: float = Field(default=0.1, description="Initial liability l_0.")


class EvalReport(NamedTuple):
    sample_mean: float
    sample_variance: float
    sharpe: float
    episodes: int
    constraint_gap: float

    def csv_row(self, label: str) -> tuple[str, ...]:
        return (
            label,
            str(self.episodes),
            format(self.sample_mean, ".17g"),
            format(self.sample_variance, ".17g"),
            format(self.sharpe, ".17g"),
            format(self.constraint_gap, ".17g"),
        )


def shift_state(x: float, gamma: float, rf_period: float, periods_remaining: int) -> float:
    """x_t = X_t - γ r_f^-(T-t)."""
    if rf_period <= 0.0:
        raise ValueError(f"rf_period must be positive, got {rf_period}")
    return x - gamma * rf_period ** (-periods_remaining)


def sharpe_ratio(mean: float, variance: float, excess_base: float = SHARPE_BASE) -> float:
    """(mean - excess_base) / sqrt(variance); +inf (with a warning) for zero variance."""
    if variance <= 0.0:
        _LOG.warning("Zero sample variance, reporting an infinite Sharpe ratio")
        return math.inf
    return (mean - excess_base) / math.sqrt(variance)


def report_from_surplus(surplus: np.ndarray, d: float, excess_base: float = SHARPE_BASE) -> EvalReport:
    """Sample statistics of terminal surplus, variance with divisor n - 1."""
    n = surplus.shape[0]
    if n < 2:
        raise ValueError(f"Need at least 2 episodes for a sample variance, got {n}")
    mean = float(np.mean(surplus))
    variance = float(np.var(surplus, ddof=1))
    return EvalReport(
        sample_mean=mean,
        sample_variance=variance,
        sharpe=sharpe_ratio(mean, variance, excess_base),
        episodes=n,
        constraint_gap=abs(mean - d),
    )


def evaluate_policy(
    params: ModelParams,
    policy: GaussianPolicy,
    mv: MVProblem,
    n_episodes: int,
    seed: int,
    excess_base: float = SHARPE_BASE,
    workers: Optional[int] = None,
) -> EvalReport:
    if n_episodes < 2:
        raise ValueError(f"n_episodes must be at least 2, got {n_episodes}")
    sample = simulate_terminal(params, policy, (mv.x0, mv.l0), mv.gamma, n_episodes, seed, workers)
    report = report_from_surplus(sample.surplus, mv.d, excess_base)
    _LOG.info(
        "Evaluated %d episodes: mean %.6f, variance %.6f, Sharpe %.5f",
        n_episodes,
        report.sample_mean,
        report.sample_variance,
        report.sharpe,
    )
    return report


def expected_surplus_under_policy(params: ModelParams, policy: GaussianPolicy, mv: MVProblem) -> float:
    """E[X_T - l_T] by exact propagation of the means (the dynamics are linear in the state)."""
    horizon = policy.horizon
    offsets = shift_offsets(mv.gamma, params.a, horizon)
    b = params.b_vec
    mean_x, mean_l = mv.x0, mv.l0
    for t in range(horizon):
        u = -(policy.gains[t] @ np.array([mean_x - offsets[t], mean_l]))
        mean_x = params.a * mean_x + float(b @ u)
        mean_l = params.a_bar * mean_l
    return mean_x - mean_l


def risk_free_surplus(params: ModelParams, mv: MVProblem, horizon: int) -> float:
    """Terminal surplus when all wealth stays in the risk-free asset."""
    return params.a**horizon * mv.x0 - params.a_bar**horizon * mv.l0


def check_target(params: ModelParams, mv: MVProblem, horizon: int) -> bool:
    """False (with a warning) when the target is reachable without risk."""
    baseline = risk_free_surplus(params, mv, horizon)
    if mv.d <= baseline:
        _LOG.warning(
            "Target surplus d=%g does not exceed the risk-free surplus %.6g; the constraint is vacuous",
            mv.d,
            baseline,
        )
        return False
    return True


def calibrate_gamma(params: ModelParams, policy: GaussianPolicy, mv: MVProblem) -> float:
    """The γ at which the expected terminal surplus under `policy` equals d."""

    def gap(gamma: float) -> float:
        return expected_surplus_under_policy(params, policy, mv.model_copy(update={"gamma": gamma})) - mv.d

    result = optimize.root_scalar(gap, x0=0.0, x1=1.0, method="secant", xtol=1e-14)
    if not result.converged or not math.isfinite(result.root):
        raise NumericalError(f"γ calibration failed: {result.flag}")
    _LOG.debug("Calibrated γ = %.12g after %d iterations", result.root, result.iterations)
    return float(result.root)
