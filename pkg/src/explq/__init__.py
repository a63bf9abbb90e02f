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

from .closed_form import ClosedFormSolution, DegenerateDiffusionError, proposition1_solution, theorem2_solution
from .config import RunConfig, load_config, parse_config
from .lq_core import (
    GaussianPolicy,
    ModelParams,
    NumericalError,
    SingularGainError,
    StateVec,
    optimal_gaussian_policy,
    riccati_backward,
)
from .market import AnnualMarket, discretize, simulate_episode, simulate_terminal
from .mv_alm import EvalReport, MVProblem, evaluate_policy
from .policy_iter import SeedPolicy, iterate
from .rl import DivergenceError, ThetaVector, TrainConfig, train
from .settings import SETTINGS, ConfigError

__all__ = (
    "SETTINGS",
    "AnnualMarket",
    "ClosedFormSolution",
    "ConfigError",
    "DegenerateDiffusionError",
    "DivergenceError",
    "EvalReport",
    "GaussianPolicy",
    "MVProblem",
    "ModelParams",
    "NumericalError",
    "RunConfig",
    "SeedPolicy",
    "SingularGainError",
    "StateVec",
    "ThetaVector",
    "TrainConfig",
    "discretize",
    "evaluate_policy",
    "iterate",
    "load_config",
    "optimal_gaussian_policy",
    "parse_config",
    "proposition1_solution",
    "riccati_backward",
    "simulate_episode",
    "simulate_terminal",
    "theorem2_solution",
    "train",
)
