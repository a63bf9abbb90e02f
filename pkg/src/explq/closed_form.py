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


Explicit solution of the scalar-control problem with the surplus
terminal weight Q_T = [[1, -1], [-1, 1]].

With S = |B|² + |D|², n = T - t periods to go and the bases

    α = A² + C² - (AB + CD)²/S
    β = (AĀ + ρCC̄) - (ĀB + ρC̄D)(AB + CD)/S
    e = Ā² + C̄²,   κ = (ĀB + ρC̄D)²/S,   r = β²/α

the value matrix is P_11 = αⁿ, P_12 = -βⁿ and P_22 = eⁿ - Σ_n with
Σ_n = e Σ_{n-1} + κ r^(n-1). The control weight is G = S α^(n-1).

"""

from __future__ import annotations

from typing import NamedTuple

import math
from logging import getLogger

import numpy as np

from .lq_core import ModelParams, NumericalError, SingularGainError
from .settings import SETTINGS

_LOG = getLogger(__name__)

SURPLUS_WEIGHT = ((1.0, -1.0), (-1.0, 1.0))


class DegenerateDiffusionError(NumericalError):
    """The control diffusion D (or drift A) vanishes, so the liability-gain base is undefined."""


class ClosedFormStage(NamedTuple):
    t: int
    p11: float
    p12: float
    p22: float
    g: float
    gain_x: float
    gain_y: float
    value_const: float


class ClosedFormSolution(NamedTuple):
    params: ModelParams
    horizon: int
    # Indexed by t = 0, ..., T-1
    stages: tuple[ClosedFormStage, ...]

    def stage(self, t: int) -> ClosedFormStage:
        if not 0 <= t < self.horizon:
            raise ValueError(f"No stage for period t={t} (horizon {self.horizon})")
        return self.stages[t]

    def p_matrix(self, t: int) -> np.ndarray:
        if t == self.horizon:
            return np.array(SURPLUS_WEIGHT)
        s = self.stage(t)
        return np.array([[s.p11, s.p12], [s.p12, s.p22]])

    def value(self, t: int, x: float, y: float) -> float:
        """Optimal value J*(t, x, y)."""
        if t == self.horizon:
            return (x - y) ** 2
        s = self.stage(t)
        return s.p11 * x * x + 2.0 * s.p12 * x * y + s.p22 * y * y + s.value_const


class _Bases(NamedTuple):
    s: float
    alpha: float
    beta: float
    e: float
    kappa: float
    r: float
    # β/α
    ratio: float
    k_x: float
    k_y: float


def _assemble(params: ModelParams, horizon: int, bases: _Bases) -> ClosedFormSolution:
    """Single backward pass over n = T - t computing every power by repeated multiplication."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    lam = params.lam
    log_entropy = math.log(1.0 / (math.pi * lam))
    log_s = math.log(bases.s)
    log_alpha = math.log(bases.alpha) if bases.alpha > 0.0 else None

    gain_x = bases.k_x / bases.s
    alpha_pow = beta_pow = e_pow = 1.0
    # Powers at n - 1
    alpha_prev = ratio_prev = 1.0
    r_prev = 1.0
    sigma = 0.0
    stages: list[ClosedFormStage] = []
    for n in range(1, horizon + 1):
        t = horizon - n
        if n > 1:
            if bases.s * alpha_pow < SETTINGS.PIVOT_TOL:
                g = bases.s * alpha_pow
                raise SingularGainError(t, f"G_t = S α^{n - 1} = {g:.3e} with α = {bases.alpha:.3e}")
            alpha_prev = alpha_pow
            ratio_prev *= bases.ratio
            r_prev *= bases.r
        alpha_pow *= bases.alpha
        beta_pow *= bases.beta
        e_pow *= bases.e
        sigma = bases.e * sigma + bases.kappa * r_prev
        # The ln α term vanishes at n = 1 (and α may be 0 there)
        const = 0.5 * lam * n * (log_entropy + log_s)
        if n > 1:
            const += 0.25 * lam * (n - 1) * n * log_alpha  # type: ignore[operator]
        stages.append(
            ClosedFormStage(
                t=t,
                p11=alpha_pow,
                p12=-beta_pow,
                p22=e_pow - sigma,
                g=bases.s * alpha_prev,
                gain_x=gain_x,
                gain_y=-ratio_prev * bases.k_y / bases.s,
                value_const=const,
            )
        )
    stages.reverse()
    return ClosedFormSolution(params=params, horizon=horizon, stages=tuple(stages))


def _check_scalar_surplus(params: ModelParams) -> None:
    if params.m != 1:
        raise ValueError(f"Closed forms need a scalar control, got m={params.m}")
    if params.q_terminal != SURPLUS_WEIGHT:
        raise ValueError(f"Closed forms need Q_T = {SURPLUS_WEIGHT}, got {params.q_terminal}")


def theorem2_solution(params: ModelParams, horizon: int) -> ClosedFormSolution:
    """Closed-form optimal value and policy for general (A, B, C, D, Ā, C̄, ρ)."""
    _check_scalar_surplus(params)
    a, b, c, d = params.a, params.b[0], params.c, params.d[0]
    a_bar, c_bar, rho = params.a_bar, params.c_bar, params.rho
    s = b * b + d * d
    if s <= 0.0:
        raise SingularGainError(horizon - 1, "B² + D² = 0")
    k_x = a * b + c * d
    k_y = a_bar * b + rho * c_bar * d
    alpha = (a * a + c * c) - k_x * k_x / s
    # Cauchy-Schwarz keeps α >= 0 up to round-off
    alpha = max(alpha, 0.0)
    beta = (a * a_bar + rho * c * c_bar) - k_y * k_x / s
    bases = _Bases(
        s=s,
        alpha=alpha,
        beta=beta,
        e=a_bar * a_bar + c_bar * c_bar,
        kappa=k_y * k_y / s,
        r=beta * beta / alpha if alpha > 0.0 else math.inf,
        ratio=beta / alpha if alpha > 0.0 else math.inf,
        k_x=k_x,
        k_y=k_y,
    )
    return _assemble(params, horizon, bases)


def proposition1_solution(params: ModelParams, horizon: int) -> ClosedFormSolution:
    """
    The asset-liability case C = 0, where the bases simplify to
    α = A²D²/S, β/α = (ĀD - ρBC̄)/(AD) and r = (ĀD - ρBC̄)²/S.
    """
    _check_scalar_surplus(params)
    if params.c != 0.0:
        raise ValueError(f"The asset-liability form requires C = 0, got C={params.c}")
    a, b, d = params.a, params.b[0], params.d[0]
    a_bar, c_bar, rho = params.a_bar, params.c_bar, params.rho
    if d == 0.0:
        raise DegenerateDiffusionError(
            f"D = 0: the liability-gain base (ĀD - ρBC̄)/(AD) is undefined from t={horizon - 1} (the last period) on"
        )
    if a == 0.0:
        raise DegenerateDiffusionError(
            f"A = 0: the liability-gain base (ĀD - ρBC̄)/(AD) is undefined from t={horizon - 1} (the last period) on"
        )
    s = b * b + d * d
    hedge = a_bar * d - rho * b * c_bar
    k_y = a_bar * b + rho * c_bar * d
    bases = _Bases(
        s=s,
        alpha=a * a * d * d / s,
        beta=a * (a_bar * d * d - rho * b * c_bar * d) / s,
        e=a_bar * a_bar + c_bar * c_bar,
        kappa=k_y * k_y / s,
        r=hedge * hedge / s,
        ratio=hedge / (a * d),
        k_x=a * b,
        k_y=k_y,
    )
    _LOG.debug("Asset-liability closed form, bases: %s", bases)
    return _assemble(params, horizon, bases)
