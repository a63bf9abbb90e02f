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


Policy evaluation and policy improvement.

A seed policy u ~ N(K·(x, l), λ L N^(T-t-1)) has a quadratic value
(x, l) M_t (x, l)ᵀ + f(t). Improvement replaces the policy at t by the
Gaussian minimiser of the one-step free energy against the current
value at t+1; after j improvements the value agrees with the optimum
at every t with T - t <= j.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import NamedTuple, Optional

import math
from logging import getLogger

import numpy as np
from pydantic import BaseModel, Field

from .lq_core import (
    GaussianPolicy,
    ModelParams,
    QuadraticValue,
    RiccatiSolution,
    bellman_step,
    gaussian_neg_entropy,
    quadratic_coefficients,
)

_LOG = getLogger(__name__)

# |1 - N m̄| below this uses the limit of the geometric sum
GEOMETRIC_LIMIT_TOL = 1e-12


class SeedPolicy(BaseModel):
    """Initial Gaussian policy: mean K·(x, l)ᵀ, variance λ L N^(T-t-1)."""

    model_config = {"frozen": True, "extra": "forbid"}

    k: tuple[float, float] = Field(default=(0.0, 0.0), description="Feedback gain K = (K₁, K₂).")
    l_scale: float = Field(default=1.0, gt=0.0, description="Variance scale L.")
    n_base: float = Field(default=1.0, gt=0.0, description="Variance growth base N.")

    def to_gaussian(self, params: ModelParams, horizon: int) -> GaussianPolicy:
        if params.m != 1:
            raise ValueError(f"Seed policies have a scalar control, got m={params.m}")
        gains = np.tile(-np.asarray(self.k, dtype=float).reshape(1, 1, 2), (horizon, 1, 1))
        var = np.array([params.lam * self.l_scale * self.n_base ** (horizon - t - 1) for t in range(horizon)])
        return GaussianPolicy.from_entries(gains, var.reshape(horizon, 1, 1))


class ValueSchedule(NamedTuple):
    """Quadratic value for t = 0, ..., T: `mats` (T+1, 2, 2), `consts` (T+1,)."""

    mats: np.ndarray
    consts: np.ndarray

    @property
    def horizon(self) -> int:
        return self.consts.shape[0] - 1

    def at(self, t: int) -> QuadraticValue:
        return QuadraticValue(p=self.mats[t], c=float(self.consts[t]))

    def evaluate(self, t: int, x: float, y: float) -> float:
        return float(self.at(t).evaluate(x, y))

    @classmethod
    def from_riccati(cls, solution: RiccatiSolution) -> "ValueSchedule":
        """The optimal value as a schedule."""
        horizon = solution.horizon
        mats = np.stack([solution.value_matrix(t) for t in range(horizon + 1)])
        consts = np.array([solution.value_const(t) for t in range(horizon + 1)])
        return cls(mats=mats, consts=consts)


class PolicyIterState(NamedTuple):
    j: int
    values: ValueSchedule
    policy: GaussianPolicy

    @property
    def m_mat(self) -> np.ndarray:
        return self.values.mats

    @property
    def f_const(self) -> np.ndarray:
        return self.values.consts


def evaluate_gaussian_policy(params: ModelParams, policy: GaussianPolicy) -> ValueSchedule:
    """
    Exact value of a linear Gaussian policy (any m, time-varying gains).
    With K = -gain the recursion is

        M_t = F + H K + Kᵀ Hᵀ + Kᵀ G K,   f_t = f_{t+1} + tr(G Σ_t) + λ ∫ π_t ln π_t

    where (F, H, G) are the one-step coefficients of M_{t+1}.
    """
    horizon = policy.horizon
    if policy.m != params.m:
        raise ValueError(f"Policy control dimension {policy.m} != model dimension {params.m}")
    mats = np.empty((horizon + 1, 2, 2))
    consts = np.empty(horizon + 1)
    mats[horizon] = params.q_matrix
    consts[horizon] = 0.0
    for t in range(horizon - 1, -1, -1):
        f, h, g = quadratic_coefficients(mats[t + 1], params)
        k = -policy.gains[t]
        cov = policy.covs[t]
        m_t = f + h @ k + k.T @ h.T + k.T @ g @ k
        mats[t] = (m_t + m_t.T) / 2.0
        consts[t] = consts[t + 1] + float(np.trace(g @ cov)) + params.lam * gaussian_neg_entropy(cov)
    return ValueSchedule(mats=mats, consts=consts)


def _check_alm(params: ModelParams) -> None:
    if params.m != 1 or params.c != 0.0:
        raise ValueError(f"Seed policy evaluation is for the scalar C = 0 case (m={params.m}, C={params.c})")


def seed_growth(params: ModelParams, seed: SeedPolicy) -> float:
    """m̄ = A² + C² + 2(AB + CD)K₁ + (B² + D²)K₁², the per-period growth of M_t[0, 0]."""
    a, b, c, d = params.a, params.b[0], params.c, params.d[0]
    k1 = seed.k[0]
    return a * a + c * c + 2.0 * (a * b + c * d) * k1 + (b * b + d * d) * k1 * k1


def seed_value_const(params: ModelParams, seed: SeedPolicy, horizon: int, t: int) -> float:
    """The constant f(t) of a seed policy's value in closed form."""
    if not 0 <= t <= horizon:
        raise ValueError(f"Period t={t} outside 0..{horizon}")
    n = horizon - t
    lam, l_scale, n_base = params.lam, seed.l_scale, seed.n_base
    s = params.b[0] ** 2 + params.d[0] ** 2
    growth = n_base * seed_growth(params, seed)
    if abs(1.0 - growth) < GEOMETRIC_LIMIT_TOL:
        geometric = float(n)
    else:
        geometric = (1.0 - growth**n) / (1.0 - growth)
    return (
        lam * l_scale * s * geometric
        - 0.5 * lam * math.log(2.0 * math.pi * lam * l_scale) * n
        - 0.5 * lam * n
        - 0.5 * lam * math.log(n_base) * (n - 1) * n / 2.0
    )


def evaluate_seed_policy(params: ModelParams, seed: SeedPolicy, horizon: int) -> ValueSchedule:
    _check_alm(params)
    return evaluate_gaussian_policy(params, seed.to_gaussian(params, horizon))


def improve(params: ModelParams, current: ValueSchedule) -> tuple[GaussianPolicy, ValueSchedule]:
    """
    One improvement sweep. The new policy at t minimises the one-step
    free energy against the current value at t+1; the new value at t is
    that minimum. The terminal value is kept.
    """
    horizon = current.horizon
    m = params.m
    gains = np.empty((horizon, m, 2))
    covs = np.empty((horizon, m, m))
    mats = np.empty_like(current.mats)
    consts = np.empty_like(current.consts)
    mats[horizon] = current.mats[horizon]
    consts[horizon] = current.consts[horizon]
    for t in range(horizon - 1, -1, -1):
        stage, p, const = bellman_step(current.mats[t + 1], float(current.consts[t + 1]), params, t)
        gains[t] = stage.gain
        cov = 0.5 * params.lam * np.linalg.inv(stage.g)
        covs[t] = (cov + cov.T) / 2.0
        mats[t] = p
        consts[t] = const
    return GaussianPolicy(gains=gains, covs=covs), ValueSchedule(mats=mats, consts=consts)


def iterate(
    params: ModelParams, seed: SeedPolicy, horizon: int, iterations: Optional[int] = None
) -> list[PolicyIterState]:
    """
    Run improvement from a seed policy; returns the states j = 0, ..., iterations
    (default T, after which every period has converged).
    """
    n_iter = horizon if iterations is None else iterations
    if n_iter < 0:
        raise ValueError(f"iterations must be non-negative, got {n_iter}")
    values = evaluate_seed_policy(params, seed, horizon)
    states = [PolicyIterState(j=0, values=values, policy=seed.to_gaussian(params, horizon))]
    for j in range(1, n_iter + 1):
        policy, values = improve(params, values)
        states.append(PolicyIterState(j=j, values=values, policy=policy))
        _LOG.debug("Improvement %d: value at t=0 origin %.10g", j, values.consts[0])
    return states
