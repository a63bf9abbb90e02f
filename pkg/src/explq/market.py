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


Synthetic market: discretization of annual figures, correlated
noise and episode simulation under linear Gaussian feedback.

Wealth and liability follow

    X_{t+1} = A X_t + B u_t + (C X_t + D u_t) w_x
    l_{t+1} = (Ā + C̄ w_l) l_t

and the policy sees the shifted wealth x_t = X_t - γ A^-(T-t).

Random streams come from numpy SeedSequences: episode i uses
spawn key (0, i) and simulation block b uses key (1, b), so results
do not depend on the number of worker threads.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import NamedTuple, Optional, Union

import math
from concurrent.futures import ThreadPoolExecutor
from logging import getLogger

import numpy as np
from pydantic import BaseModel, Field

from .lq_core import GaussianPolicy, ModelParams
from .settings import SETTINGS, TRACE, ConfigError

_LOG = getLogger(__name__)

# Largest admissible |horizon/dt - round(horizon/dt)|
PERIOD_TOL = 1e-9

_EPISODE_STREAM = 0
_BLOCK_STREAM = 1


class AnnualMarket(BaseModel):
    """Annual market figures and the rebalancing grid."""

    model_config = {"frozen": True, "extra": "forbid"}

    rf_annual: float = Field(default=1.05, gt=1.0, description="Gross risk-free return r_f.")
    risky_return_annual: float = Field(default=1.4, description="Gross return of the risky asset.")
    excess_return_annual: Optional[float] = Field(
        default=None, description="Excess return of the risky asset (defaults to risky - r_f)."
    )
    risky_vol_annual: float = Field(default=0.2, ge=0.0, description="Volatility of the risky asset.")
    liability_growth_annual: float = Field(default=1.1, description="Gross liability growth.")
    liability_vol_annual: float = Field(default=0.1, ge=0.0, description="Liability volatility.")
    rho: float = Field(default=0.2, ge=-1.0, le=1.0, description="Asset/liability noise correlation.")
    dt: float = Field(default=1.0, gt=0.0, description="Rebalancing period in years.")
    horizon_years: float = Field(default=1.0, gt=0.0, description="Investment horizon in years.")


class DiscreteMarket(NamedTuple):
    params: ModelParams
    periods: int


def period_count(horizon_years: float, dt: float) -> int:
    """Number of rebalancing periods; horizon/dt must be a positive integer."""
    ratio = horizon_years / dt
    periods = round(ratio)
    residual = ratio - periods
    if periods < 1 or abs(residual) > PERIOD_TOL:
        raise ConfigError(
            f"horizon_years/dt = {ratio!r} is not a positive whole number of periods (residual {residual:.3g})"
        )
    return periods


def discretize(annual: AnnualMarket, lam: float) -> DiscreteMarket:
    """
    Per-period coefficients: geometric drifts, square-root-of-time
    volatilities and a linear excess return. C is 0.
    """
    dt = annual.dt
    periods = period_count(annual.horizon_years, dt)
    excess = (
        annual.excess_return_annual
        if annual.excess_return_annual is not None
        else annual.risky_return_annual - annual.rf_annual
    )
    params = ModelParams(
        a=annual.rf_annual**dt,
        b=(excess * dt,),
        c=0.0,
        d=(annual.risky_vol_annual * math.sqrt(dt),),
        a_bar=annual.liability_growth_annual**dt,
        c_bar=annual.liability_vol_annual * math.sqrt(dt),
        rho=annual.rho,
        lam=lam,
    )
    _LOG.debug("Discretized market, %d periods: %s", periods, params)
    return DiscreteMarket(params=params, periods=periods)


def seeded_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream identified by `key` under `seed`."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return seeded_rng(seed, _EPISODE_STREAM, episode)


class NoiseDraw(NamedTuple):
    wx: Union[float, np.ndarray]
    wy: Union[float, np.ndarray]


def draw_noise(rng: np.random.Generator, rho: float, size: Optional[int] = None) -> NoiseDraw:
    """
    Standard normals with correlation ρ: w_y = ρ w_x + sqrt(1 - ρ²) z.
    With `size` the draws are arrays.
    """
    wx = rng.standard_normal(size)
    z = rng.standard_normal(size)
    return NoiseDraw(wx=wx, wy=rho * wx + math.sqrt(max(0.0, 1.0 - rho * rho)) * z)


class EpisodePath(NamedTuple):
    """One trajectory. States have T+1 entries, controls and noise T."""

    wealth: np.ndarray
    liability: np.ndarray
    controls: np.ndarray
    noise_x: np.ndarray
    noise_l: np.ndarray
    gamma: float
    # Shifted wealth x_t seen by the policy
    state_x: np.ndarray

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def terminal_surplus(self) -> float:
        return float(self.wealth[-1] - self.liability[-1])

    @property
    def periods(
        self,
    ) -> list[tuple[int, float, float, Optional[np.ndarray], Optional[float], Optional[float]]]:
        """(t, X_t, l_t, u_t, wˣ_t, wˡ_t) for t = 0..T; the terminal entry has no control or noise."""
        rows: list[tuple[int, float, float, Optional[np.ndarray], Optional[float], Optional[float]]] = [
            (
                t,
                float(self.wealth[t]),
                float(self.liability[t]),
                self.controls[t],
                float(self.noise_x[t]),
                float(self.noise_l[t]),
            )
            for t in range(self.horizon)
        ]
        rows.append((self.horizon, float(self.wealth[-1]), float(self.liability[-1]), None, None, None))
        return rows


class TerminalSample(NamedTuple):
    wealth: np.ndarray
    liability: np.ndarray
    state_x: np.ndarray

    @property
    def surplus(self) -> np.ndarray:
        return self.wealth - self.liability


def shift_offsets(gamma: float, rf_period: float, horizon: int) -> np.ndarray:
    """γ rf^-(T-t) for t = 0, ..., T."""
    return gamma * rf_period ** -(horizon - np.arange(horizon + 1, dtype=float))


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    # Symmetric square root, valid for singular (degenerate) covariances
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _check_horizon(policy: GaussianPolicy, periods: Optional[int]) -> int:
    if periods is not None and periods != policy.horizon:
        raise ConfigError(f"Policy covers {policy.horizon} periods but the market has {periods}")
    return policy.horizon


def simulate_episode(
    params: ModelParams,
    policy: GaussianPolicy,
    init: tuple[float, float],
    gamma: float,
    rng: np.random.Generator,
    periods: Optional[int] = None,
) -> EpisodePath:
    horizon = _check_horizon(policy, periods)
    m = policy.m
    b, d = params.b_vec, params.d_vec
    offsets = shift_offsets(gamma, params.a, horizon)
    factors = [_cov_factor(policy.covs[t]) for t in range(horizon)]

    wealth = np.empty(horizon + 1)
    liability = np.empty(horizon + 1)
    controls = np.empty((horizon, m))
    noise_x = np.empty(horizon)
    noise_l = np.empty(horizon)
    wealth[0], liability[0] = init
    for t in range(horizon):
        x = wealth[t] - offsets[t]
        u = policy.gains[t] @ np.array([-x, -liability[t]]) + factors[t] @ rng.standard_normal(m)
        wx, wl = draw_noise(rng, params.rho)
        wealth[t + 1] = params.a * wealth[t] + b @ u + (params.c * wealth[t] + d @ u) * wx
        liability[t + 1] = (params.a_bar + params.c_bar * wl) * liability[t]
        controls[t] = u
        noise_x[t] = wx
        noise_l[t] = wl
    return EpisodePath(
        wealth=wealth,
        liability=liability,
        controls=controls,
        noise_x=noise_x,
        noise_l=noise_l,
        gamma=gamma,
        state_x=wealth - offsets,
    )


def _simulate_block(
    params: ModelParams,
    policy: GaussianPolicy,
    init: tuple[float, float],
    offsets: np.ndarray,
    size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    m = policy.m
    b, d = params.b_vec, params.d_vec
    wealth = np.full(size, float(init[0]))
    liability = np.full(size, float(init[1]))
    for t in range(policy.horizon):
        states = np.column_stack((wealth - offsets[t], liability))
        u = -(states @ policy.gains[t].T) + rng.standard_normal((size, m)) @ _cov_factor(policy.covs[t]).T
        noise = draw_noise(rng, params.rho, size)
        wealth = params.a * wealth + u @ b + (params.c * wealth + u @ d) * noise.wx
        liability = (params.a_bar + params.c_bar * noise.wy) * liability
    return wealth, liability


def simulate_terminal(
    params: ModelParams,
    policy: GaussianPolicy,
    init: tuple[float, float],
    gamma: float,
    n_episodes: int,
    seed: int,
    workers: Optional[int] = None,
) -> TerminalSample:
    """
    Terminal wealth and liability of `n_episodes` episodes, simulated in
    blocks of `SETTINGS.BLOCK_SIZE` over a thread pool. Output is identical
    for any number of workers.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be positive, got {n_episodes}")
    horizon = policy.horizon
    offsets = shift_offsets(gamma, params.a, horizon)
    block = SETTINGS.BLOCK_SIZE
    sizes = [min(block, n_episodes - start) for start in range(0, n_episodes, block)]
    workers = workers or SETTINGS.WORKERS
    _LOG.debug("Simulating %d episodes in %d blocks on %d workers", n_episodes, len(sizes), workers)

    def run(index: int) -> tuple[np.ndarray, np.ndarray]:
        _LOG.log(TRACE, "Simulating block %d", index)
        rng = seeded_rng(seed, _BLOCK_STREAM, index)
        return _simulate_block(params, policy, init, offsets, sizes[index], rng)

    if workers == 1:
        parts = [run(i) for i in range(len(sizes))]
    else:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="explq_sim") as pool:
            parts = list(pool.map(run, range(len(sizes))))
    wealth = np.concatenate([w for w, _ in parts])
    liability = np.concatenate([l for _, l in parts])
    return TerminalSample(wealth=wealth, liability=liability, state_x=wealth - offsets[horizon])
