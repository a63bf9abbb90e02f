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


Run configuration: line-oriented `key = value` files.

    # Monthly rebalancing over one year
    dt = 1/12
    horizon_years = 1
    d = 1.4

Missing keys take the defaults below. Real-valued keys also accept
exact fractions, and `none` clears an optional key.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import Any, Literal, Optional

from fractions import Fraction
from logging import getLogger
from pathlib import Path

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .market import AnnualMarket, DiscreteMarket, discretize, period_count
from .mv_alm import MVProblem
from .policy_iter import SeedPolicy
from .rl import ThetaVector, TrainConfig
from .settings import SHARPE_BASE, ConfigError

_LOG = getLogger(__name__)

# Config keys that differ from the field names
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {v: k for k, v in _KEY_ALIASES.items()}
_THETA_KEYS = ("theta1", "theta2", "theta3", "theta4", "theta5")


class RunConfig(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    # Market
    rf_annual: float = Field(default=1.05, gt=1.0, description="Gross annual risk-free return.")
    risky_return_annual: float = Field(default=1.4, description="Gross annual return of the risky asset.")
    excess_return_annual: Optional[float] = Field(
        default=0.25, description="Annual excess return B ('none' uses risky - rf)."
    )
    risky_vol_annual: float = Field(default=0.2, ge=0.0, description="Annual volatility of the risky asset.")
    liability_growth_annual: float = Field(default=1.1, description="Gross annual liability growth.")
    liability_vol_annual: float = Field(default=0.1, ge=0.0, description="Annual liability volatility.")
    rho: float = Field(default=0.2, description="Asset/liability noise correlation.")
    dt: float = Field(default=1.0, gt=0.0, description="Rebalancing period in years.")
    horizon_years: float = Field(default=1.0, gt=0.0, description="Investment horizon in years.")
    # Objective and mean-variance problem
    lam: float = Field(default=0.1, gt=0.0, description="Temperature λ.")
    d: float = Field(default=1.4, description="Target expected terminal surplus.")
    gamma: Optional[float] = Field(default=None, description="Fixed Lagrange multiplier (default: calibrated).")
    x0: float = Field(default=1.0, description="Initial wealth.")
    l0: float = Field(default=0.1, description="Initial liability.")
    # Training
    eta: float = Field(default=1e-20, ge=0.0)
    eta_gamma: float = Field(default=0.05, ge=0.0)
    eta_normalized: float = Field(default=1e-3, gt=0.0)
    gradient_profile: Literal["sgd", "normalized"] = "sgd"
    residual_gradient: Literal["full", "semi"] = "full"
    gamma_init: Optional[float] = Field(default=None, description="Initial γ of training (default d).")
    max_loss: float = Field(default=1e6, gt=0.0, description="Per-episode Σδ² treated as divergence.")
    episodes: int = Field(default=5000, ge=1)
    batch: int = Field(default=50, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    theta_init_spread: float = Field(default=0.2, ge=0.0, lt=1.0)
    theta1: Optional[float] = None
    theta2: Optional[float] = None
    theta3: Optional[float] = None
    theta4: Optional[float] = None
    theta5: Optional[float] = None
    # Seed policy of the improvement iteration
    seed_k1: float = 0.0
    seed_k2: float = 0.0
    seed_l: float = Field(default=1.0, gt=0.0)
    seed_n: float = Field(default=1.0, gt=0.0)
    # Evaluation and output
    eval_episodes: int = Field(default=100_000, ge=2)
    sharpe_base: float = SHARPE_BASE
    output_dir: Optional[Path] = None
    label: str = "run"

    @field_validator("rho")
    @classmethod
    def _check_rho(cls, v: float) -> float:
        if abs(v) > 1.0:
            raise ValueError(f"|rho| <= 1 is required, got rho = {v}")
        return v

    @model_validator(mode="after")
    def _check_theta(self) -> "RunConfig":
        given = [k for k in _THETA_KEYS if getattr(self, k) is not None]
        if given and len(given) != len(_THETA_KEYS):
            missing = sorted(set(_THETA_KEYS) - set(given))
            raise ValueError(f"theta1..theta5 must be given together, missing: {', '.join(missing)}")
        if self.episodes < self.batch:
            raise ValueError(f"episodes ({self.episodes}) must be at least batch ({self.batch})")
        return self

    def annual_market(self) -> AnnualMarket:
        return AnnualMarket(
            rf_annual=self.rf_annual,
            risky_return_annual=self.risky_return_annual,
            excess_return_annual=self.excess_return_annual,
            risky_vol_annual=self.risky_vol_annual,
            liability_growth_annual=self.liability_growth_annual,
            liability_vol_annual=self.liability_vol_annual,
            rho=self.rho,
            dt=self.dt,
            horizon_years=self.horizon_years,
        )

    def market(self) -> DiscreteMarket:
        return discretize(self.annual_market(), self.lam)

    def mv_problem(self, gamma: Optional[float] = None) -> MVProblem:
        g = gamma if gamma is not None else (self.gamma if self.gamma is not None else 0.0)
        return MVProblem(d=self.d, gamma=g, x0=self.x0, l0=self.l0)

    def seed_policy(self) -> SeedPolicy:
        return SeedPolicy(k=(self.seed_k1, self.seed_k2), l_scale=self.seed_l, n_base=self.seed_n)

    def train_config(self) -> TrainConfig:
        theta_init = None
        if self.theta1 is not None:
            start = next((g for g in (self.gamma_init, self.gamma) if g is not None), self.d)
            theta_init = ThetaVector.from_array([getattr(self, k) for k in _THETA_KEYS], gamma=start)
        return TrainConfig(
            eta=self.eta,
            eta_gamma=self.eta_gamma,
            eta_normalized=self.eta_normalized,
            gradient_profile=self.gradient_profile,
            residual_gradient=self.residual_gradient,
            episodes=self.episodes,
            batch=self.batch,
            d=self.d,
            seed=self.seed,
            theta_init=theta_init,
            gamma_init=self.gamma_init,
            max_loss=self.max_loss,
            init_spread=self.theta_init_spread,
            lam=self.lam,
            x0=self.x0,
            l0=self.l0,
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with the given (non-None) fields replaced, validated again."""
        update = {k: v for k, v in overrides.items() if v is not None}
        if not update:
            return self
        return RunConfig.model_validate({**self.model_dump(), **update})


_REAL_FIELDS = frozenset(
    name
    for name, info in RunConfig.model_fields.items()
    if info.annotation in (float, Optional[float])  # pyright: ignore[reportUnknownMemberType]
)


def _convert(field: str, raw: str) -> object:
    if raw.lower() == "none":
        return None
    if field in _REAL_FIELDS:
        try:
            return float(Fraction(raw))
        except (ValueError, ZeroDivisionError):
            # Leave it to pydantic to report
            return raw
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; errors carry the offending line number."""
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    unknown: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"expected 'key = value', got {content!r}", lineno)
        key, raw = (part.strip() for part in content.split("=", 1))
        key = key.lower()
        if not key or not raw:
            raise ConfigError(f"expected 'key = value', got {content!r}", lineno)
        field = _KEY_ALIASES.get(key, key)
        if field not in RunConfig.model_fields:
            unknown.append(f"{key} (line {lineno})")
            continue
        if field in values:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[field]})", lineno)
        values[field] = _convert(field, raw)
        lines[field] = lineno
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}", None)

    try:
        config = RunConfig.model_validate(values)
    except ValidationError as e:
        err = e.errors()[0]
        field = str(err["loc"][0]) if err["loc"] else ""
        key = _FIELD_KEYS.get(field, field)
        where = f"{key}: " if key else ""
        raise ConfigError(f"{where}{err['msg']}", lines.get(field)) from e

    try:
        period_count(config.horizon_years, config.dt)
    except ConfigError as e:
        raise ConfigError(e.message, lines.get("dt", lines.get("horizon_years"))) from e
    _LOG.debug("Parsed config: %s", config.model_dump(exclude_defaults=True) or "<default>")
    return config


def load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config(text)
