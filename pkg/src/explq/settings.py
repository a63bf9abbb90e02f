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


Shared settings for the Explq package.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import Optional

from logging import getLogger
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

_LOG = getLogger(__package__)
TRACE = 5

# Excess-return baseline of the reported Sharpe ratio (annual risk-free rate 5%)
SHARPE_BASE = 0.05


class ConfigError(ValueError):
    """Invalid run configuration, optionally tied to a line of the config file."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.message = message
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Settings(BaseSettings):
    """
    Settings for Explq.
    Attributes are read from environment variables or `.env` file.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="EXPLQ_",
        case_sensitive=False,
        # Run validators when attributes are modified
        validate_assignment=True,
        extra="ignore",
    )

    OUT: Optional[Path] = Field(
        default=None,
        description=(
            "Where to write output CSV files when neither --out "
            "nor the output_dir config key is given."
        ),
    )
    LOG_LEVEL: str = Field(default="WARNING", description="Log level of the command line interface.")
    WORKERS: int = Field(default=1, ge=1, description="Worker threads for Monte Carlo evaluation.")
    BLOCK_SIZE: int = Field(
        default=4096,
        ge=1,
        description="Episodes per seeded simulation block (fixed, so results don't depend on WORKERS).",
    )
    CACHE_SIZE: int = Field(
        default=64, gt=-1, description="Max number of memoised Riccati solutions and theta schedules."
    )
    PIVOT_TOL: float = Field(
        default=1e-12, gt=0, description="Smallest admissible eigenvalue of the control weight G_t."
    )

    def get_out_dir(self) -> Path:
        """
        Return directory for output files.
        If no output dir was set, use `./explq_out`.
        """
        if self.OUT is None:
            self.OUT = Path.cwd() / "explq_out"  # pyright: ignore[reportConstantRedefinition]
        self.OUT.mkdir(parents=True, exist_ok=True)
        return self.OUT


# Read settings from environment
SETTINGS = Settings()
