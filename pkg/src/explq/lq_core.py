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


Model definition and exact backward recursion for the
entropy-regularized discrete-time LQ problem.

The state is s = (x, y) with

    x' = A x + B u + (C x + D u) w_x
    y' = (Ā + C̄ w_y) y,        corr(w_x, w_y) = ρ,

and the objective is E[s_Tᵀ Q_T s_T] + λ Σ_t ∫ π_t ln π_t du.
The value function is quadratic, J(t, s) = sᵀ P_t s + c_t, and the
optimal policy at each period is Gaussian with mean -G_t⁻¹H_tᵀ s
and covariance (λ/2) G_t⁻¹.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import NamedTuple, Union

import math
import threading
from logging import DEBUG, getLogger

import numpy as np
from cachetools import LRUCache, cached
from pydantic import BaseModel, Field, field_validator, model_validator

from .settings import SETTINGS, TRACE

_LOG = getLogger(__name__)

# Absolute tolerance (scaled by the matrix magnitude) for symmetry checks
SYMMETRY_TOL = 1e-12

_LOG_2PI_E = math.log(2.0 * math.pi * math.e)

Matrix2 = tuple[tuple[float, float], tuple[float, float]]
FloatOrArray = Union[float, np.ndarray]


class NumericalError(ArithmeticError):
    """Base class of numerical failures (singular or indefinite systems, divergence)."""


class SingularGainError(NumericalError):
    """The control weight G_t is singular or not positive definite at period t."""

    def __init__(self, t: int, detail: str) -> None:
        self.t = t
        self.detail = detail
        super().__init__(f"Control weight G_{t} is singular or indefinite at period t={t}: {detail}")


class ModelParams(BaseModel):
    """Coefficients of the controlled system and the exploratory objective."""

    # frozen=True makes this hashable which enables caching
    model_config = {"frozen": True, "extra": "forbid"}

    a: float = Field(description="State drift A.")
    b: tuple[float, ...] = Field(min_length=1, description="Control drift B (row vector of length m).")
    c: float = Field(default=0.0, description="State diffusion C.")
    d: tuple[float, ...] = Field(min_length=1, description="Control diffusion D (row vector of length m).")
    a_bar: float = Field(description="Drift Ā of the uncontrolled state.")
    c_bar: float = Field(default=0.0, description="Diffusion C̄ of the uncontrolled state.")
    rho: float = Field(default=0.0, ge=-1.0, le=1.0, description="Correlation ρ of the two noises.")
    lam: float = Field(gt=0.0, description="Temperature λ of the entropy regularizer.")
    q_terminal: Matrix2 = Field(default=((1.0, -1.0), (-1.0, 1.0)), description="Terminal weight Q_T.")

    @field_validator("b", "d", mode="before")
    @classmethod
    def _scalar_to_row(cls, v: object) -> object:
        if isinstance(v, (int, float)):
            return (float(v),)
        if isinstance(v, np.ndarray):
            return tuple(float(e) for e in v.ravel())
        return v

    @field_validator("q_terminal")
    @classmethod
    def _check_q_symmetric(cls, v: Matrix2) -> Matrix2:
        if v[0][1] != v[1][0]:
            raise ValueError(f"q_terminal must be symmetric, got {v}")
        return v

    @model_validator(mode="after")
    def _check_dimensions(self) -> "ModelParams":
        if len(self.b) != len(self.d):
            raise ValueError(f"b and d must have the same length (got {len(self.b)} and {len(self.d)})")
        return self

    @property
    def m(self) -> int:
        """Control dimension."""
        return len(self.b)

    @property
    def b_vec(self) -> np.ndarray:
        return np.asarray(self.b, dtype=float)

    @property
    def d_vec(self) -> np.ndarray:
        return np.asarray(self.d, dtype=float)

    @property
    def q_matrix(self) -> np.ndarray:
        return np.asarray(self.q_terminal, dtype=float)


class StateVec(NamedTuple):
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


class QuadraticValue(NamedTuple):
    """J(x, y) = (x, y) p (x, y)ᵀ + c."""

    p: np.ndarray
    c: float

    def evaluate(self, x: FloatOrArray, y: FloatOrArray) -> FloatOrArray:
        p = self.p
        return p[0, 0] * x * x + 2.0 * p[0, 1] * x * y + p[1, 1] * y * y + self.c

    @classmethod
    def terminal(cls, params: ModelParams) -> "QuadraticValue":
        return cls(p=params.q_matrix, c=0.0)


class RiccatiStage(NamedTuple):
    t: int
    p: np.ndarray
    f: np.ndarray
    h: np.ndarray
    g: np.ndarray
    # G_t⁻¹ H_tᵀ, so that the policy mean is -gain @ (x, y)
    gain: np.ndarray
    entropy_const: float


class PolicyEntry(NamedTuple):
    gain: np.ndarray
    cov: np.ndarray

    def mean(self, x: float, y: float) -> np.ndarray:
        return -(self.gain @ np.array([x, y], dtype=float))


class GaussianPolicy(NamedTuple):
    """
    Per-period linear Gaussian feedback law.
    `gains` has shape (T, m, 2) and `covs` shape (T, m, m);
    the control at period t is N(-gains[t] @ (x, y), covs[t]).
    Zero covariances describe degenerate (deterministic) policies.
    """

    gains: np.ndarray
    covs: np.ndarray

    @property
    def horizon(self) -> int:
        return self.gains.shape[0]

    @property
    def m(self) -> int:
        return self.gains.shape[1]

    def entry(self, t: int) -> PolicyEntry:
        if not 0 <= t < self.horizon:
            raise ValueError(f"Period t={t} outside policy horizon 0..{self.horizon - 1}")
        return PolicyEntry(gain=self.gains[t], cov=self.covs[t])

    def mean(self, t: int, x: float, y: float) -> np.ndarray:
        return self.entry(t).mean(x, y)

    @classmethod
    def from_entries(cls, gains: np.ndarray, covs: np.ndarray) -> "GaussianPolicy":
        gains = np.asarray(gains, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if gains.ndim != 3 or gains.shape[2] != 2:
            raise ValueError(f"gains must have shape (T, m, 2), got {gains.shape}")
        t_len, m = gains.shape[0], gains.shape[1]
        if covs.shape != (t_len, m, m):
            raise ValueError(f"covs must have shape {(t_len, m, m)}, got {covs.shape}")
        for t in range(t_len):
            _check_symmetric(covs[t], f"covs[{t}]")
            if np.linalg.eigvalsh(covs[t]).min() < -SYMMETRY_TOL:
                raise ValueError(f"covs[{t}] is not positive semi-definite")
        return cls(gains=gains, covs=covs)

    @classmethod
    def degenerate(cls, gains: np.ndarray) -> "GaussianPolicy":
        """Deterministic linear feedback (zero covariance)."""
        gains = np.asarray(gains, dtype=float)
        m = gains.shape[1]
        return cls.from_entries(gains, np.zeros((gains.shape[0], m, m)))


class RiccatiSolution(NamedTuple):
    params: ModelParams
    horizon: int
    # Ordered t = T-1, ..., 0
    stages: tuple[RiccatiStage, ...]

    def stage(self, t: int) -> RiccatiStage:
        if not 0 <= t < self.horizon:
            raise ValueError(f"No Riccati stage for period t={t} (horizon {self.horizon})")
        return self.stages[self.horizon - 1 - t]

    def value_matrix(self, t: int) -> np.ndarray:
        if t == self.horizon:
            return self.params.q_matrix
        return self.stage(t).p

    def value_const(self, t: int) -> float:
        if t == self.horizon:
            return 0.0
        return self.stage(t).entropy_const

    def value(self, t: int) -> QuadraticValue:
        return QuadraticValue(p=self.value_matrix(t), c=self.value_const(t))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_symmetric(p: np.ndarray, name: str = "p") -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {p.shape}")
    scale = 1.0 + float(np.abs(p).max(initial=0.0))
    if not np.allclose(p, p.T, rtol=0.0, atol=SYMMETRY_TOL * scale):
        raise ValueError(f"{name} must be symmetric, got {p.tolist()}")
    return p


def spd_logdet(g: np.ndarray, t: int) -> float:
    """
    Log-determinant of the control weight G_t,
    raising SingularGainError unless G_t is positive definite.
    """
    if not np.all(np.isfinite(g)):
        raise SingularGainError(t, "non-finite entries")
    eig = np.linalg.eigvalsh(g)
    if eig[0] < SETTINGS.PIVOT_TOL:
        raise SingularGainError(t, f"smallest eigenvalue {eig[0]:.3e} below {SETTINGS.PIVOT_TOL:.0e}")
    return float(np.log(eig).sum())


def quadratic_coefficients(p: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Coefficients (F, H, G) of the one-step expectation

        E[s'ᵀ P s' | s, u] = sᵀ F s + 2 sᵀ H u + uᵀ G u

    for a fixed control u. F is 2×2, H is 2×m and G is m×m.
    """
    a, c, a_bar, c_bar, rho = params.a, params.c, params.a_bar, params.c_bar, params.rho
    b, d = params.b_vec, params.d_vec
    f11 = (a * a + c * c) * p[0, 0]
    f12 = (a * a_bar + rho * c * c_bar) * p[0, 1]
    f22 = (a_bar * a_bar + c_bar * c_bar) * p[1, 1]
    f = np.array([[f11, f12], [f12, f22]])
    h = np.vstack((p[0, 0] * (a * b + c * d), p[0, 1] * (a_bar * b + rho * c_bar * d)))
    g = p[0, 0] * (np.outer(b, b) + np.outer(d, d))
    return f, h, g


def propagate_quadratic(
    p: np.ndarray,
    params: ModelParams,
    state: StateVec,
    u_mean: np.ndarray,
    u_second_moment: np.ndarray,
) -> float:
    """
    Exact conditional expectation E[s_{t+1}ᵀ P s_{t+1} | s_t = state] when the
    control has the given mean vector and (uncentred) second-moment matrix.
    """
    p = _check_symmetric(p)
    m = params.m
    u_mean = np.asarray(u_mean, dtype=float).reshape(m)
    u_second_moment = np.asarray(u_second_moment, dtype=float).reshape(m, m)
    centred = u_second_moment - np.outer(u_mean, u_mean)
    if np.linalg.eigvalsh((centred + centred.T) / 2.0).min() < -SYMMETRY_TOL * (1.0 + np.abs(u_second_moment).max()):
        raise ValueError("u_second_moment must dominate u_mean u_meanᵀ")
    f, h, g = quadratic_coefficients(p, params)
    s = state.as_array()
    return float(s @ f @ s + 2.0 * s @ h @ u_mean + np.trace(g @ u_second_moment))


def gaussian_neg_entropy(cov: Union[float, np.ndarray]) -> float:
    """∫ π ln π du = -(1/2) ln((2πe)^m |Σ|) for π = N(μ, Σ)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    cov = _check_symmetric(cov, "cov")
    eig = np.linalg.eigvalsh(cov)
    if eig[0] <= 0.0:
        raise ValueError(f"cov must be positive definite (smallest eigenvalue {eig[0]:.3e})")
    m = cov.shape[0]
    return -0.5 * (m * _LOG_2PI_E + float(np.log(eig).sum()))


def bellman_functional(
    p_next: np.ndarray,
    c_next: float,
    params: ModelParams,
    state: StateVec,
    mean: np.ndarray,
    cov: np.ndarray,
) -> float:
    """
    One-step free energy E[J(t+1, s_{t+1})] + λ ∫ π ln π of the
    Gaussian candidate π = N(mean, cov) at `state`,
    where J(t+1) = sᵀ p_next s + c_next.
    """
    mean = np.asarray(mean, dtype=float).reshape(params.m)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    second = cov + np.outer(mean, mean)
    return propagate_quadratic(p_next, params, state, mean, second) + c_next + params.lam * gaussian_neg_entropy(cov)


def entropy_increment(params: ModelParams, logdet_g: float) -> float:
    """(λ/2) ln[(1/(πλ))^m |G_t|], the constant the optimal step adds at period t."""
    lam = params.lam
    return 0.5 * lam * (params.m * math.log(1.0 / (math.pi * lam)) + logdet_g)


def bellman_step(
    p_next: np.ndarray, c_next: float, params: ModelParams, t: int
) -> tuple[RiccatiStage, np.ndarray, float]:
    """Minimise the one-step free energy against J(t+1) = sᵀ p_next s + c_next."""
    f, h, g = quadratic_coefficients(p_next, params)
    logdet = spd_logdet(g, t)
    gain = np.linalg.solve(g, h.T)
    p = f - h @ gain
    p = (p + p.T) / 2.0
    const = c_next + entropy_increment(params, logdet)
    stage = RiccatiStage(
        t=t,
        p=_readonly(p),
        f=_readonly(f),
        h=_readonly(h),
        g=_readonly(g),
        gain=_readonly(gain),
        entropy_const=const,
    )
    return stage, p, const


_RICCATI_LOCK = threading.Lock()


@cached(LRUCache(maxsize=SETTINGS.CACHE_SIZE), lock=_RICCATI_LOCK)
def riccati_backward(params: ModelParams, horizon: int) -> RiccatiSolution:
    """
    Backward recursion P_t = F_t - H_t G_t⁻¹ H_tᵀ from P_T = Q_T.
    Results are memoised on the (frozen) parameters; their arrays are read-only.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    _LOG.debug("Riccati recursion, horizon %d, params: %s", horizon, params)
    p = params.q_matrix
    const = 0.0
    stages: list[RiccatiStage] = []
    for t in range(horizon - 1, -1, -1):
        stage, p, const = bellman_step(p, const, params, t)
        if _LOG.isEnabledFor(TRACE):
            _LOG.log(TRACE, "t=%d P=%s G=%s const=%.6g", t, p.tolist(), stage.g.tolist(), const)
        stages.append(stage)
    if _LOG.isEnabledFor(DEBUG):
        _LOG.debug("P_0 = %s, value constant %.10g", p.tolist(), const)
    return RiccatiSolution(params=params, horizon=horizon, stages=tuple(stages))


def optimal_value(solution: RiccatiSolution, t: int, state: StateVec) -> float:
    if not 0 <= t <= solution.horizon:
        raise ValueError(f"Period t={t} outside 0..{solution.horizon}")
    return float(solution.value(t).evaluate(state.x, state.y))


def optimal_policy(solution: RiccatiSolution, t: int) -> PolicyEntry:
    stage = solution.stage(t)
    cov = 0.5 * solution.params.lam * np.linalg.inv(stage.g)
    return PolicyEntry(gain=stage.gain, cov=(cov + cov.T) / 2.0)


def optimal_gaussian_policy(solution: RiccatiSolution) -> GaussianPolicy:
    """The optimal policy for every period 0..T-1."""
    entries = [optimal_policy(solution, t) for t in range(solution.horizon)]
    return GaussianPolicy(
        gains=np.stack([e.gain for e in entries]),
        covs=np.stack([e.cov for e in entries]),
    )
