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


Model-free learning of the asset-liability policy.

With n = T - t periods to go the value is parameterized as

    J(t, x, l) = θ₁ⁿ x² - 2 θ₂ⁿ x l + (θ₅ⁿ - θ₃² θ₄ Σ_{k<n} r^k θ₅^(n-1-k)) l²
                 - (λ/2) n ln θ₄ + (λ/4) (n-1) n ln θ₁ + (λ/2) n ln(1/(πλ)),

r = θ₂²/θ₁, and the policy as

    u ~ N(-sqrt((A² - θ₁) θ₄) x + (θ₂/θ₁)^(n-1) θ₃ θ₄ l,  (λ/2) θ₄ θ₁^-(n-1)).

At θ* = (A²D²/S, A(ĀD² - ρBC̄D)/S, ĀB + ρC̄D, 1/S, Ā² + C̄²), S = B² + D²,
both coincide with the optimum (for AB > 0). Note the minus sign on the
sum in the l² coefficient.

θ is fitted by gradient descent on the squared Bellman residuals of
single episodes; γ is corrected every batch of episodes so that the
sample mean of terminal surplus tracks the target d.

The full residual gradient also differentiates J^θ(t+1, s_{t+1}). Its
expectation at θ* is Σ Cov(J(t+1), ∇J(t+1)) ≠ 0, so descent on single
episodes drifts away from θ*. The semi-gradient holds the bootstrapped
target J^θ(t+1, s_{t+1}) fixed and has zero mean at θ*, since there
E[δ_t | s_t] = 0.

"""

# We dont import annotations from __future__ here
# due to pydantic
from typing import Literal, NamedTuple, Optional, Union

import math
import threading
from collections.abc import Sequence
from logging import getLogger

import numpy as np
from cachetools import LRUCache, cached
from pydantic import BaseModel, Field, field_validator, model_validator

from .lq_core import GaussianPolicy, ModelParams, NumericalError
from .market import episode_rng, seeded_rng, simulate_episode
from .mv_alm import MVProblem, expected_surplus_under_policy
from .settings import SETTINGS, TRACE

_LOG = getLogger(__name__)

MAX_HALVINGS = 60

TRAIN_CSV_HEADER = (
    "episode",
    "terminal_wealth",
    "terminal_liability",
    "gamma",
    "bellman_sq_error",
    "theta1",
    "theta2",
    "theta3",
    "theta4",
    "theta5",
)

_LOG_2PI_E = math.log(2.0 * math.pi * math.e)
# Stream key for drawing the initial θ
_INIT_STREAM = 2


class DivergenceError(NumericalError):
    """Training left the admissible parameter domain, or its loss or state blew up."""


class ThetaVector(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    th1: float = Field(gt=0.0, allow_inf_nan=False)
    th2: float = Field(allow_inf_nan=False)
    th3: float = Field(allow_inf_nan=False)
    th4: float = Field(gt=0.0, allow_inf_nan=False)
    th5: float = Field(gt=0.0, allow_inf_nan=False)
    gamma: float = Field(default=0.0, allow_inf_nan=False, description="Lagrange multiplier γ.")

    @field_validator("th2")
    @classmethod
    def _nonzero(cls, v: float) -> float:
        if v == 0.0:
            raise ValueError("th2 must be non-zero (it is the base of the liability gain ratio)")
        return v

    def as_array(self) -> np.ndarray:
        return np.array([self.th1, self.th2, self.th3, self.th4, self.th5])

    @classmethod
    def from_array(cls, arr: Union[np.ndarray, Sequence[float]], gamma: float = 0.0) -> "ThetaVector":
        th1, th2, th3, th4, th5 = (float(v) for v in arr)
        return cls(th1=th1, th2=th2, th3=th3, th4=th4, th5=th5, gamma=gamma)


class TrainConfig(BaseModel):
    model_config = {"frozen": True, "extra": "forbid"}

    eta: float = Field(default=1e-20, ge=0.0, description="Learning rate η of θ.")
    eta_gamma: float = Field(default=0.05, ge=0.0, description="Learning rate η_γ of γ.")
    eta_normalized: float = Field(default=1e-3, gt=0.0, description="Step size of the normalized profile.")
    gradient_profile: Literal["sgd", "normalized"] = Field(
        default="sgd",
        description=(
            "'sgd': θ -= η g. 'normalized': ln|θᵢ| -= η_n hᵢ / (1 + |hᵢ|) with hᵢ = θᵢ gᵢ,"
            " which keeps every sign and moves each θᵢ by at most a factor e^η_n."
        ),
    )
    residual_gradient: Literal["full", "semi"] = Field(
        default="full",
        description="'full': g = ∂L/∂θ. 'semi': J^θ(t+1, s_{t+1}) is held fixed as the target.",
    )
    episodes: int = Field(default=5000, ge=1, description="Number of training episodes M̃.")
    batch: int = Field(default=50, ge=1, description="Episodes Ñ between γ updates.")
    d: float = Field(default=1.4, description="Target expected terminal surplus.")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Seed of all random streams.")
    theta_init: Optional[ThetaVector] = Field(
        default=None, description="Initial θ and γ (default: perturbed ground truth with γ = gamma_init)."
    )
    gamma_init: Optional[float] = Field(
        default=None, allow_inf_nan=False, description="Initial γ when theta_init is not given (default d)."
    )
    max_loss: float = Field(
        default=1e6, gt=0.0, description="Σ δ_t² of one episode above which training is declared divergent."
    )
    init_spread: float = Field(
        default=0.2, ge=0.0, lt=1.0, description="Relative perturbation of the default initial θ."
    )
    lam: float = Field(default=0.1, gt=0.0, description="Temperature λ.")
    x0: float = Field(default=1.0, description="Initial wealth.")
    l0: float = Field(default=0.1, description="Initial liability.")

    @model_validator(mode="after")
    def _check_batch(self) -> "TrainConfig":
        if self.episodes < self.batch:
            raise ValueError(f"episodes ({self.episodes}) must be at least batch ({self.batch})")
        return self


class TrainLogRow(NamedTuple):
    episode: int
    terminal_wealth: float
    terminal_liability: float
    gamma: float
    bellman_sq_error: float
    theta1: float
    theta2: float
    theta3: float
    theta4: float
    theta5: float


class TrainLog(NamedTuple):
    rows: tuple[TrainLogRow, ...]

    def terminal_surplus(self) -> np.ndarray:
        return np.array([r.terminal_wealth - r.terminal_liability for r in self.rows])

    def losses(self) -> np.ndarray:
        return np.array([r.bellman_sq_error for r in self.rows])

    def loss_deciles(self) -> tuple[float, float]:
        """Mean squared Bellman error over the first and the last 10% of episodes."""
        losses = self.losses()
        k = max(1, len(losses) // 10)
        return float(losses[:k].mean()), float(losses[-k:].mean())


class ThetaTerms(NamedTuple):
    """
    Everything J^θ and π^θ need, indexed by t = 0..T:
    `coeffs` (T+1, 4) holds (P11, P12, P22, const) and `dcoeffs`
    (T+1, 4, 5) their θ-derivatives. `variance`, `negent`, `dnegent`
    and `ratio_pow` cover t = 0..T-1.
    """

    coeffs: np.ndarray
    dcoeffs: np.ndarray
    variance: np.ndarray
    negent: np.ndarray
    dnegent: np.ndarray
    ratio_pow: np.ndarray

    def values(self, x: np.ndarray, l: np.ndarray) -> np.ndarray:
        """J^θ(t, x_t, l_t) along a path of T+1 states."""
        return np.einsum("tk,tk->t", _features(x, l), self.coeffs)

    def value(self, t: int, x: float, l: float) -> float:
        p11, p12, p22, const = self.coeffs[t]
        return float(p11 * x * x + 2.0 * p12 * x * l + p22 * l * l + const)


def _features(x: np.ndarray, l: np.ndarray) -> np.ndarray:
    return np.column_stack((x * x, 2.0 * x * l, l * l, np.ones_like(x)))


def _reversed(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr[::-1])
    out.setflags(write=False)
    return out


_THETA_LOCK = threading.Lock()


@cached(LRUCache(maxsize=SETTINGS.CACHE_SIZE), lock=_THETA_LOCK)
def theta_terms(theta: ThetaVector, horizon: int, lam: float) -> ThetaTerms:
    """Coefficients of J^θ, the entropy of π^θ and their θ-derivatives for every period."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    th1, th2, th3, th4, th5 = theta.as_array()
    r = th2 * th2 / th1
    kappa = th3 * th3 * th4
    log_entropy = math.log(1.0 / (math.pi * lam))
    log_th1, log_th4 = math.log(th1), math.log(th4)

    coeffs = np.empty((horizon + 1, 4))
    dcoeffs = np.zeros((horizon + 1, 4, 5))
    variance = np.empty(horizon)
    negent = np.empty(horizon)
    dnegent = np.zeros((horizon, 5))
    ratio_pow = np.empty(horizon)

    # θᵢⁿ and θᵢ^(n-1); the (n-1) powers only enter multiplied by n
    pow1 = pow2 = pow5 = 1.0
    prev1 = prev2 = prev5 = 0.0
    r_pow, r_prev = 1.0, 0.0
    ratio = 1.0
    # s(n) = Σ_{k<n} r^k θ₅^(n-1-k) and its partials in r and θ₅
    s = ds_dr = ds_d5 = 0.0
    for n in range(horizon + 1):
        coeffs[n] = (pow1, -pow2, pow5 - kappa * s, 0.5 * lam * n * (log_entropy - log_th4))
        coeffs[n, 3] += 0.25 * lam * (n - 1) * n * log_th1
        dcoeffs[n, 0, 0] = n * prev1
        dcoeffs[n, 1, 1] = -n * prev2
        dcoeffs[n, 2] = (
            kappa * ds_dr * r / th1,
            -kappa * ds_dr * 2.0 * th2 / th1,
            -2.0 * th3 * th4 * s,
            -th3 * th3 * s,
            n * prev5 - kappa * ds_d5,
        )
        dcoeffs[n, 3, 0] = 0.25 * lam * (n - 1) * n / th1
        dcoeffs[n, 3, 3] = -0.5 * lam * n / th4
        if n >= 1:
            # π^θ at t = T - n uses θ₁^(n-1) = prev1
            var = 0.5 * lam * th4 / prev1
            variance[n - 1] = var
            negent[n - 1] = -0.5 * (_LOG_2PI_E + math.log(var))
            dnegent[n - 1, 0] = 0.5 * (n - 1) / th1
            dnegent[n - 1, 3] = -0.5 / th4
            ratio_pow[n - 1] = ratio
            ratio *= th2 / th1
        s, ds_dr, ds_d5 = th5 * s + r_pow, th5 * ds_dr + n * r_prev, s + th5 * ds_d5
        prev1, prev2, prev5 = pow1, pow2, pow5
        pow1, pow2, pow5 = pow1 * th1, pow2 * th2, pow5 * th5
        r_prev, r_pow = r_pow, r_pow * r
    return ThetaTerms(
        coeffs=_reversed(coeffs),
        dcoeffs=_reversed(dcoeffs),
        variance=_reversed(variance),
        negent=_reversed(negent),
        dnegent=_reversed(dnegent),
        ratio_pow=_reversed(ratio_pow),
    )


def ground_truth_theta(params: ModelParams, gamma: float = 0.0) -> ThetaVector:
    """The θ at which J^θ and π^θ are the optimal value and policy."""
    if params.m != 1 or params.c != 0.0:
        raise ValueError(f"θ parameterization needs a scalar control and C = 0 (m={params.m}, C={params.c})")
    a, b, d = params.a, params.b[0], params.d[0]
    a_bar, c_bar, rho = params.a_bar, params.c_bar, params.rho
    s = b * b + d * d
    return ThetaVector(
        th1=a * a * d * d / s,
        th2=a * (a_bar * d * d - rho * b * c_bar * d) / s,
        th3=a_bar * b + rho * c_bar * d,
        th4=1.0 / s,
        th5=a_bar * a_bar + c_bar * c_bar,
        gamma=gamma,
    )


def theta_in_domain(arr: np.ndarray, drift: float) -> bool:
    """θ₁, θ₄, θ₅ > 0, θ₂ ≠ 0 and A² - θ₁ >= 0."""
    th1, th2, _, th4, th5 = arr
    return bool(
        np.all(np.isfinite(arr)) and th1 > 0.0 and th4 > 0.0 and th5 > 0.0 and th2 != 0.0 and drift * drift >= th1
    )


def initial_theta(params: ModelParams, spread: float, rng: np.random.Generator, gamma: float = 0.0) -> ThetaVector:
    """Ground truth perturbed by a factor (1 + u), u ~ U[-spread, spread], redrawn until admissible."""
    truth = ground_truth_theta(params).as_array()
    for _ in range(1000):
        cand = truth * (1.0 + rng.uniform(-spread, spread, size=5))
        if theta_in_domain(cand, params.a):
            return ThetaVector.from_array(cand, gamma)
    raise NumericalError(f"Could not draw an admissible initial θ with spread {spread}")


def value_theta(theta: ThetaVector, t: int, x: float, l: float, horizon: int, lam: float) -> float:
    if not 0 <= t <= horizon:
        raise ValueError(f"Period t={t} outside 0..{horizon}")
    return theta_terms(theta, horizon, lam).value(t, x, l)


def _gain_x(theta: ThetaVector, drift: float) -> float:
    radicand = (drift * drift - theta.th1) * theta.th4
    if radicand < 0.0:
        raise ValueError(f"(A² - θ₁) θ₄ = {radicand:.6g} < 0 with A = {drift}, θ₁ = {theta.th1}")
    return math.sqrt(radicand)


def policy_theta(
    theta: ThetaVector, t: int, x: float, l: float, horizon: int, lam: float, drift: float
) -> tuple[float, float]:
    """Mean and variance of π^θ at (t, x, l)."""
    if not 0 <= t < horizon:
        raise ValueError(f"Period t={t} outside 0..{horizon - 1}")
    terms = theta_terms(theta, horizon, lam)
    mean = -_gain_x(theta, drift) * x + terms.ratio_pow[t] * theta.th3 * theta.th4 * l
    return float(mean), float(terms.variance[t])


def theta_policy(theta: ThetaVector, horizon: int, lam: float, drift: float) -> GaussianPolicy:
    """π^θ for every period."""
    terms = theta_terms(theta, horizon, lam)
    gains = np.empty((horizon, 1, 2))
    gains[:, 0, 0] = _gain_x(theta, drift)
    gains[:, 0, 1] = -terms.ratio_pow * theta.th3 * theta.th4
    return GaussianPolicy(gains=gains, covs=terms.variance.reshape(horizon, 1, 1).copy())


def bellman_residuals(theta: ThetaVector, x: np.ndarray, l: np.ndarray, horizon: int, lam: float) -> np.ndarray:
    """δ_t = J^θ(t+1, s_{t+1}) - J^θ(t, s_t) + λ ∫ π^θ_t ln π^θ_t along a path of shifted states."""
    x, l = np.asarray(x, dtype=float), np.asarray(l, dtype=float)
    if x.shape != (horizon + 1,) or l.shape != (horizon + 1,):
        raise ValueError(f"Paths must have {horizon + 1} states, got {x.shape} and {l.shape}")
    terms = theta_terms(theta, horizon, lam)
    values = terms.values(x, l)
    return values[1:] - values[:-1] + lam * terms.negent


def bellman_residual(
    theta: ThetaVector,
    t: int,
    state: tuple[float, float],
    next_state: tuple[float, float],
    horizon: int,
    lam: float,
) -> float:
    """δ_t for a single transition (x_t, l_t) -> (x_{t+1}, l_{t+1})."""
    if not 0 <= t < horizon:
        raise ValueError(f"Period t={t} outside 0..{horizon - 1}")
    terms = theta_terms(theta, horizon, lam)
    return terms.value(t + 1, *next_state) - terms.value(t, *state) + lam * float(terms.negent[t])


def bellman_loss(theta: ThetaVector, x: np.ndarray, l: np.ndarray, horizon: int, lam: float) -> float:
    """L(θ) = (1/2) Σ δ_t²."""
    delta = bellman_residuals(theta, x, l, horizon, lam)
    return 0.5 * float(delta @ delta)


def _residual_gradient(
    theta: ThetaVector, x: np.ndarray, l: np.ndarray, horizon: int, lam: float, bootstrap: bool
) -> np.ndarray:
    delta = bellman_residuals(theta, x, l, horizon, lam)
    terms = theta_terms(theta, horizon, lam)
    grad_j = np.einsum("tk,tkj->tj", _features(np.asarray(x, dtype=float), np.asarray(l, dtype=float)), terms.dcoeffs)
    grad_delta = lam * terms.dnegent - grad_j[:-1]
    if bootstrap:
        grad_delta += grad_j[1:]
    return grad_delta.T @ delta


def grad_theta(theta: ThetaVector, x: np.ndarray, l: np.ndarray, horizon: int, lam: float) -> np.ndarray:
    """∂L/∂θ for L(θ) = (1/2) Σ δ_t² with the transitions held fixed."""
    return _residual_gradient(theta, x, l, horizon, lam, bootstrap=True)


def semi_gradient_theta(theta: ThetaVector, x: np.ndarray, l: np.ndarray, horizon: int, lam: float) -> np.ndarray:
    """
    Σ δ_t ∂(λ ∫ π^θ_t ln π^θ_t - J^θ(t, s_t))/∂θ, i.e. the gradient of L(θ)
    with every target J^θ(t+1, s_{t+1}) treated as a constant.
    """
    return _residual_gradient(theta, x, l, horizon, lam, bootstrap=False)


def update_gamma(
    gamma: float, x_terminal: Sequence[float], l_terminal: Sequence[float], d: float, eta_gamma: float
) -> float:
    """γ <- γ - η_γ (mean(x_T) + γ - mean(l_T) - d), x_T shifted (X_T = x_T + γ)."""
    if len(x_terminal) == 0 or len(l_terminal) == 0:
        raise ValueError("update_gamma needs at least one terminal sample")
    return gamma - eta_gamma * (float(np.mean(x_terminal)) + gamma - float(np.mean(l_terminal)) - d)


def expected_gamma_path(
    params: ModelParams, policy: GaussianPolicy, mv: MVProblem, eta_gamma: float, iterations: int
) -> np.ndarray:
    """The γ-update with sample means replaced by expectations, starting at mv.gamma."""
    path = np.empty(iterations + 1)
    gamma = path[0] = mv.gamma
    for k in range(1, iterations + 1):
        surplus = expected_surplus_under_policy(params, policy, mv.model_copy(update={"gamma": gamma}))
        gamma = path[k] = gamma - eta_gamma * (surplus - mv.d)
    return path


def _descent_step(theta: np.ndarray, grad: np.ndarray, config: TrainConfig) -> np.ndarray:
    """The step in θ (sgd) or in ln|θ| (normalized)."""
    if config.gradient_profile == "normalized":
        log_grad = theta * grad
        return config.eta_normalized * log_grad / (1.0 + np.abs(log_grad))
    # Plain SGD; with power terms up to θⁿ the raw gradients are huge, hence the tiny default η
    return config.eta * grad


def _take_step(theta: np.ndarray, step: np.ndarray, config: TrainConfig) -> np.ndarray:
    if config.gradient_profile == "normalized":
        return theta * np.exp(-step)
    return theta - step


def _apply_step(theta: np.ndarray, grad: np.ndarray, config: TrainConfig, drift: float, episode: int) -> np.ndarray:
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"Non-finite gradient at episode {episode}: {grad.tolist()}")
    step = _descent_step(theta, grad, config)
    if not np.any(step):
        return theta
    scale = 1.0
    for halving in range(MAX_HALVINGS + 1):
        cand = _take_step(theta, scale * step, config)
        if theta_in_domain(cand, drift):
            if halving:
                _LOG.warning("Episode %d: step left the θ domain, learning rate halved %d times", episode, halving)
            return cand
        scale *= 0.5
    raise DivergenceError(f"Episode {episode}: no admissible θ step after {MAX_HALVINGS} halvings")


def train(config: TrainConfig, params: ModelParams, periods: int) -> tuple[ThetaVector, TrainLog]:
    """
    One SGD step on θ per simulated episode and one γ update per batch.
    Deterministic given `config.seed`.
    """
    drift, lam = params.a, config.lam
    if config.theta_init is not None:
        start = config.theta_init
    else:
        gamma_init = config.gamma_init if config.gamma_init is not None else config.d
        start = initial_theta(params, config.init_spread, seeded_rng(config.seed, _INIT_STREAM), gamma=gamma_init)
    theta, gamma = start.as_array(), start.gamma
    gradient = semi_gradient_theta if config.residual_gradient == "semi" else grad_theta
    _LOG.info(
        "Training %d episodes from θ=%s, γ=%.6g (%s gradient, %s profile)",
        config.episodes,
        theta.tolist(),
        gamma,
        config.residual_gradient,
        config.gradient_profile,
    )

    window_x: list[float] = []
    window_l: list[float] = []
    rows: list[TrainLogRow] = []
    for episode in range(config.episodes):
        vec = ThetaVector.from_array(theta, gamma)
        policy = theta_policy(vec, periods, lam, drift)
        path = simulate_episode(params, policy, (config.x0, config.l0), gamma, episode_rng(config.seed, episode))
        x, l = path.state_x, path.liability
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(l))):
            raise DivergenceError(f"Episode {episode}: non-finite state with θ={theta.tolist()}, γ={gamma}")
        delta = bellman_residuals(vec, x, l, periods, lam)
        loss = float(delta @ delta)
        if not loss <= config.max_loss:
            raise DivergenceError(
                f"Episode {episode}: Σδ² = {loss:.6g} exceeds max_loss = {config.max_loss:.6g}"
                f" with θ={theta.tolist()}, γ={gamma}"
            )
        theta = _apply_step(theta, gradient(vec, x, l, periods, lam), config, drift, episode)

        window_x.append(float(x[-1]))
        window_l.append(float(l[-1]))
        if len(window_x) == config.batch:
            gamma = update_gamma(gamma, window_x, window_l, config.d, config.eta_gamma)
            window_x.clear()
            window_l.clear()
            if not math.isfinite(gamma):
                raise DivergenceError(f"Episode {episode}: γ is no longer finite")
        rows.append(
            TrainLogRow(
                episode,
                float(path.wealth[-1]),
                float(path.liability[-1]),
                gamma,
                loss,
                *(float(v) for v in theta),
            )
        )
        if _LOG.isEnabledFor(TRACE):
            _LOG.log(TRACE, "Episode %d: surplus %.6g, γ %.6g", episode, path.terminal_surplus, gamma)
    final = ThetaVector.from_array(theta, gamma)
    _LOG.info("Finished training: θ=%s, γ=%.6g", theta.tolist(), gamma)
    return final, TrainLog(rows=tuple(rows))
