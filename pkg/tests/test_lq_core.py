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

import math

import numpy as np
import pytest
from scipy import integrate, stats

from explq.lq_core import (
    GaussianPolicy,
    ModelParams,
    SingularGainError,
    StateVec,
    bellman_functional,
    gaussian_neg_entropy,
    optimal_gaussian_policy,
    optimal_policy,
    optimal_value,
    propagate_quadratic,
    riccati_backward,
)
from explq.market import draw_noise, seeded_rng, simulate_terminal
from explq.mv_alm import shift_state

from .conftest import random_alm_params


def _random_general_params(rng: np.random.Generator, m: int) -> ModelParams:
    """Random parameters with C != 0. For m = 1 the wealth base α stays >= 0.1."""
    while True:
        params = ModelParams(
            a=rng.uniform(0.8, 1.5),
            b=rng.uniform(0.05, 0.5, size=m),
            c=rng.uniform(-0.3, 0.3),
            d=rng.uniform(0.05, 0.5, size=m),
            a_bar=rng.uniform(0.8, 1.5),
            c_bar=rng.uniform(0.0, 0.3),
            rho=rng.uniform(-0.9, 0.9),
            lam=rng.uniform(0.01, 1.0),
        )
        if m > 1:
            return params
        b, d = params.b[0], params.d[0]
        if (params.a * d - params.c * b) ** 2 / (b * b + d * d) >= 0.1:
            return params


def _random_horizon(rng: np.random.Generator, m: int, high: int) -> int:
    # Two controls replicate the wealth noise, so P_11 vanishes after one period
    return 1 if m > 1 else int(rng.integers(1, high))


def test_model_params():
    p = ModelParams(a=1.0, b=0.5, d=np.array([0.2]), a_bar=1.0, lam=0.1)
    assert p.b == (0.5,)
    assert p.d == (0.2,)
    assert p.m == 1
    assert p.q_matrix.tolist() == [[1.0, -1.0], [-1.0, 1.0]]
    # Frozen models are hashable and compare by value
    assert hash(p) == hash(ModelParams(a=1.0, b=(0.5,), d=(0.2,), a_bar=1.0, lam=0.1))

    with pytest.raises(ValueError):
        ModelParams(a=1.0, b=(0.5, 0.1), d=0.2, a_bar=1.0, lam=0.1)
    with pytest.raises(ValueError):
        ModelParams(a=1.0, b=0.5, d=0.2, a_bar=1.0, lam=0.0)
    with pytest.raises(ValueError):
        ModelParams(a=1.0, b=0.5, d=0.2, a_bar=1.0, lam=0.1, rho=1.5)
    with pytest.raises(ValueError):
        ModelParams(a=1.0, b=0.5, d=0.2, a_bar=1.0, lam=0.1, q_terminal=((1.0, 0.5), (0.0, 1.0)))


def test_propagate_quadratic_zero_and_identity(annual_params: ModelParams):
    state = StateVec(1.0, 1.0)
    assert propagate_quadratic(np.zeros((2, 2)), annual_params, state, [0.3], [[0.5]]) == 0.0

    # No control exposure: E[x'² + y'²] = (A² + C²) x² + (Ā² + C̄²) y²
    params = annual_params.model_copy(update={"b": (0.0,), "d": (0.0,)})
    value = propagate_quadratic(np.eye(2), params, state, [0.0], [[0.0]])
    assert value == pytest.approx(1.05**2 + 1.1**2 + 0.1**2, rel=1e-12)
    assert value == pytest.approx(2.3225, rel=1e-12)


def test_propagate_quadratic_monte_carlo(annual_params: ModelParams):
    p = np.array([[0.7, -0.4], [-0.4, 1.3]])
    x, y, mean, var = 0.8, 0.5, 1.2, 0.3
    exact = propagate_quadratic(p, annual_params, StateVec(x, y), [mean], [[var + mean * mean]])

    rng = seeded_rng(7, 0)
    n = 1_000_000
    u = mean + math.sqrt(var) * rng.standard_normal(n)
    noise = draw_noise(rng, annual_params.rho, n)
    pp = annual_params
    x1 = pp.a * x + pp.b[0] * u + (pp.c * x + pp.d[0] * u) * noise.wx
    y1 = (pp.a_bar + pp.c_bar * noise.wy) * y
    sample = p[0, 0] * x1 * x1 + 2.0 * p[0, 1] * x1 * y1 + p[1, 1] * y1 * y1
    se = sample.std() / math.sqrt(n)
    assert abs(sample.mean() - exact) <= 4.0 * se


def test_propagate_quadratic_surplus_weight():
    # With u = 0 and no diffusion the surplus weight propagates to (A x - Ā y)²
    params = ModelParams(a=1.05, b=0.25, d=0.0, a_bar=1.1, c_bar=0.0, lam=0.1)
    x, y = 1.0, 0.1
    value = propagate_quadratic(params.q_matrix, params, StateVec(x, y), [0.0], [[0.0]])
    assert value == pytest.approx((1.05 * x - 1.1 * y) ** 2, rel=1e-12)


def test_propagate_quadratic_rejects_bad_input(annual_params: ModelParams):
    with pytest.raises(ValueError):
        propagate_quadratic(np.array([[1.0, 0.5], [0.0, 1.0]]), annual_params, StateVec(1.0, 1.0), [0.0], [[1.0]])
    # Second moment below mean²
    with pytest.raises(ValueError):
        propagate_quadratic(np.eye(2), annual_params, StateVec(1.0, 1.0), [2.0], [[1.0]])


def test_gaussian_neg_entropy():
    cov = 0.05 / 0.1025
    expected = -0.5 * math.log(2.0 * math.pi * math.e * cov)
    assert gaussian_neg_entropy(cov) == pytest.approx(expected, rel=1e-14)
    assert gaussian_neg_entropy(cov) == pytest.approx(-1.0600, abs=1e-3)

    # Quadrature of ∫ π ln π
    sd = math.sqrt(cov)
    u = np.linspace(-10.0 * sd, 10.0 * sd, 100_001)
    log_pdf = stats.norm.logpdf(u, scale=sd)
    assert integrate.trapezoid(np.exp(log_pdf) * log_pdf, u) == pytest.approx(expected, abs=1e-6)

    # Product form in two dimensions
    two = np.diag([0.3, 0.7])
    assert gaussian_neg_entropy(two) == pytest.approx(gaussian_neg_entropy(0.3) + gaussian_neg_entropy(0.7))

    with pytest.raises(ValueError):
        gaussian_neg_entropy(0.0)


def test_riccati_terminal_stage(annual_params: ModelParams):
    sol = riccati_backward(annual_params, 1)
    stage = sol.stage(0)
    assert stage.g[0, 0] == pytest.approx(0.1025, rel=1e-12)
    assert stage.gain[0, 0] == pytest.approx(2.560976, rel=1e-6)
    assert stage.p[0, 0] == pytest.approx(0.430244, rel=1e-6)
    assert sol.value_matrix(1).tolist() == [[1.0, -1.0], [-1.0, 1.0]]

    entry = optimal_policy(sol, 0)
    assert entry.cov[0, 0] == pytest.approx(0.487805, rel=1e-6)
    assert gaussian_neg_entropy(entry.cov) == pytest.approx(-0.5 * math.log(2.0 * math.pi * math.e * 0.05 / 0.1025))

    expected_const = 0.05 * math.log(0.1025 / (math.pi * 0.1))
    assert optimal_value(sol, 0, StateVec(1.0, 0.0)) == pytest.approx(stage.p[0, 0] + expected_const, rel=1e-12)
    assert optimal_value(sol, 1, StateVec(1.0, 0.1)) == pytest.approx(0.81, rel=1e-12)
    with pytest.raises(ValueError):
        optimal_value(sol, 2, StateVec(1.0, 0.1))


def test_riccati_no_diffusion():
    # C = D = 0: a deterministic control cancels the risk completely
    params = ModelParams(a=1.05, b=0.25, c=0.0, d=0.0, a_bar=1.1, c_bar=0.1, lam=0.1)
    sol = riccati_backward(params, 1)
    assert sol.stage(0).p[0, 0] == pytest.approx(0.0, abs=1e-12)
    # Nothing is left to control one period earlier
    with pytest.raises(SingularGainError) as exc:
        riccati_backward(params, 3)
    assert exc.value.t == 1


def test_riccati_vector_control():
    params = ModelParams(a=1.05, b=(0.25, 0.0), d=(0.0, 0.2), a_bar=1.1, c_bar=0.1, rho=0.2, lam=0.1)
    stage = riccati_backward(params, 1).stage(0)
    np.testing.assert_allclose(stage.g, [[0.0625, 0.0], [0.0, 0.04]], rtol=1e-12, atol=1e-15)
    assert stage.gain.shape == (2, 2)
    # Two controls hedge the wealth noise completely
    assert stage.p[0, 0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(SingularGainError) as exc:
        riccati_backward(params, 2)
    assert exc.value.t == 0


def test_riccati_singular():
    params = ModelParams(a=1.05, b=0.0, d=0.0, a_bar=1.1, lam=0.1)
    with pytest.raises(SingularGainError) as exc:
        riccati_backward(params, 4)
    assert exc.value.t == 3

    no_wealth_weight = ModelParams(a=1.05, b=0.25, d=0.2, a_bar=1.1, lam=0.1, q_terminal=((0.0, 0.0), (0.0, 1.0)))
    with pytest.raises(SingularGainError):
        riccati_backward(no_wealth_weight, 2)

    with pytest.raises(ValueError):
        riccati_backward(no_wealth_weight, 0)


@pytest.mark.parametrize("m", [1, 2])
def test_riccati_structure(m: int):
    rng = np.random.default_rng(11 + m)
    for _ in range(20):
        params = _random_general_params(rng, m)
        horizon = _random_horizon(rng, m, 9)
        sol = riccati_backward(params, horizon)
        for t in range(horizon):
            stage = sol.stage(t)
            assert stage.t == t
            np.testing.assert_array_equal(stage.p, stage.p.T)
            np.testing.assert_allclose(stage.g, stage.g.T, rtol=0.0, atol=1e-14)
            assert np.linalg.eigvalsh(stage.g).min() > 0.0
            schur = stage.f - stage.h @ np.linalg.solve(stage.g, stage.h.T)
            np.testing.assert_allclose(stage.p, (schur + schur.T) / 2.0, rtol=0.0, atol=1e-12)
            # The entropy constant grows by (λ/2) ln[(1/(πλ))^m |G_t|] per period
            increment = 0.5 * params.lam * (
                m * math.log(1.0 / (math.pi * params.lam)) + math.log(np.linalg.det(stage.g))
            )
            assert sol.value_const(t) - sol.value_const(t + 1) == pytest.approx(increment, rel=1e-9, abs=1e-12)


def test_riccati_cache_returns_readonly(annual_params: ModelParams):
    first = riccati_backward(annual_params, 5)
    assert riccati_backward(annual_params, 5) is first
    with pytest.raises(ValueError):
        first.stage(0).p[0, 0] = 1.0


@pytest.mark.parametrize("m", [1, 2])
def test_bellman_consistency(m: int):
    rng = np.random.default_rng(23 + m)
    for _ in range(20):
        params = _random_general_params(rng, m)
        horizon = _random_horizon(rng, m, 7)
        sol = riccati_backward(params, horizon)
        for t in range(horizon):
            state = StateVec(*rng.uniform(-3.0, 3.0, size=2))
            entry = optimal_policy(sol, t)
            free_energy = bellman_functional(
                sol.value_matrix(t + 1),
                sol.value_const(t + 1),
                params,
                state,
                entry.mean(*state),
                entry.cov,
            )
            value = optimal_value(sol, t, state)
            assert free_energy == pytest.approx(value, rel=1e-10, abs=1e-10)


def _free_energy_by_quadrature(
    f: np.ndarray, h: np.ndarray, g: np.ndarray, s: np.ndarray, c_next: float, lam: float, mean: float, var: float
) -> float:
    sd = math.sqrt(var)
    u = np.linspace(mean - 8.0 * sd, mean + 8.0 * sd, 4001)
    log_pdf = stats.norm.logpdf(u, loc=mean, scale=sd)
    q = float(s @ f @ s) + 2.0 * float((s @ h)[0]) * u + float(g[0, 0]) * u * u
    return float(integrate.trapezoid(np.exp(log_pdf) * (q + lam * log_pdf), u)) + c_next


def test_optimal_policy_minimises_free_energy():
    rng = np.random.default_rng(5)
    for _ in range(10):
        params = random_alm_params(rng)
        horizon = int(rng.integers(1, 6))
        sol = riccati_backward(params, horizon)
        t = int(rng.integers(0, horizon))
        stage = sol.stage(t)
        s = rng.uniform(-2.0, 2.0, size=2)
        entry = optimal_policy(sol, t)
        mean0 = float(entry.mean(*s)[0])
        var0 = float(entry.cov[0, 0])
        c_next = sol.value_const(t + 1)

        # Means move on the scale of the standard deviation
        means = mean0 + math.sqrt(var0) * np.linspace(-0.1, 0.1, 41)
        variances = var0 * (1.0 + np.linspace(-0.1, 0.1, 41))
        grid = np.array(
            [
                [_free_energy_by_quadrature(stage.f, stage.h, stage.g, s, c_next, params.lam, mu, v) for v in variances]
                for mu in means
            ]
        )
        assert np.unravel_index(np.argmin(grid), grid.shape) == (20, 20)
        assert grid[20, 20] == pytest.approx(optimal_value(sol, t, StateVec(*s)), abs=1e-4)


def test_optimal_policy_monte_carlo(monthly_market):
    params, horizon = monthly_market.params, monthly_market.periods
    sol = riccati_backward(params, horizon)
    policy = optimal_gaussian_policy(sol)
    assert isinstance(policy, GaussianPolicy)
    assert policy.horizon == horizon

    n = 200_000
    sample = simulate_terminal(params, policy, (1.0, 0.1), 0.0, n, seed=3)
    entropy = params.lam * sum(gaussian_neg_entropy(policy.covs[t]) for t in range(horizon))
    cost = sample.surplus**2 + entropy
    se = cost.std() / math.sqrt(n)
    assert abs(cost.mean() - optimal_value(sol, 0, StateVec(1.0, 0.1))) <= 4.0 * se


@pytest.mark.slow
def test_optimal_policy_monte_carlo_large(monthly_market):
    params, horizon = monthly_market.params, monthly_market.periods
    sol = riccati_backward(params, horizon)
    policy = optimal_gaussian_policy(sol)
    n = 1_000_000
    sample = simulate_terminal(params, policy, (1.0, 0.1), 1.5, n, seed=17, workers=4)
    assert sample.surplus.shape == (n,)
    # The policy acts on the shifted wealth x = X - 1.5 A^-(T-t)
    x0 = shift_state(1.0, 1.5, params.a, horizon)
    entropy = params.lam * sum(gaussian_neg_entropy(policy.covs[t]) for t in range(horizon))
    cost = (sample.state_x - sample.liability) ** 2 + entropy
    se = cost.std() / math.sqrt(n)
    assert abs(cost.mean() - optimal_value(sol, 0, StateVec(x0, 0.1))) <= 4.0 * se
