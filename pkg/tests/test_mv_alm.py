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

import logging
import math

import numpy as np
import pytest

from explq.lq_core import GaussianPolicy, ModelParams, optimal_gaussian_policy, riccati_backward
from explq.market import simulate_terminal
from explq.mv_alm import (
    MVProblem,
    calibrate_gamma,
    check_target,
    evaluate_policy,
    expected_surplus_under_policy,
    report_from_surplus,
    risk_free_surplus,
    sharpe_ratio,
    shift_state,
)


def test_shift_state():
    assert shift_state(1.0, 0.0, 1.05, 12) == 1.0
    # 1 - 2 / 1.05¹² = -0.1136748...
    assert shift_state(1.0, 2.0, 1.05, 12) == pytest.approx(1.0 - 2.0 * 1.05**-12, rel=1e-12)
    assert shift_state(1.0, 2.0, 1.05, 12) == pytest.approx(-0.1136748, abs=1e-7)
    assert shift_state(1.3, 0.5, 1.05, 0) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        shift_state(1.0, 1.0, 0.0, 3)


# Published (sample mean, sample variance, Sharpe ratio); the columns are rounded
@pytest.mark.parametrize(
    "mean, variance, sharpe",
    [
        (8.07335, 1.47720, 6.60138),
        (1.40067, 0.06056, 5.48819),
        (1.19658, 0.03186, 6.42324),
        (1.39368, 0.04920, 6.05735),
    ],
)
def test_sharpe_reference_rows(mean: float, variance: float, sharpe: float):
    assert sharpe_ratio(mean, variance) == pytest.approx(sharpe, abs=5e-4)


def test_sharpe_ratio(caplog: pytest.LogCaptureFixture):
    assert sharpe_ratio(1.0, 0.25, excess_base=0.0) == pytest.approx(2.0)
    with caplog.at_level(logging.WARNING, logger="explq"):
        assert sharpe_ratio(1.0, 0.0) == math.inf
    assert "infinite Sharpe" in caplog.text


def test_report_from_surplus():
    report = report_from_surplus(np.array([1.0, 2.0, 3.0, 4.0]), d=2.0)
    assert report.sample_mean == 2.5
    assert report.sample_variance == pytest.approx(5.0 / 3.0)
    assert report.sharpe == pytest.approx((2.5 - 0.05) / math.sqrt(5.0 / 3.0))
    assert report.episodes == 4
    assert report.constraint_gap == pytest.approx(0.5)

    row = report.csv_row("demo")
    assert row[:3] == ("demo", "4", "2.5")
    assert float(row[3]) == report.sample_variance

    assert report_from_surplus(np.full(10, 1.0), d=1.4).sharpe == math.inf
    with pytest.raises(ValueError):
        report_from_surplus(np.array([1.0]), d=1.4)


def test_expected_surplus_without_risk(annual_params: ModelParams):
    policy = GaussianPolicy.degenerate(np.zeros((3, 1, 2)))
    mv = MVProblem(d=1.4, gamma=0.7, x0=1.0, l0=0.1)
    expected = 1.05**3 - 1.1**3 * 0.1
    assert expected_surplus_under_policy(annual_params, policy, mv) == pytest.approx(expected, rel=1e-14)
    assert risk_free_surplus(annual_params, mv, 3) == pytest.approx(expected, rel=1e-14)


def test_expected_surplus_constant_control(annual_params: ModelParams):
    mu = 0.8
    policy = GaussianPolicy.degenerate(np.array([[[-mu, 0.0]]]))
    mv = MVProblem(x0=1.0, l0=0.1)
    assert expected_surplus_under_policy(annual_params, policy, mv) == pytest.approx(1.05 + 0.25 * mu - 0.11)


def test_expected_surplus_monte_carlo(monthly_market):
    params, horizon = monthly_market.params, monthly_market.periods
    policy = optimal_gaussian_policy(riccati_backward(params, horizon))
    mv = MVProblem(d=1.4, gamma=1.5, x0=1.0, l0=0.1)
    n = 200_000
    surplus = simulate_terminal(params, policy, (1.0, 0.1), 1.5, n, seed=21).surplus
    se = surplus.std() / math.sqrt(n)
    assert abs(surplus.mean() - expected_surplus_under_policy(params, policy, mv)) <= 4.0 * se

    # Affine in γ
    e0, e1, e2 = (expected_surplus_under_policy(params, policy, mv.model_copy(update={"gamma": g})) for g in (0, 1, 2))
    assert e2 - e1 == pytest.approx(e1 - e0, rel=1e-10)
    assert e1 > e0


def test_calibrate_gamma(monthly_market):
    params, horizon = monthly_market.params, monthly_market.periods
    policy = optimal_gaussian_policy(riccati_backward(params, horizon))
    mv = MVProblem(d=1.4, x0=1.0, l0=0.1)
    gamma = calibrate_gamma(params, policy, mv)
    assert gamma > 0.0
    calibrated = mv.model_copy(update={"gamma": gamma})
    assert expected_surplus_under_policy(params, policy, calibrated) == pytest.approx(1.4, abs=1e-9)


def test_check_target(annual_params: ModelParams, caplog: pytest.LogCaptureFixture):
    assert check_target(annual_params, MVProblem(d=1.4), 1)
    with caplog.at_level(logging.WARNING, logger="explq"):
        assert not check_target(annual_params, MVProblem(d=0.5), 1)
    assert "vacuous" in caplog.text


def test_evaluate_policy(monthly_market):
    params, horizon = monthly_market.params, monthly_market.periods
    policy = optimal_gaussian_policy(riccati_backward(params, horizon))
    mv = MVProblem(d=1.4, gamma=1.5)
    report = evaluate_policy(params, policy, mv, 5000, seed=4)
    again = evaluate_policy(params, policy, mv, 5000, seed=4, workers=2)
    assert report == again
    assert report.episodes == 5000
    assert report.constraint_gap == pytest.approx(abs(report.sample_mean - 1.4))
    assert report.sharpe == pytest.approx((report.sample_mean - 0.05) / math.sqrt(report.sample_variance))
    assert evaluate_policy(params, policy, mv, 5000, seed=5) != report

    with pytest.raises(ValueError):
        evaluate_policy(params, policy, mv, 1, seed=4)
