import math

import numpy as np
import pytest

from rastmpc.chance import normal_cdf, normal_quantile, tighten_input_row, tighten_state_row
from rastmpc.verify import check_chance


def test_quantile_reference_value():
    assert normal_quantile(0.99) == pytest.approx(2.326348, abs=1e-6)
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.025) == pytest.approx(-1.959964, abs=1e-6)


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.01, 0.3, 0.7, 0.975, 1 - 1e-9])
def test_quantile_round_trip(p):
    assert abs(normal_cdf(normal_quantile(p)) - p) <= 1e-9 * max(1.0, p)


def test_quantile_domain():
    for p in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(ValueError):
            normal_quantile(p)


def test_state_row_backoff():
    P = np.diag([0.04, 0.09])
    row = tighten_state_row([1.0, 0.0], 1.0, 0.01, P)
    assert row.backoff == pytest.approx(0.2 * normal_quantile(0.99))
    assert row.h_tight == pytest.approx(1.0 - row.backoff)


def test_zero_covariance_no_backoff():
    row = tighten_state_row([1.0, 0.0], 1.0, 0.01, np.zeros((2, 2)))
    assert row.backoff == 0.0 and row.h_tight == 1.0


def test_input_row_uses_feedback_covariance():
    K = np.array([[-2.0, -1.0]])
    P = np.array([[0.1, 0.02], [0.02, 0.05]])
    row = tighten_input_row([1.0], 10.0, 0.01, K, P)
    assert row.backoff == pytest.approx(math.sqrt((K @ P @ K.T)[0, 0]) * normal_quantile(0.99))
    assert tighten_input_row([1.0], 10.0, 0.01, np.zeros((1, 2)), P).backoff == 0.0


def test_non_psd_direction_rejected():
    with pytest.raises(ValueError):
        tighten_state_row([1.0, 0.0], 1.0, 0.01, -np.eye(2))
    with pytest.raises(ValueError):
        tighten_state_row([1.0, 0.0], 1.0, 0.7, np.eye(2))


def test_sampled_violation_within_band():
    rep = check_chance()
    assert rep.passed, rep.line()
