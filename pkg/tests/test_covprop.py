import numpy as np
import pytest

from rastmpc.covprop import (
    discrete_maps,
    propagate_conditional_slices,
    propagate_cov_closed_loop,
    propagate_cov_exact,
    propagate_cov_open_loop,
    propagate_mean,
    propagate_plan,
)
from rastmpc.model import GaussianBelief, LinearSdeModel, TriggerSchedule
from rastmpc.verify import check_covprop, instance_corpus


def scalar(a=0.0, b=1.0, q=0.0):
    return LinearSdeModel([[a]], [[b]], [[q]], [[1.0]])


def test_mean_double_integrator(double_integrator):
    assert np.allclose(propagate_mean(double_integrator, [0, 0], [1.0], 1.0), [0.5, 1.0])
    assert np.allclose(propagate_mean(double_integrator, [0, 0], [0.0], 3.7), 0.0)


def test_mean_pure_integrator():
    assert propagate_mean(scalar(), [2.0], [0.5], 3.0)[0] == pytest.approx(3.5)


def test_maps_at_zero(double_integrator):
    m = discrete_maps(double_integrator, 0.0)
    assert np.allclose(m.Phi, np.eye(2)) and np.allclose(m.Gamma, 0) and np.allclose(m.Wn, 0)


def test_exact_noise_integral(double_integrator):
    P, C = propagate_cov_exact(double_integrator, np.zeros((2, 2)), np.zeros((1, 2)), 1.0)
    q, tau = 0.01, 1.0
    expected = q * np.array([[tau + tau**3 / 3, tau**2 / 2], [tau**2 / 2, tau]])
    assert np.allclose(P, expected, atol=1e-12)
    assert np.allclose(C, 0)


def test_exact_zero_duration(double_integrator):
    P0 = np.array([[0.3, 0.1], [0.1, 0.2]])
    P, C = propagate_cov_exact(double_integrator, P0, np.ones((1, 2)), 0.0)
    assert np.allclose(P, P0) and np.allclose(C, P0)


def test_scalar_deadbeat_gain():
    # P(tau) = P0 (1 + K tau)^2 + Q tau; with K = -1, tau = 1 the held input cancels the state
    res = propagate_cov_closed_loop(scalar(), [[1.0]], [[-1.0]], 1.0)
    assert res.belief_end.P[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert res.cross_end.Ptk[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_scalar_closed_form_with_noise():
    P0, K, q, tau = 0.7, -0.4, 0.3, 0.9
    res = propagate_cov_closed_loop(scalar(q=q), [[P0]], [[K]], tau)
    assert res.belief_end.P[0, 0] == pytest.approx(P0 * (1 + K * tau) ** 2 + q * tau, rel=1e-10)


def test_zero_gain_matches_open_loop(double_integrator):
    P0 = np.array([[0.2, 0.05], [0.05, 0.1]])
    closed = propagate_cov_closed_loop(double_integrator, P0, np.zeros((1, 2)), 0.6)
    open_ = propagate_cov_open_loop(double_integrator, P0, 0.6)
    assert np.allclose(closed.P, open_, atol=1e-14)


def test_first_interval_ignores_gain(double_integrator):
    zero = np.zeros((2, 2))
    a = propagate_cov_closed_loop(double_integrator, zero, [[-3.0, -2.0]], 0.4)
    b = propagate_cov_closed_loop(double_integrator, zero, [[5.0, 1.0]], 0.4)
    assert np.array_equal(a.P, b.P)
    assert np.allclose(a.C, 0)


def test_rejects_bad_inputs(double_integrator):
    with pytest.raises(ValueError):
        propagate_cov_closed_loop(double_integrator, -np.eye(2), np.zeros((1, 2)), 0.1)
    with pytest.raises(ValueError):
        propagate_cov_closed_loop(double_integrator, np.eye(2), np.zeros((1, 2)), -0.1)
    with pytest.raises(ValueError):
        propagate_cov_exact(double_integrator, [[1.0, 0.5], [0.0, 1.0]], np.zeros((1, 2)), 0.1)


def test_symmetric_psd_samples():
    for inst in instance_corpus(20):
        model = LinearSdeModel(inst["A"], inst["B"], inst["Q"], np.eye(len(inst["A"])))
        res = propagate_cov_closed_loop(model, inst["P0"], inst["K"], inst["tau"])
        for P in res.P:
            assert np.array_equal(P, P.T)
            assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_oracle_corpus():
    rep = check_covprop(count=100)
    assert rep.passed, rep.line()


def test_plan_chains_exact(double_integrator):
    sched = TriggerSchedule([0.2, 0.5, 0.3], 0.1, 0.8)
    K = np.array([[-1.0, -0.8]])
    out = propagate_plan(double_integrator, GaussianBelief.exact([0.0, 0.0]), np.ones((3, 1)), K, sched)
    P = np.zeros((2, 2))
    for k, tau in enumerate(sched.deltas):
        P, _ = propagate_cov_exact(double_integrator, P, K, tau)
        assert np.allclose(out[k].belief_end.P, P, rtol=1e-7, atol=1e-12)
        assert out[k].cross_end.anchor_index == k


def test_slices_zero_before_own_interval(double_integrator):
    sched = TriggerSchedule([0.3, 0.4, 0.2], 0.1, 0.8)
    sl = propagate_conditional_slices(double_integrator, sched, [[-1.0, -1.0]], steps=16)
    t1 = sched.times()[1]
    before = sl.times <= t1 + 1e-12
    assert np.all(sl.slices[1][before] == 0) and np.all(sl.slices[2][before] == 0)
    assert sl.max_decomposition_error() <= 1e-8


def test_single_interval_slice_is_total(double_integrator):
    sched = TriggerSchedule([0.5], 0.1, 0.8)
    sl = propagate_conditional_slices(double_integrator, sched, [[-2.0, -1.0]], steps=16)
    assert np.allclose(sl.slices[0], sl.total, atol=1e-15)
