import csv

import numpy as np
import pytest

from rastmpc.closedloop import (
    CSV_HEADER,
    ClosedLoopOptions,
    _clip_input,
    apply_plan_open_loop,
    ensemble_stats,
    make_rng,
    monte_carlo,
    noise_factor,
    run_closed_loop,
    simulate_interval,
)
from rastmpc.covprop import propagate_mean
from rastmpc.model import AffineFeedbackPlan, LinearSdeModel, TriggerSchedule, resource_step

SHORT = ClosedLoopOptions(t_end=3.0)


@pytest.fixture(scope="module")
def danger_log(danger):
    return run_closed_loop(danger, make_rng(3), SHORT)


def test_noise_factor():
    Q = np.array([[0.02, 0.01], [0.01, 0.01]])
    L = noise_factor(Q)
    assert np.allclose(L @ L.T, Q)
    assert np.allclose(noise_factor(np.zeros((2, 2))), 0)
    with pytest.raises(ValueError):
        noise_factor(np.diag([1.0, -1.0]))


def test_interval_argument_checks(double_integrator):
    rng = make_rng(0)
    with pytest.raises(ValueError):
        simulate_interval(double_integrator, [0, 0], [0.0], 0.5, 0, rng)
    with pytest.raises(ValueError):
        simulate_interval(double_integrator, [0, 0], [0.0], 0.0, 10, rng)


def test_noiseless_endpoint_matches_zoh():
    model = LinearSdeModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], np.zeros((2, 2)), [[1.0, 0.0]])
    path = simulate_interval(model, [0.0, 0.0], [1.0], 1.0, 2048, make_rng(0))
    assert path.shape == (2049, 2)
    assert np.allclose(path[-1], [0.5, 1.0], atol=2e-3)
    assert np.allclose(path[-1], propagate_mean(model, [0, 0], [1.0], 1.0), atol=2e-3)


def test_pure_noise_marginal():
    q = np.array([[0.3, 0.1], [0.1, 0.2]])
    model = LinearSdeModel(np.zeros((2, 2)), np.zeros((2, 1)), q, np.eye(2))
    S, tau = 100_000, 0.5
    x = simulate_interval(model, np.zeros((S, 2)), [0.0], tau, 4, make_rng(11))[-1]
    emp = np.cov(x, rowvar=False)
    P = q * tau
    d = np.sqrt(np.diag(P))
    se = np.sqrt((np.outer(d, d) ** 2 + P**2) / S)
    assert np.all(np.abs(emp - P) <= 3 * se)
    assert np.all(np.abs(x.mean(axis=0)) <= 3 * d / np.sqrt(S))


def test_same_stream_same_path(double_integrator):
    a = simulate_interval(double_integrator, [0, 0], [1.0], 0.3, 50, make_rng(5))
    b = simulate_interval(double_integrator, [0, 0], [1.0], 0.3, 50, make_rng(5))
    c = simulate_interval(double_integrator, [0, 0], [1.0], 0.3, 50, make_rng(6))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_open_loop_nominal_without_noise():
    model = LinearSdeModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], np.zeros((2, 2)), [[1.0, 0.0]])
    sched = TriggerSchedule([0.2, 0.4, 0.3], 0.1, 0.8)
    plan = AffineFeedbackPlan(np.array([[1.0], [-0.5], [0.25]]), np.zeros((1, 2)), sched)
    X = apply_plan_open_loop(model, plan, np.zeros(2), samples=3, em_step=1e-4)
    mu = np.zeros(2)
    for k, tau in enumerate(sched.deltas):
        mu = propagate_mean(model, mu, plan.v[k], tau)
        assert np.allclose(X[k + 1], mu, atol=1e-3)
    log = apply_plan_open_loop(model, plan, np.zeros(2), em_step=1e-4)
    assert np.allclose(log.trigger_times, sched.times()[:-1])
    assert np.allclose(log.x[-1], mu, atol=1e-3)


def test_first_interval_open_loop_spread(double_integrator):
    # no feedback acts before the first re-measurement, whatever K is
    sched = TriggerSchedule([0.5, 0.5], 0.1, 0.8)
    plans = [AffineFeedbackPlan(np.zeros((2, 1)), K, sched) for K in (np.zeros((1, 2)), np.array([[-5.0, -3.0]]))]
    X = [apply_plan_open_loop(double_integrator, p, np.zeros(2), rng=make_rng(2), samples=2000) for p in plans]
    assert np.array_equal(X[0][1], X[1][1])
    assert not np.array_equal(X[0][2], X[1][2])


def test_closed_loop_invariants(danger_log, danger):
    log = danger_log
    t = log.trigger_times
    assert np.all(np.diff(t) > 0) and t[0] == 0.0
    d, r = log.deltas, log.resource_levels
    assert np.all(d >= danger.delta_min - 1e-12) and np.all(d <= danger.delta_max + 1e-12)
    assert np.all(r >= danger.resource.r_min - 1e-12) and np.all(r <= danger.resource.r_max + 1e-12)
    for k in range(len(r) - 1):
        assert r[k + 1] == resource_step(r[k], d[k], danger.resource)
    assert np.allclose(t[1:], t[:-1] + d[:-1])
    u = np.array([rec.u for rec in log.triggers])
    assert np.all(np.abs(u) <= 10.0)


def test_closed_loop_reproducible(danger_log, danger):
    again = run_closed_loop(danger, make_rng(3), SHORT)
    assert np.array_equal(again.x, danger_log.x)
    assert again.to_dict() == danger_log.to_dict()


def test_csv_schema(tmp_path, danger_log):
    path = tmp_path / "trace.csv"
    danger_log.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == CSV_HEADER
    body = np.array(rows[1:], float)
    assert len(body) == len(danger_log.t)
    assert np.all(body[:, 8] >= body[:, 10]) and np.all(body[:, 8] <= body[:, 9])
    assert np.all(body[:, 5] >= body[:, 7]) and np.all(body[:, 5] <= body[:, 6])


def test_wall_time_only_on_request(danger_log):
    assert "wall_time" not in danger_log.to_dict()["triggers"][0]
    assert "wall_time" in danger_log.to_dict(include_timing=True)["triggers"][0]


def test_clip_input(danger):
    assert _clip_input(danger, [12.5])[0] == 10.0
    assert _clip_input(danger, [-11.0])[0] == -10.0
    assert _clip_input(danger, [3.0])[0] == 3.0


def test_single_sample_stats_equal_trace(danger):
    opts = ClosedLoopOptions(t_end=1.0)
    stats, logs = monte_carlo(danger, 1, base_seed=4, opts=opts)
    assert len(logs) == 1 and stats.n_samples == 1
    ref = np.interp(stats.times, logs[0].t, logs[0].x[:, 0])
    assert np.array_equal(stats.mean[:, 0], ref)
    assert np.all(stats.cov == 0)
    alone = run_closed_loop(danger, make_rng(4), opts)
    assert np.array_equal(alone.x, logs[0].x)


def test_ensemble_stats_properties(danger):
    opts = ClosedLoopOptions(t_end=1.0)
    stats, logs = monte_carlo(danger, 3, base_seed=0, opts=opts)
    for C in stats.cov[::10]:
        assert np.allclose(C, C.T)
        assert np.linalg.eigvalsh(C).min() >= -1e-12
    for freq in stats.violation.values():
        assert np.all((freq >= 0) & (freq <= 1))
    assert stats.delta_hist.sum() == sum(len(l.triggers) for l in logs)
    again = ensemble_stats(danger, logs, t_end=1.0)
    assert np.array_equal(again.mean, stats.mean)


def test_deterministic_controller_equivalence(deterministic):
    opts = dict(t_end=4.0)
    a = run_closed_loop(deterministic, make_rng(0), ClosedLoopOptions(stochastic=True, **opts))
    b = run_closed_loop(deterministic, make_rng(0), ClosedLoopOptions(stochastic=False, **opts))
    assert len(a.triggers) == len(b.triggers)
    oa = np.array([r.objective for r in a.triggers])
    ob = np.array([r.objective for r in b.triggers])
    assert np.all(np.abs(oa - ob) <= 1e-5 * np.abs(ob))


def test_monte_carlo_needs_samples(danger):
    with pytest.raises(ValueError):
        monte_carlo(danger, 0)
