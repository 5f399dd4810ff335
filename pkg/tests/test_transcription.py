import numpy as np
import pytest

from rastmpc.covprop import propagate_plan
from rastmpc.model import GaussianBelief, scenario_from_dict
from rastmpc.nlpsolve import CONVERGED, SolveOptions, check_derivatives, solve
from rastmpc.transcription import (
    PlanNotCertified,
    SymCoords,
    certify,
    extract_plan,
    objective_value,
    transcribe,
)


def build(sc, horizon=None, stochastic=True, belief=None, r0=None):
    belief = belief or GaussianBelief.exact(sc.x0)
    return transcribe(sc, belief, sc.resource.r0 if r0 is None else r0, 0.0,
                      stochastic=stochastic, horizon=horizon)


@pytest.fixture(scope="module")
def danger_solution(danger):
    prob, layout = build(danger)
    res = solve(prob, prob.context.initial_guess(), SolveOptions(tol=1e-6))
    return prob, layout, res


def test_layout_dimension(danger):
    _, layout = build(danger, horizon=2)
    parts = layout.parts()
    assert sum(parts.values()) == layout.size
    # v 2, K 2, delta 2, r 2, then 2 intervals x 4 nodes x (mean 2 + sym P 3 + full cross 4)
    assert layout.size == 2 + 2 + 2 + 2 + 2 * 4 * (2 + 3 + 4)


def test_deterministic_layout_has_no_gain(deterministic):
    _, layout = build(deterministic, horizon=2, stochastic=False)
    assert layout.nK == 0
    assert layout.size == 2 + 2 + 2 + 2 * 4 * 2


def test_sym_coords_round_trip():
    sym = SymCoords(3)
    P = np.array([[2.0, 0.3, -0.1], [0.3, 1.0, 0.2], [-0.1, 0.2, 0.5]])
    assert np.array_equal(sym.full(sym.coords(P)), P)
    assert len(sym.coords(P)) == 6


def test_derivatives_at_initial_guess(danger):
    prob, _ = build(danger, horizon=10)
    assert check_derivatives(prob, prob.context.initial_guess()) <= 1e-5


def test_initial_guess_satisfies_dynamics(danger):
    prob, layout = build(danger)
    z = prob.context.initial_guess()
    assert np.abs(prob.eval_eq(z)).max() <= 1e-10
    assert np.allclose(layout.delta(z), 0.45)
    assert np.all(layout.K(z) == 0)


def test_defects_affine_in_delta(danger):
    prob, layout = build(danger)
    z = prob.context.initial_guess()
    rng = np.random.default_rng(0)
    z = z + 1e-2 * rng.standard_normal(z.shape)
    h = 1e-2
    for k in range(layout.N):
        e = np.zeros_like(z)
        e[layout.off_delta + k] = h
        second = prob.eval_eq(z + e) - 2 * prob.eval_eq(z) + prob.eval_eq(z - e)
        assert np.abs(second).max() <= 1e-8


def test_first_interval_independent_of_gain(danger):
    prob, layout = build(danger)
    tr = prob.context
    v, delta = np.ones((layout.N, 1)), np.full(layout.N, 0.3)
    Sa = tr.rollout(v, np.array([[-3.0, -1.0]]), delta)
    Sb = tr.rollout(v, np.array([[4.0, 2.0]]), delta)
    assert np.allclose(Sa[0][:, layout.s_P], Sb[0][:, layout.s_P], atol=1e-14)
    assert not np.allclose(Sa[2][:, layout.s_P], Sb[2][:, layout.s_P])


def test_objective_constant_offset():
    # scalar integrator parked one unit below the reference, weight 10, total time 2
    sc = scenario_from_dict({
        "model": {"A": [[0.0]], "B": [[1.0]], "Q": [[0.0]], "C": [[1.0]]},
        "initial_state": [0.0],
        "resource": {"rho": 1.0, "eta": 0.0, "r0": 1.0},
        "cost": {"output_weight": [[10.0]], "input_weight": [[0.0]], "reference": [[0.0, 1.0]],
                 "resource_weight": 0.0},
        "horizon": 2, "delta_min": 0.5, "delta_max": 1.0, "t_end": 5.0, "tightening": False,
    })
    prob, layout = build(sc, stochastic=False)
    z = prob.context.assemble(np.zeros((2, 1)), np.zeros((1, 1)), np.array([1.0, 1.0]))
    assert objective_value(layout, z, sc) == pytest.approx(20.0, rel=1e-9)


def test_zero_weights_zero_cost(danger):
    sc = danger.replace(cost=type(danger.cost)(np.zeros((1, 1)), np.zeros((1, 1)), danger.cost.reference,
                                               resource_weight=0.0))
    prob, layout = build(sc)
    assert objective_value(layout, prob.context.initial_guess(), sc) == 0.0


def test_danger_solve(danger_solution, danger):
    prob, layout, res = danger_solution
    assert res.status == CONVERGED
    stat, feas, comp = certify(prob, res)
    assert feas <= 1e-7 and stat <= 1e-5
    pred = extract_plan(layout, res.z, danger, problem=prob)
    d = pred.plan.schedule.deltas
    assert np.all(d >= danger.delta_min) and np.all(d <= danger.delta_max)
    # reference on the bound: first interval in the lowest 15 % of the admissible range
    assert d[0] <= danger.delta_min + 0.15 * (danger.delta_max - danger.delta_min)
    assert np.all(pred.resource >= danger.resource.r_min - 1e-9)
    assert np.all(pred.resource <= danger.resource.r_max + 1e-9)


def test_resource_relaxation_exact(danger_solution, danger):
    _, layout, res = danger_solution
    r, d = layout.r(res.z), layout.delta(res.z)
    prev = np.concatenate([[danger.resource.r0], r[:-1]])
    cap = np.minimum(danger.resource.rho * d + prev - danger.resource.eta(d), danger.resource.r_max)
    assert np.abs(r - cap).max() <= 1e-6


def test_collocation_matches_ode(danger_solution, danger):
    _, layout, res = danger_solution
    pred = extract_plan(layout, res.z, danger)
    plan = pred.plan
    out = propagate_plan(danger.model, GaussianBelief.exact(danger.x0), plan.v, plan.K, plan.schedule, steps=256)
    S = layout.states(res.z)
    sym = SymCoords(2)
    for k, piece in enumerate(out):
        assert np.abs(S[k, -1, layout.s_mu] - piece.belief_end.mu).max() <= 1e-4
        assert np.abs(sym.full(S[k, -1, layout.s_P]) - piece.belief_end.P).max() <= 1e-4


def test_chance_rows_hold_at_nodes(danger_solution, danger):
    prob, layout, res = danger_solution
    pred = extract_plan(layout, res.z, danger)
    z99 = 2.3263478740408408
    for b in pred.beliefs:
        assert b.mu[0] + z99 * np.sqrt(b.P[0, 0]) <= 1.0 + 1e-6


def test_uncertified_plan_rejected(danger):
    prob, layout = build(danger)
    z = prob.context.initial_guess()
    z[layout.off_states + 3] += 1.0
    with pytest.raises(PlanNotCertified):
        extract_plan(layout, z, danger, problem=prob)


def test_deterministic_plan_has_zero_gain(deterministic):
    prob, layout = build(deterministic, stochastic=False)
    res = solve(prob, prob.context.initial_guess())
    assert res.status == CONVERGED
    pred = extract_plan(layout, res.z, deterministic, problem=prob)
    assert np.all(pred.plan.K == 0)
    assert all(np.all(b.P == 0) for b in pred.beliefs)


def test_stochastic_and_deterministic_agree_without_noise(deterministic):
    p1, l1 = build(deterministic, stochastic=True)
    p2, l2 = build(deterministic, stochastic=False)
    r1 = solve(p1, p1.context.initial_guess())
    r2 = solve(p2, p2.context.initial_guess())
    assert r1.status == r2.status == CONVERGED
    assert r1.objective == pytest.approx(r2.objective, rel=1e-5)


def test_shift_keeps_dynamics(danger_solution, danger):
    prob, layout, res = danger_solution
    z1 = layout.states(res.z)[1, 0, layout.s_mu]
    p2, l2 = build(danger, belief=GaussianBelief.exact(z1), r0=float(layout.r(res.z)[0]))
    z = p2.context.shift(res.z)
    assert np.abs(p2.eval_eq(z)).max() <= 1e-9
    assert np.allclose(l2.delta(z)[:-1], layout.delta(res.z)[1:])
    H = np.diag(np.arange(1.0, layout.size + 1))
    Hs = p2.context.shift_hessian(H)
    assert np.all(np.linalg.eigvalsh(Hs) > 0)
