"""Oracle suites for the propagation and chance machinery.

Each check returns a :class:`CheckReport`; a failing report carries the
offending instance in plain JSON-able form so it can be replayed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .chance import normal_cdf, normal_quantile, tighten_state_row
from .closedloop import apply_plan_open_loop, make_rng
from .covprop import (
    propagate_conditional_slices,
    propagate_cov_closed_loop,
    propagate_cov_exact,
)
from .model import AffineFeedbackPlan, LinearSdeModel, TriggerSchedule

CORPUS_SEED = 20240611
SUITES = ("covprop", "decomposition", "quantile", "firstinterval", "chance", "montecarlo")


@dataclass
class CheckReport:
    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str = ""
    instance: dict | None = None
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.metric:.3e} (threshold {self.threshold:.3e}) {self.detail}".rstrip()

    def to_dict(self) -> dict:
        return asdict(self)


def _random_psd(rng, n, scale=1.0):
    L = rng.uniform(-1.0, 1.0, (n, n))
    return scale * (L @ L.T) / n


def random_instance(rng: np.random.Generator) -> dict:
    """One (A, B, Q, K, P0, tau) draw: n_x <= 4, entries in [-2, 2]."""
    n = int(rng.integers(1, 5))
    m = int(rng.integers(1, n + 1))
    return {
        "A": rng.uniform(-2, 2, (n, n)).tolist(),
        "B": rng.uniform(-2, 2, (n, m)).tolist(),
        "Q": _random_psd(rng, n).tolist(),
        "K": rng.uniform(-2, 2, (m, n)).tolist(),
        "P0": _random_psd(rng, n).tolist(),
        "tau": float(rng.uniform(0.05, 1.0)),
    }


def instance_corpus(count: int = 100, seed: int = CORPUS_SEED) -> list:
    """The random-instance corpus; fixed seed, so every call returns the same list."""
    rng = make_rng(seed)
    return [random_instance(rng) for _ in range(count)]


def _model(inst) -> LinearSdeModel:
    n = len(inst["A"])
    return LinearSdeModel(inst["A"], inst["B"], inst["Q"], np.eye(n))


def check_covprop(count: int = 100, seed: int = CORPUS_SEED, steps: int = 256,
                  rtol: float = 1e-6, atol: float = 1e-9) -> CheckReport:
    """RK4 on the feedback covariance ODEs vs the matrix-exponential closed form."""
    worst, worst_inst = 0.0, None
    for inst in instance_corpus(count, seed):
        model = _model(inst)
        res = propagate_cov_closed_loop(model, inst["P0"], inst["K"], inst["tau"], steps)
        P_ex, C_ex = propagate_cov_exact(model, inst["P0"], inst["K"], inst["tau"])
        err = 0.0
        for got, ref in ((res.belief_end.P, P_ex), (res.cross_end.Ptk, C_ex)):
            # relative error with an absolute floor of atol
            err = max(err, float(np.max(np.abs(got - ref) / (np.abs(ref) + atol / rtol))))
        if err > worst:
            worst, worst_inst = err, inst
    ok = worst <= rtol
    return CheckReport("covprop", ok, worst, rtol, f"{count} instances, {steps} RK4 steps",
                       None if ok else worst_inst)


def check_decomposition(n: int = 6, count: int = 20, seed: int = CORPUS_SEED + 1, tol: float = 1e-8) -> CheckReport:
    """Per-interval covariance slices must add up to the full covariance."""
    rng = make_rng(seed)
    worst, worst_inst = 0.0, None
    for _ in range(count):
        inst = random_instance(rng)
        N = int(rng.integers(1, n + 1))
        deltas = rng.uniform(0.05, 1.0, N)
        sched = TriggerSchedule(deltas, 0.05, 1.0)
        sl = propagate_conditional_slices(_model(inst), sched, inst["K"], P0=inst["P0"], steps=32)
        err = sl.max_decomposition_error()
        if err > worst:
            worst, worst_inst = err, dict(inst, deltas=deltas.tolist())
    ok = worst <= tol
    return CheckReport("decomposition", ok, worst, tol, f"{count} schedules, N <= {n}", None if ok else worst_inst)


def check_quantile(tol: float = 1e-9) -> CheckReport:
    ps = np.concatenate([np.logspace(-12, -1, 45), np.linspace(0.1, 0.9, 81), 1.0 - np.logspace(-1, -12, 45)])
    errs = [abs(normal_cdf(normal_quantile(p)) - p) for p in ps]
    i = int(np.argmax(errs))
    z99 = normal_quantile(0.99)
    ok = errs[i] <= tol and abs(z99 - 2.326348) <= 1e-5
    return CheckReport("quantile", ok, errs[i], tol, f"z(0.99) = {z99:.7f}",
                       None if ok else {"p": float(ps[i])})


def check_first_interval(count: int = 10, seed: int = CORPUS_SEED + 2, tol: float = 1e-10) -> CheckReport:
    """From an exact measurement the first-interval covariance ignores K."""
    rng = make_rng(seed)
    A = [[0.0, 1.0], [0.0, 0.0]]
    model = LinearSdeModel(A, [[0.0], [1.0]], 0.01 * np.eye(2), np.eye(2))
    zero = np.zeros((2, 2))
    tau = 0.5
    ref = propagate_cov_closed_loop(model, zero, np.zeros((1, 2)), tau).belief_end.P
    worst = 0.0
    for _ in range(count):
        K = rng.uniform(-10, 10, (1, 2))
        P1 = propagate_cov_closed_loop(model, zero, K, tau).belief_end.P
        worst = max(worst, float(np.abs(P1 - ref).max()))
    return CheckReport("firstinterval", worst <= tol, worst, tol, f"{count} random gains")


def check_chance(samples: int = 100_000, epsilon: float = 0.01, seed: int = CORPUS_SEED + 3) -> CheckReport:
    """Mean placed on the tightened bound; sampled violation within the binomial band."""
    rng = make_rng(seed)
    P = np.array([[0.04, 0.01], [0.01, 0.02]])
    H, h = np.array([1.0, 0.5]), 1.0
    row = tighten_state_row(H, h, epsilon, P)
    mu = H * row.h_tight / float(H @ H)
    x = rng.multivariate_normal(mu, P, samples, method="cholesky")
    freq = float(np.mean(x @ H > h))
    band = epsilon + 3.0 * math.sqrt(epsilon * (1 - epsilon) / samples)
    return CheckReport("chance", freq <= band, freq, band, f"{samples} samples at epsilon {epsilon}")


def reference_plan():
    """Fixed plan on the noisy double integrator used by the sampling check."""
    model = LinearSdeModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], 0.01 * np.eye(2), [[1.0, 0.0]])
    sched = TriggerSchedule([0.2, 0.3, 0.2, 0.3], 0.1, 0.8)
    plan = AffineFeedbackPlan(np.array([[1.0], [-0.5], [0.2], [0.0]]), np.array([[-2.0, -1.5]]), sched)
    return model, plan


def check_monte_carlo(samples: int = 100_000, seed: int = CORPUS_SEED + 4, sigmas: float = 3.0) -> CheckReport:
    """Open-loop execution of a fixed plan vs the predicted covariance at every trigger.

    The Euler-Maruyama step is 1e-3 of the shortest interval.  The score is
    the largest |empirical - predicted| entry in units of its standard error,
    sqrt((P_ii P_jj + P_ij^2) / S) for a Gaussian sample covariance.
    """
    model, plan = reference_plan()
    x0 = np.zeros(model.nx)
    step = 1e-3 * float(plan.schedule.deltas.min())
    X = apply_plan_open_loop(model, plan, x0, rng=make_rng(seed), em_step=step, samples=samples)
    P = np.zeros((model.nx, model.nx))
    worst = 0.0
    per_trigger = []
    for k, tau in enumerate(plan.schedule.deltas):
        P, _ = propagate_cov_exact(model, P, plan.K, tau)
        emp = np.cov(X[k + 1], rowvar=False)
        d = np.sqrt(np.diag(P))
        se = np.sqrt((np.outer(d, d) ** 2 + P ** 2) / samples)
        score = float(np.max(np.abs(emp - P) / se))
        per_trigger.append(score)
        worst = max(worst, score)
    return CheckReport("montecarlo", worst <= sigmas, worst, sigmas,
                       f"{samples} samples, worst z-score per trigger {np.round(per_trigger, 2).tolist()}",
                       extra={"per_trigger": per_trigger})


def run_suite(name: str, **kw) -> list:
    """Run one named suite, or every suite for ``"all"``."""
    checks = {
        "covprop": check_covprop,
        "decomposition": check_decomposition,
        "quantile": check_quantile,
        "firstinterval": check_first_interval,
        "chance": check_chance,
        "montecarlo": check_monte_carlo,
    }
    if name == "all":
        return [checks[s]() for s in SUITES]
    if name not in checks:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    return [checks[name](**kw)]
