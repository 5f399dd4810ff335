"""Receding-horizon execution on the SDE and Monte Carlo harness.

At every trigger the state is measured exactly, so the belief collapses to
a point and the applied input is the nominal ``v_0`` alone; the gain K only
shapes the predicted covariance (and therefore the tightening) inside the
optimizer.  Between triggers the SDE is integrated with Euler-Maruyama.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covprop import propagate_mean
from .model import AffineFeedbackPlan, GaussianBelief, LinearSdeModel, Scenario, resource_step
from .nlpsolve.sqp import CONVERGED, INFEASIBLE, MAX_ITER, SolveOptions, solve
from .transcription import transcribe

CSV_HEADER = ("t", "y", "ref", "ymax", "ymin", "r", "rmax", "rmin", "dt", "dtmax", "dtmin")
ACCEPTED = "accepted"  # feasible iterate at the iteration cap
LEAST_VIOLATION = "least-violation"  # no feasible plan exists from the measured state
FALLBACK = "fallback"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based stream; distinct seeds give decorrelated streams."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def noise_factor(Q) -> np.ndarray:
    """L with L L^T = Q for PSD (possibly singular) Q."""
    Q = np.asarray(Q, float)
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("noise covariance must be symmetric")
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if w.min(initial=0.0) < -1e-10 * max(1.0, np.abs(w).max(initial=0.0)):
        raise ValueError("noise covariance is not positive semidefinite")
    return V * np.sqrt(np.maximum(w, 0.0))


def simulate_interval(model: LinearSdeModel, x0, u, tau: float, steps: int, rng: np.random.Generator):
    """Euler-Maruyama path over (0, tau] with the input held at ``u``.

    ``x0`` may be a single state (nx,) or a batch (S, nx); the returned path
    has shape (steps + 1, nx) or (steps + 1, S, nx) and includes the start.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be positive")
    h = tau / steps
    L = noise_factor(model.Q)
    x = np.array(x0, dtype=float)
    u = np.atleast_1d(np.asarray(u, float))
    F = np.eye(model.nx) + h * model.A  # applied on the right: x F^T
    drift = h * (u @ model.B.T)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    if model.noiseless:
        for i in range(steps):
            x = x @ F.T + drift
            out[i + 1] = x
        return out
    G = np.sqrt(h) * L
    for i in range(steps):
        xi = rng.standard_normal(x.shape)
        x = x @ F.T + drift + xi @ G.T
        out[i + 1] = x
    return out


def _em_steps(tau: float, em_step: float) -> int:
    return max(1, int(np.ceil(tau / em_step - 1e-9)))


@dataclass
class TriggerRecord:
    t: float
    x: np.ndarray
    u: np.ndarray
    delta: float
    r: float
    status: str
    iterations: int = 0
    wall_time: float = 0.0
    objective: float = float("nan")


@dataclass
class TrajectoryLog:
    """Per-trigger records plus the dense Euler-Maruyama path."""

    triggers: list
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ref: np.ndarray
    r: np.ndarray
    dt: np.ndarray
    bounds: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def trigger_times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.triggers])

    @property
    def deltas(self) -> np.ndarray:
        return np.array([rec.delta for rec in self.triggers])

    @property
    def resource_levels(self) -> np.ndarray:
        return np.array([rec.r for rec in self.triggers])

    @property
    def statuses(self) -> list:
        return [rec.status for rec in self.triggers]

    def csv_rows(self):
        b = self.bounds
        y = self.y[:, 0] if self.y.ndim == 2 else self.y
        ref = self.ref[:, 0] if self.ref.ndim == 2 else self.ref
        for i in range(len(self.t)):
            yield (self.t[i], y[i], ref[i], b.get("ymax", np.inf), b.get("ymin", -np.inf), self.r[i],
                   b.get("rmax", np.nan), b.get("rmin", np.nan), self.dt[i],
                   b.get("dtmax", np.nan), b.get("dtmin", np.nan))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.csv_rows():
                w.writerow([repr(float(v)) for v in row])

    def to_dict(self, include_timing: bool = False) -> dict:
        """Full-state record; wall times are left out unless asked for, keeping output reproducible."""
        trig = []
        for rec in self.triggers:
            d = {"t": rec.t, "x": rec.x.tolist(), "u": rec.u.tolist(), "delta": rec.delta, "r": rec.r,
                 "status": rec.status, "iterations": rec.iterations, "objective": rec.objective}
            if include_timing:
                d["wall_time"] = rec.wall_time
            trig.append(d)
        return {"meta": self.meta, "bounds": {k: float(v) for k, v in self.bounds.items()}, "triggers": trig,
                "dense": {"t": self.t.tolist(), "x": self.x.tolist()}}

    def to_json(self, path, include_timing: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=1))


def _bounds(scenario: Scenario) -> dict:
    ymin, ymax = scenario.output_bounds()
    res = scenario.resource
    return {"ymax": ymax, "ymin": ymin, "rmax": res.r_max, "rmin": res.r_min,
            "dtmax": scenario.delta_max, "dtmin": scenario.delta_min}


class _DenseBuilder:
    def __init__(self, model, x0, t0, r0, dt0):
        self.model = model
        self.t, self.x, self.r, self.dt = [np.array([t0])], [np.atleast_2d(x0)], [np.array([r0])], [np.array([dt0])]

    def add(self, t_start, path, r, dt):
        steps = len(path) - 1
        self.t.append(t_start + dt * np.arange(1, steps + 1) / steps)
        self.x.append(path[1:])
        self.r.append(np.full(steps, r))
        self.dt.append(np.full(steps, dt))

    def finish(self, triggers, reference, bounds, meta):
        t = np.concatenate(self.t)
        x = np.vstack(self.x)
        y = x @ self.model.C.T
        ref = reference(t) if reference is not None else np.full_like(y, np.nan)
        return TrajectoryLog(triggers, t, x, y, ref, np.concatenate(self.r), np.concatenate(self.dt), bounds, meta)


def apply_plan_open_loop(model: LinearSdeModel, plan: AffineFeedbackPlan, x0, mu=None,
                         rng: np.random.Generator | None = None, em_step: float = 1e-3,
                         samples: int | None = None):
    """Execute a whole plan without re-solving.

    At each trigger the input is held at v_k + K (x(t_k) - mu(t_k)).  With
    ``samples`` given, a batch of that many paths is run and the states at
    the trigger instants are returned as an array (N + 1, samples, nx);
    otherwise a single :class:`TrajectoryLog` is returned.
    ``mu`` defaults to the nominal mean at the triggers started from ``x0``.
    """
    rng = make_rng(0) if rng is None else rng
    x0 = np.asarray(x0, float)
    deltas = plan.schedule.deltas
    if mu is None:
        mu = [x0]
        for k, tau in enumerate(deltas):
            mu.append(propagate_mean(model, mu[-1], plan.v[k], tau))
    mu = np.asarray(mu, float)
    times = plan.schedule.times()
    if samples is not None:
        x = np.broadcast_to(x0, (samples, model.nx)).copy()
        at_triggers = [x.copy()]
        for k, tau in enumerate(deltas):
            u = plan.v[k] + (x - mu[k]) @ plan.K.T
            x = simulate_interval(model, x, u, tau, _em_steps(tau, em_step), rng)[-1]
            at_triggers.append(x.copy())
        return np.array(at_triggers)
    dense = _DenseBuilder(model, x0, 0.0, np.nan, deltas[0])
    triggers = []
    x = x0
    for k, tau in enumerate(deltas):
        u = plan.v[k] + plan.K @ (x - mu[k])
        triggers.append(TriggerRecord(float(times[k]), x.copy(), u.copy(), float(tau), float("nan"), "open-loop"))
        path = simulate_interval(model, x, u, tau, _em_steps(tau, em_step), rng)
        dense.add(times[k], path, np.nan, tau)
        x = path[-1]
    bounds = {"dtmax": plan.schedule.delta_max, "dtmin": plan.schedule.delta_min}
    return dense.finish(triggers, None, bounds, {"mode": "open-loop"})


@dataclass
class ClosedLoopOptions:
    """Knobs for the receding-horizon loop.

    Unset fields fall back to the scenario.  ``max_iter`` caps SQP
    iterations per warm-started trigger, ``first_max_iter`` the cold first
    solve.  An iterate at the cap whose constraint residual is below
    ``accept_tol`` is applied (status ``accepted``); when the solver detects
    infeasibility its least-violating iterate is applied.
    ``stochastic=None`` follows the scenario (deterministic when Q = 0 and
    tightening is off).
    """

    t_end: float | None = None
    horizon: int | None = None
    max_iter: int | None = None
    first_max_iter: int | None = None
    warm_start: bool = True
    stochastic: bool | None = None
    em_step: float | None = None
    tol: float | None = None
    constraint_tol: float | None = None
    accept_tol: float = 1e-5


def _solve_options(scenario: Scenario, opts: ClosedLoopOptions, first: bool) -> SolveOptions:
    so = scenario.options
    if first:
        cap = opts.first_max_iter or so.max_iter
    else:
        cap = opts.max_iter or so.loop_max_iter
    return SolveOptions(max_iter=cap, tol=opts.tol or so.tol, constraint_tol=opts.constraint_tol or so.constraint_tol)


def _is_stochastic(scenario: Scenario, opts: ClosedLoopOptions) -> bool:
    if opts.stochastic is not None:
        return opts.stochastic
    return not (scenario.model.noiseless and not scenario.tightening)


def plan_at(scenario: Scenario, x, r: float, t: float, opts: ClosedLoopOptions, z_prev=None, first=False,
            hessian_prev=None):
    """Transcribe and solve at one trigger; returns (problem, layout, result, verdict).

    ``verdict`` is the status to log when the result may be applied, else None.
    """
    prob, layout = transcribe(scenario, GaussianBelief.exact(x), r, t,
                              stochastic=_is_stochastic(scenario, opts), horizon=opts.horizon)
    tr = prob.context
    warm = z_prev is not None and opts.warm_start
    z0 = tr.shift(z_prev) if warm else tr.initial_guess()
    H0 = tr.shift_hessian(hessian_prev) if warm else None
    sopts = _solve_options(scenario, opts, first)
    res = solve(prob, z0, sopts, hessian0=H0)
    if res.status == CONVERGED:
        verdict = CONVERGED
    elif res.status == MAX_ITER and res.constraint_residual <= opts.accept_tol:
        verdict = ACCEPTED
    elif res.status == INFEASIBLE and np.isfinite(res.constraint_residual):
        verdict = LEAST_VIOLATION
    else:
        verdict = None
    return prob, layout, res, verdict


def _resource_floor(scenario: Scenario, r: float, d: float) -> float:
    """Shortest interval >= d that keeps the next resource level above r_min, if any exists."""
    res = scenario.resource
    if res.rho > res.eta1:
        need = (res.eta0 + res.r_min - r) / (res.rho - res.eta1)
        d = max(d, min(need, scenario.delta_max))
    return float(np.clip(d, scenario.delta_min, scenario.delta_max))


def _clip_input(scenario: Scenario, v) -> np.ndarray:
    """Project onto the hard input box; least-violation plans may leave it."""
    v = np.asarray(v, float).copy()
    for con in scenario.input_constraints:
        for H, h in zip(con.H, con.h):
            excess = float(H @ v) - h
            if excess > 0:
                v -= excess * H / float(H @ H)
    return v


def _fallback(scenario: Scenario, layout, z_prev):
    """Second interval of the previous plan (the plan shifted by one)."""
    if z_prev is None:
        return np.zeros(scenario.model.nu), scenario.delta_max
    k = min(1, layout.N - 1)
    return layout.v(z_prev)[k], float(layout.delta(z_prev)[k])


def run_closed_loop(scenario: Scenario, rng: np.random.Generator | None = None,
                    opts: ClosedLoopOptions | None = None, seed: int | None = None) -> TrajectoryLog:
    """Measure, solve, apply v_0 for Delta_0, recharge, repeat until the end time."""
    opts = opts or ClosedLoopOptions()
    if rng is None:
        rng = make_rng(scenario.seed if seed is None else seed)
    model, res_spec = scenario.model, scenario.resource
    t_end = opts.t_end if opts.t_end is not None else scenario.t_end
    em_step = opts.em_step or scenario.options.em_step
    t, x, r = 0.0, scenario.x0.astype(float).copy(), float(res_spec.r0)
    z_prev, H_prev, layout_prev = None, None, None
    triggers = []
    dense = None
    while t < t_end - 1e-9:
        start = time.perf_counter()
        prob, layout, res, verdict = plan_at(scenario, x, r, t, opts, z_prev, first=z_prev is None,
                                             hessian_prev=H_prev)
        wall = time.perf_counter() - start
        if verdict is not None:
            v0, d = layout.v(res.z)[0], float(layout.delta(res.z)[0])
            status = verdict
            z_prev, H_prev = res.z, res.hessian
        else:
            v0, d = _fallback(scenario, layout_prev or layout, z_prev)
            status = f"{FALLBACK}:{res.status}"
            z_prev = None if z_prev is None else prob.context.shift(z_prev)
            H_prev = None
        d = _resource_floor(scenario, r, d)
        v0 = _clip_input(scenario, v0)
        layout_prev = layout
        triggers.append(TriggerRecord(t, x.copy(), v0, d, r, status, res.iterations, wall, res.objective))
        if dense is None:
            dense = _DenseBuilder(model, x, t, r, d)
        path = simulate_interval(model, x, v0, d, _em_steps(d, em_step), rng)
        dense.add(t, path, r, d)
        x = path[-1].copy()
        r = resource_step(r, d, res_spec)
        t = t + d
    meta = {"scenario": scenario.name, "t_end": t_end, "stochastic": _is_stochastic(scenario, opts),
            "horizon": opts.horizon or scenario.horizon_n,
            "max_iter": opts.max_iter or scenario.options.loop_max_iter}
    return dense.finish(triggers, scenario.cost.reference, _bounds(scenario), meta)


@dataclass
class EnsembleStats:
    """Statistics over closed-loop samples on a common time grid (linear interpolation)."""

    n_samples: int
    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    violation: dict
    delta_hist: np.ndarray
    delta_edges: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def max_violation(self) -> dict:
        return {k: float(np.max(v, initial=0.0)) for k, v in self.violation.items()}

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "max_violation": self.max_violation,
            "times": self.times.tolist(),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "violation": {k: v.tolist() for k, v in self.violation.items()},
            "delta_hist": self.delta_hist.tolist(),
            "delta_edges": self.delta_edges.tolist(),
            "failures": self.failures,
        }


def resample(log: TrajectoryLog, times: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(times, log.t, log.x[:, i]) for i in range(log.x.shape[1])], axis=-1)


def ensemble_stats(scenario: Scenario, logs: list, grid_step: float = 0.01, t_end: float | None = None,
                   failures=None) -> EnsembleStats:
    t_end = t_end if t_end is not None else scenario.t_end
    times = np.arange(0.0, t_end + 0.5 * grid_step, grid_step)
    X = np.array([resample(log, times) for log in logs])  # (S, T, nx)
    mean = X.mean(axis=0)
    dev = X - mean
    cov = np.einsum("sti,stj->tij", dev, dev) / max(len(logs) - 1, 1)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    violation = {}
    for ci, con in enumerate(scenario.state_constraints):
        for j, (H, h) in enumerate(zip(con.H, con.h)):
            violation[f"state{ci}.{j}"] = (X @ H > h).mean(axis=0)
    for ci, con in enumerate(scenario.input_constraints):
        for j, (H, h) in enumerate(zip(con.H, con.h)):
            u = np.concatenate([[rec.u for rec in log.triggers] for log in logs])
            violation[f"input{ci}.{j}"] = np.array([(u @ H > h + 1e-12).mean()])
    edges = np.linspace(scenario.delta_min, scenario.delta_max, 15)
    deltas = np.concatenate([log.deltas for log in logs])
    hist, _ = np.histogram(deltas, bins=edges)
    return EnsembleStats(len(logs), times, mean, cov, violation, hist, edges, list(failures or []))


def _one_sample(args):
    scenario, seed, opts = args
    return run_closed_loop(scenario, make_rng(seed), opts)


def monte_carlo(scenario: Scenario, samples: int, base_seed: int = 0, opts: ClosedLoopOptions | None = None,
                workers: int = 1, grid_step: float = 0.01):
    """Independent closed-loop runs; sample i uses stream key ``base_seed + i``.

    Returns ``(stats, logs)``.  A sample that raises is recorded in
    ``stats.failures`` and left out of ``logs``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    opts = opts or ClosedLoopOptions()
    jobs = [(scenario, base_seed + i, opts) for i in range(samples)]
    results = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_sample, job) for job in jobs]
            for i, fut in enumerate(futures):  # fixed order keeps the reduction deterministic
                try:
                    results.append((i, fut.result(), None))
                except Exception as exc:  # noqa: BLE001
                    results.append((i, None, f"{type(exc).__name__}: {exc}"))
    else:
        for i, job in enumerate(jobs):
            try:
                results.append((i, _one_sample(job), None))
            except Exception as exc:  # noqa: BLE001
                results.append((i, None, f"{type(exc).__name__}: {exc}"))
    logs = [log for _, log, _ in results if log is not None]
    failures = [{"sample": i, "seed": base_seed + i, "error": err} for i, _, err in results if err]
    if not logs:
        raise RuntimeError(f"all {samples} Monte Carlo samples failed: {failures[0]['error']}")
    t_end = opts.t_end if opts.t_end is not None else scenario.t_end
    return ensemble_stats(scenario, logs, grid_step, t_end, failures), logs
