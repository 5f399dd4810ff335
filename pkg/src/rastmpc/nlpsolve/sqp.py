"""Line-search SQP with a damped BFGS Hessian and an l1 exact-penalty merit."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, TextIO

import numpy as np

from .qp import NullSpace, solve_qp

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible-detected"
NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class NlpProblem:
    """min f(z) s.t. eq(z) = 0, ineq(z) <= 0, lb <= z <= ub.

    ``dependent`` optionally names one variable per equality row whose
    Jacobian block is square and nonsingular (e.g. the collocation states);
    the solver then eliminates equalities by variable reduction.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq: Optional[Callable] = None
    eq_jac: Optional[Callable] = None
    ineq: Optional[Callable] = None
    ineq_jac: Optional[Callable] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    dependent: Optional[np.ndarray] = None
    initial_hessian: Optional[Callable] = None
    context: Any = None

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if np.any(self.lb > self.ub):
            raise ValueError("infeasible variable bounds: lb > ub")

    def eval_eq(self, z):
        return np.zeros(0) if self.eq is None else np.asarray(self.eq(z), float)

    def eval_eq_jac(self, z):
        return np.zeros((0, self.n)) if self.eq_jac is None else np.asarray(self.eq_jac(z), float)

    def eval_ineq(self, z):
        return np.zeros(0) if self.ineq is None else np.asarray(self.ineq(z), float)

    def eval_ineq_jac(self, z):
        return np.zeros((0, self.n)) if self.ineq_jac is None else np.asarray(self.ineq_jac(z), float)


@dataclass
class SolveOptions:
    max_iter: int = 200
    tol: float = 1e-6
    constraint_tol: float = 1e-7
    penalty_init: float = 1.0
    penalty_margin: float = 1.5
    armijo: float = 1e-4
    min_step: float = 1e-10
    derivative_mode: str = "analytic"
    fd_step: float = 1e-7
    regularization: float = 1e-8
    reset_after: int = 5
    max_elastic: int = 10
    log_stream: Optional[TextIO] = None
    hessian: str = "full"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.derivative_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown derivative mode {self.derivative_mode!r}")
        if self.hessian not in ("reduced", "full"):
            raise ValueError(f"unknown hessian mode {self.hessian!r}")


@dataclass
class SolveResult:
    status: str
    z: np.ndarray
    objective: float
    kkt_residual: float
    constraint_residual: float
    complementarity: float
    iterations: int
    lam_eq: np.ndarray
    mu_ineq: np.ndarray
    mu_bounds: np.ndarray
    log: list = field(default_factory=list)
    hessian: Optional[np.ndarray] = None

    @property
    def success(self) -> bool:
        return self.status == CONVERGED


def _fd_gradient(fun, z, h):
    g = np.empty(len(z))
    for i in range(len(z)):
        e = np.zeros(len(z))
        e[i] = h
        g[i] = (fun(z + e) - fun(z - e)) / (2 * h)
    return g


def _fd_jacobian(fun, z, h, m):
    J = np.empty((m, len(z)))
    for i in range(len(z)):
        e = np.zeros(len(z))
        e[i] = h
        J[:, i] = (fun(z + e) - fun(z - e)) / (2 * h)
    return J


class _Evaluator:
    def __init__(self, problem: NlpProblem, opts: SolveOptions):
        self.p = problem
        self.fd = opts.derivative_mode == "finite-difference"
        self.h = opts.fd_step

    def values(self, z):
        p = self.p
        return float(p.objective(z)), p.eval_eq(z), p.eval_ineq(z)

    def derivatives(self, z, ce, ci):
        p = self.p
        if self.fd:
            g = _fd_gradient(p.objective, z, self.h)
            Je = _fd_jacobian(p.eval_eq, z, self.h, len(ce))
            Ji = _fd_jacobian(p.eval_ineq, z, self.h, len(ci))
        else:
            g = np.asarray(p.gradient(z), float)
            Je, Ji = p.eval_eq_jac(z), p.eval_ineq_jac(z)
        return g, Je, Ji


def _violation(ce, ci, we=None, wi=None) -> float:
    """(Weighted) l1 constraint violation."""
    if we is None:
        return float(np.abs(ce).sum() + np.maximum(ci, 0.0).sum())
    return float(we @ np.abs(ce) + wi @ np.maximum(ci, 0.0))


def kkt_residuals(problem: NlpProblem, z, lam_eq, mu_ineq, mu_bounds):
    """(stationarity, primal feasibility, complementarity) at z with the given multipliers.

    ``mu_bounds`` is signed: positive for an active upper bound, negative for
    an active lower bound.
    """
    g = np.asarray(problem.gradient(z), float)
    ce, ci = problem.eval_eq(z), problem.eval_ineq(z)
    Je, Ji = problem.eval_eq_jac(z), problem.eval_ineq_jac(z)
    grad_l = g + Je.T @ lam_eq + Ji.T @ mu_ineq + mu_bounds
    stat = float(np.abs(grad_l).max(initial=0.0))
    bound_viol = np.maximum(problem.lb - z, 0.0).max(initial=0.0), np.maximum(z - problem.ub, 0.0).max(initial=0.0)
    feas = float(max(np.abs(ce).max(initial=0.0), np.maximum(ci, 0.0).max(initial=0.0), *bound_viol))
    comp_i = np.abs(mu_ineq * ci).max(initial=0.0)
    gap_lb = np.where(np.isfinite(problem.lb), z - problem.lb, 0.0)  # infinite bounds carry no multiplier
    gap_ub = np.where(np.isfinite(problem.ub), problem.ub - z, 0.0)
    comp_b = np.where(mu_bounds > 0, mu_bounds * gap_ub, -mu_bounds * gap_lb)
    comp = float(max(comp_i, np.abs(comp_b).max(initial=0.0)))
    neg = float(max(0.0, -mu_ineq.min(initial=0.0)))
    return stat, feas, max(comp, neg)


def _bound_rows(z, lb, ub):
    """Bound constraints lb <= z + p <= ub as rows S p <= s (signs +1 upper / -1 lower)."""
    iu = np.flatnonzero(np.isfinite(ub))
    il = np.flatnonzero(np.isfinite(lb))
    n = len(z)
    S = np.zeros((len(iu) + len(il), n))
    S[np.arange(len(iu)), iu] = 1.0
    S[len(iu) + np.arange(len(il)), il] = -1.0
    s = np.concatenate([ub[iu] - z[iu], z[il] - lb[il]])
    return S, s, iu, il


def _bfgs_update(H, s, y):
    """Powell-damped BFGS; returns (H_new, damped)."""
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 1e-16:
        return H, False
    sy = float(s @ y)
    damped = sy < 0.2 * sHs
    if damped:
        theta = 0.8 * sHs / (sHs - sy)
        y = theta * y + (1.0 - theta) * Hs
        sy = float(s @ y)
    Hn = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    return 0.5 * (Hn + Hn.T), damped


def solve(problem: NlpProblem, z0, opts: SolveOptions | None = None, hessian0=None) -> SolveResult:
    """Minimize ``problem`` from ``z0`` by sequential quadratic programming.

    With ``problem.dependent`` set, BFGS runs on the reduced Hessian over the
    independent variables (``opts.hessian == "reduced"``), otherwise on the
    full Hessian of the Lagrangian.  ``hessian0`` seeds the quasi-Newton
    matrix (e.g. ``SolveResult.hessian`` of a related solve).
    """
    opts = opts or SolveOptions()
    z0 = np.asarray(z0, float)
    if z0.shape != (problem.n,):
        raise ValueError(f"initial point has shape {z0.shape}, expected ({problem.n},)")
    ev = _Evaluator(problem, opts)
    lb, ub = problem.lb, problem.ub
    z = np.clip(z0, lb, ub)
    n = problem.n
    log: list = []

    def emit(rec):
        log.append(rec)
        if opts.log_stream is not None:
            opts.log_stream.write(json.dumps(rec) + "\n")

    def fail(status, z, f=np.nan):
        return SolveResult(status, z, f, np.inf, np.inf, np.inf, 0, np.zeros(0), np.zeros(0), np.zeros(n), log)

    f, ce, ci = ev.values(z)
    if not (np.isfinite(f) and np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))):
        return fail(NUMERICAL_FAILURE, z, f)
    g, Je, Ji = ev.derivatives(z, ce, ci)
    dep = problem.dependent
    reduced = opts.hessian == "reduced" and dep is not None and len(ce) > 0

    def nullspace(J):
        return NullSpace(J, dep) if len(ce) else None

    try:
        ns = nullspace(Je)
    except (np.linalg.LinAlgError, ValueError):
        return fail(NUMERICAL_FAILURE, z, f)

    def initial_h(z, ns):
        if problem.initial_hessian is not None:
            H0 = np.array(problem.initial_hessian(z), float)
        else:
            H0 = np.eye(n)
        if reduced:
            H0 = ns.Z.T @ H0 @ ns.Z
        return H0 + opts.regularization * np.eye(len(H0))

    H = initial_h(z, ns)
    fresh = True
    if hessian0 is not None and np.shape(hessian0) == H.shape:
        H = np.array(hessian0, float)
        fresh = False
    # one l1 weight per constraint, kept above the multiplier estimates
    we = np.full(len(ce), opts.penalty_init)
    wi = np.full(len(ci), opts.penalty_init)
    damped_run = 0
    elastic_run = 0
    best = None
    lam = np.zeros(len(ce))
    mu = np.zeros(len(ci))
    mub = np.zeros(n)
    # multipliers of the last non-elastic QP; elastic ones scale with its penalty
    qn_lam, qn_mu, qn_mub = lam, mu, mub
    status = MAX_ITER
    last_qp_status = "optimal"

    for it in range(1, opts.max_iter + 1):
        S, s, iu, il = _bound_rows(z, lb, ub)
        G = np.vstack([Ji, S])
        hv = np.concatenate([-ci, s])
        soft = np.concatenate([np.ones(len(ci), bool), np.zeros(len(s), bool)])
        try:
            if reduced:
                qp = solve_qp(None, g, Je, -ce, G, hv, soft=soft, nullspace=ns, reduced_hessian=H)
            else:
                qp = solve_qp(H, g, Je, -ce, G, hv, soft=soft, dependent=dep, nullspace=ns)
        except (np.linalg.LinAlgError, ValueError):
            status = NUMERICAL_FAILURE
            break
        p = qp.x
        last_qp_status = qp.status
        elastic_run = elastic_run + 1 if qp.status == "infeasible" else 0
        lam = qp.lam_eq
        mu = qp.mu[: len(ci)]
        mb = qp.mu[len(ci):]
        mub = np.zeros(n)
        mub[iu] += mb[: len(iu)]
        mub[il] -= mb[len(iu):]
        if qp.status != "infeasible":
            qn_lam, qn_mu, qn_mub = lam, mu, mub

        grad_l = g + Je.T @ lam + Ji.T @ mu + mub
        stat = float(np.abs(grad_l).max(initial=0.0))
        feas = float(max(np.abs(ce).max(initial=0.0), np.maximum(ci, 0.0).max(initial=0.0)))
        comp = float(np.abs(mu * ci).max(initial=0.0))
        viol = _violation(ce, ci)
        rec = {"iter": it, "f": f, "stationarity": stat, "feasibility": feas,
               "complementarity": comp, "penalty": float(max(we.max(initial=0.0), wi.max(initial=0.0))), "qp": qp.status,
               "step": float(np.abs(p).max(initial=0.0))}
        infeasible_pt = feas > opts.constraint_tol
        key = (infeasible_pt, feas if infeasible_pt else f)
        if best is None or key < best[0]:
            best = (key, z.copy(), f, stat, feas, comp, lam.copy(), mu.copy(), mub.copy())
        if stat <= opts.tol and feas <= opts.constraint_tol and comp <= opts.tol and qp.status != "infeasible":
            status = CONVERGED
            rec["accepted"] = None
            emit(rec)
            return SolveResult(status, z, f, stat, feas, comp, it, lam, mu, mub, log, H)
        if elastic_run >= opts.max_elastic:
            status = INFEASIBLE
            emit(rec)
            break

        if qp.status != "infeasible":
            # Powell's rule: above margin * |multiplier|, relaxing halfway otherwise
            te = opts.penalty_margin * np.abs(lam)
            ti = opts.penalty_margin * np.abs(mu)
            we = np.where(we < te, te, 0.5 * (we + te))
            wi = np.where(wi < ti, ti, 0.5 * (wi + ti))
        ce_lin = ce + Je @ p
        ci_lin = ci + Ji @ p
        if reduced:
            w = p[ns.ind]
            pHp = float(w @ H @ w)
        else:
            pHp = float(p @ H @ p)
        drop = _violation(ce, ci, we, wi) - _violation(ce_lin, ci_lin, we, wi)
        D = float(g @ p) - drop
        if D > -1e-14 * (1.0 + abs(f)):
            raw = _violation(ce, ci) - _violation(ce_lin, ci_lin)
            if raw > 0:
                # lift every weight to at least a uniform level that makes p a descent direction
                level = 1.1 * (float(g @ p) + 0.5 * pHp) / (0.9 * raw)
                if level > 0:
                    we = np.maximum(we, level)
                    wi = np.maximum(wi, level)
                drop = _violation(ce, ci, we, wi) - _violation(ce_lin, ci_lin, we, wi)
                D = float(g @ p) - drop
        phi0 = f + _violation(ce, ci, we, wi)

        def merit(zt):
            ft, cet, cit = ev.values(zt)
            if not (np.isfinite(ft) and np.all(np.isfinite(cet)) and np.all(np.isfinite(cit))):
                return np.inf, None
            return ft + _violation(cet, cit, we, wi), (ft, cet, cit)

        def correct(zt, vals):
            # second-order correction: restore the equalities through a minimum-norm
            # (or dependent-variable) step with the current Jacobian
            if vals is None or ns is None:
                return None
            try:
                corr = ns.particular(-vals[1]) if dep is not None \
                    else -np.linalg.lstsq(Je, vals[1], rcond=None)[0]
            except (np.linalg.LinAlgError, ValueError):
                return None
            return np.clip(zt + corr, lb, ub)

        alpha = 1.0
        accepted = None
        while accepted is None and alpha >= opts.min_step:
            z_try = np.clip(z + alpha * p, lb, ub)
            phi, vals = merit(z_try)
            target = phi0 + opts.armijo * alpha * D
            if phi <= target:
                accepted = (z_try, vals, "full" if alpha == 1.0 else f"alpha={alpha:.3g}")
                break
            z_soc = correct(z_try, vals)
            if z_soc is not None:
                phi_soc, vals_soc = merit(z_soc)
                if phi_soc <= target:
                    accepted = (z_soc, vals_soc, "soc" if alpha == 1.0 else f"soc alpha={alpha:.3g}")
                    break
            alpha *= 0.5

        if accepted is None:
            rec["accepted"] = "none"
            emit(rec)
            if not fresh:
                H = initial_h(z, ns)
                fresh = True
                continue
            # no descent on an elastic step: z is stationary for the violation
            status = INFEASIBLE if qp.status == "infeasible" else NUMERICAL_FAILURE
            break

        z_new, (f_new, ce_new, ci_new), how = accepted
        g_new, Je_new, Ji_new = ev.derivatives(z_new, ce_new, ci_new)
        try:
            ns_new = nullspace(Je_new)
        except (np.linalg.LinAlgError, ValueError):
            status = NUMERICAL_FAILURE
            break
        phi_new = f_new + _violation(ce_new, ci_new, we, wi)
        rec.update({"accepted": how, "merit_before": phi0, "merit_after": phi_new})
        emit(rec)

        sstep = z_new - z
        if reduced:
            gl_old = g + Ji.T @ qn_mu + qn_mub
            gl_new = g_new + Ji_new.T @ qn_mu + qn_mub
            H, damped = _bfgs_update(H, sstep[ns.ind], ns_new.Z.T @ gl_new - ns.Z.T @ gl_old)
        else:
            ydiff = (g_new + Je_new.T @ qn_lam + Ji_new.T @ qn_mu) - (g + Je.T @ qn_lam + Ji.T @ qn_mu)
            H, damped = _bfgs_update(H, sstep, ydiff)
        fresh = False
        damped_run = damped_run + 1 if damped else 0
        if damped_run >= opts.reset_after:
            H = initial_h(z_new, ns_new)
            fresh = True
            damped_run = 0
        z, f, ce, ci, g, Je, Ji, ns = z_new, f_new, ce_new, ci_new, g_new, Je_new, Ji_new, ns_new

    if status == MAX_ITER and last_qp_status == "infeasible":
        status = INFEASIBLE
    # certify the best iterate seen
    _, zb, fb, statb, feasb, compb, lamb, mub_b, mubb = best if best is not None else (None, z, f, np.inf, np.inf, np.inf, lam, mu, mub)
    return SolveResult(status, zb, fb, statb, feasb, compb, len(log), lamb, mub_b, mubb, log, H)


def check_derivatives(problem: NlpProblem, z, scale: float = 1e-5) -> float:
    """Worst relative discrepancy between analytic and finite-difference derivatives.

    Central differences at steps h and h/2 are Richardson-combined, so the
    reference is O(h^4) accurate; plain central differences at h = 1e-5 are
    off by ~1e-5 on the strongly curved square-root rows of the tightening.
    """
    z = np.asarray(z, float)
    worst = 0.0
    pairs = [(lambda x: np.atleast_1d(problem.objective(x)), lambda x: np.atleast_2d(problem.gradient(x)))]
    if problem.eq is not None:
        pairs.append((problem.eval_eq, problem.eval_eq_jac))
    if problem.ineq is not None:
        pairs.append((problem.eval_ineq, problem.eval_ineq_jac))
    for fun, jac in pairs:
        J = jac(z)
        m = J.shape[0]
        if m == 0:
            continue
        Jfd = (4.0 * _fd_jacobian(fun, z, 0.5 * scale, m) - _fd_jacobian(fun, z, scale, m)) / 3.0
        err = np.abs(J - Jfd) / np.maximum(1.0, np.abs(Jfd))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
