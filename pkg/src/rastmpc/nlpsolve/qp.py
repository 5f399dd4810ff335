"""Dense convex QP: null-space elimination of equalities + primal active set.

    minimize    1/2 x^T H x + g^T x
    subject to  Aeq x = beq,   G x <= h

H must be positive definite on the null space of Aeq.  Inequalities are
handled by a primal active-set method started from a trivially feasible
point of an elastic reformulation: a single slack t >= 0 relaxes every soft
row (G x - t <= h) and carries a large linear penalty.  When the original
QP is feasible and the penalty exceeds the multiplier sum, the solution has
t = 0; otherwise the penalty is escalated and, failing that, the minimum
violation point is returned with ``status == "infeasible"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass
class QPResult:
    x: np.ndarray
    lam_eq: np.ndarray
    mu: np.ndarray
    status: str
    slack: float
    iterations: int
    eq_residual: float


class NullSpace:
    """Basis Z of null(Aeq), a particular solution, and multiplier recovery.

    With ``dependent`` indices (one per equality row) the variable-reduction
    basis Z = [-J_D^{-1} J_I; I] is used; otherwise a complete QR of Aeq^T.
    """

    def __init__(self, Aeq: np.ndarray, dependent=None):
        self.m, self.n = Aeq.shape
        self.Aeq = Aeq
        if self.m == 0:
            self.Z = np.eye(self.n)
            self.kind = "none"
            return
        if dependent is not None:
            dep = np.asarray(dependent)
            mask = np.ones(self.n, bool)
            mask[dep] = False
            ind = np.flatnonzero(mask)
            self.dep, self.ind = dep, ind
            self.lu = sla.lu_factor(Aeq[:, dep], check_finite=False)
            Z = np.zeros((self.n, len(ind)))
            Z[dep] = -sla.lu_solve(self.lu, Aeq[:, ind], check_finite=False)
            Z[ind, np.arange(len(ind))] = 1.0
            self.Z = Z
            self.kind = "reduction"
        else:
            Q, R = np.linalg.qr(Aeq.T, mode="complete")
            self.Y, self.Z = Q[:, : self.m], Q[:, self.m:]
            self.R = R[: self.m]
            self.kind = "qr"

    def particular(self, beq: np.ndarray) -> np.ndarray:
        """Some x with Aeq x = beq."""
        x = np.zeros(self.n)
        if self.kind == "reduction":
            x[self.dep] = sla.lu_solve(self.lu, beq, check_finite=False)
        elif self.kind == "qr":
            x = self.Y @ sla.solve_triangular(self.R, beq, trans="T", check_finite=False)
        return x

    def multipliers(self, r: np.ndarray) -> np.ndarray:
        """lam with Aeq^T lam = -r (least squares in the QR case)."""
        if self.kind == "reduction":
            return -sla.lu_solve(self.lu, r[self.dep], trans=1, check_finite=False)
        if self.kind == "qr":
            return -sla.solve_triangular(self.R, self.Y.T @ r, check_finite=False)
        return np.zeros(0)


def _kkt_solve(H, grad, Aw):
    n, k = H.shape[0], Aw.shape[0]
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = H
    KKT[:n, n:] = Aw.T
    KKT[n:, :n] = Aw
    rhs = np.concatenate([-grad, np.zeros(k)])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set(H, g, A, b, soft, max_iter, tol=1e-10):
    """Primal active set for min 1/2 w^T H w + g^T w + M t + 1/2 t^2, A w - soft*t <= b, t >= 0.

    The start (w, t) = (0, max soft violation) is feasible.  Once t reaches
    zero it is eliminated; it is only freed again if its multiplier turns
    negative after the penalty M has been escalated.
    """
    nw = len(g)
    m = A.shape[0]
    scale = 1.0 + np.abs(g).max(initial=0.0) + np.abs(np.diag(H)).max(initial=0.0)
    M = 100.0 * scale
    soft = soft.copy()
    soft[b < -tol] = True  # w = 0 must satisfy every hard row
    sv = soft.astype(float)
    w = np.zeros(nw)
    t = max(0.0, float(np.max(-b[soft], initial=0.0)))
    t_fixed = t == 0.0
    work: list[int] = []
    lam = np.zeros(0)
    escalations = 0
    at_min = False
    it = 0
    while it < max_iter:
        it += 1
        Aw = A[work]
        if t_fixed:
            p_w, lam = _kkt_solve(H, H @ w + g, Aw)
            p_t = 0.0
        else:
            Hy = np.zeros((nw + 1, nw + 1))
            Hy[:nw, :nw] = H
            Hy[nw, nw] = 1.0
            Ay = np.hstack([Aw, -sv[work, None]])
            p, lam = _kkt_solve(Hy, np.concatenate([H @ w + g, [t + M]]), Ay)
            p_w, p_t = p[:nw], p[nw]
        size = max(np.abs(p_w).max(initial=0.0), abs(p_t))
        if at_min or size <= tol * (1.0 + np.abs(w).max(initial=0.0) + t):
            at_min = True
            lam_t = M - float(sv[work] @ lam) if t_fixed else np.inf
            lam_min = lam.min(initial=np.inf)
            if min(lam_min, lam_t) >= -1e-9 * scale:
                if t > 0.0 and escalations < 4:
                    M *= 100.0
                    escalations += 1
                    at_min = False
                    continue
                break
            if lam_t < lam_min:
                if escalations < 4:
                    M *= 100.0
                    escalations += 1
                    continue
                t_fixed = False
            else:
                work.pop(int(np.argmin(lam)))
            at_min = False
            continue
        Ap = A @ p_w - sv * p_t
        slack = b - A @ w + sv * t
        alpha, block = 1.0, -1
        thresh = tol * (1.0 + size)
        for i in np.flatnonzero(Ap > thresh):
            if i in work:
                continue
            ratio = max(slack[i], 0.0) / Ap[i]
            if ratio < alpha:
                alpha, block = ratio, i
        hits_zero = not t_fixed and p_t < -thresh and t / -p_t <= alpha
        if hits_zero:
            alpha, block = t / -p_t, -2
        w = w + alpha * p_w
        t = max(t + alpha * p_t, 0.0)
        if block == -2:
            t, t_fixed = 0.0, True
            at_min = False
        elif block >= 0:
            work.append(int(block))
            at_min = False
        else:
            at_min = True
    mu = np.zeros(m)
    for idx, val in zip(work, lam):
        mu[idx] = max(val, 0.0)
    if t > 1e-9 * (1.0 + np.abs(b).max(initial=0.0)):
        status = "infeasible"
    else:
        t = 0.0
        status = "optimal" if it < max_iter else "max-iter"
    return w, mu, t, status, it


def solve_qp(H, g, Aeq=None, beq=None, G=None, h=None, *, soft=None, dependent=None, max_iter=None,
             nullspace=None, reduced_hessian=None) -> QPResult:
    """Solve the QP.  ``reduced_hessian`` replaces Z^T H Z (H may then be None)
    and drops the cross term Z^T H x_p, as in reduced-Hessian SQP."""
    g = np.asarray(g, float)
    n = len(g)
    Aeq = np.zeros((0, n)) if Aeq is None else np.atleast_2d(np.asarray(Aeq, float))
    beq = np.zeros(0) if beq is None else np.atleast_1d(np.asarray(beq, float))
    G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, float))
    h = np.zeros(0) if h is None else np.atleast_1d(np.asarray(h, float))
    soft = np.ones(len(h), bool) if soft is None else np.asarray(soft, bool)

    ns = nullspace if nullspace is not None else NullSpace(Aeq, dependent)
    xp = ns.particular(beq)
    Z = ns.Z
    if reduced_hessian is not None:
        Hr = np.asarray(reduced_hessian, float)
        gr = Z.T @ g
    else:
        H = np.asarray(H, float)
        Hr = Z.T @ H @ Z
        gr = Z.T @ (g + H @ xp)
    Hr = 0.5 * (Hr + Hr.T)
    Gr = G @ Z
    hr = h - G @ xp
    if max_iter is None:
        max_iter = 50 + 10 * (Z.shape[1] + len(h))
    if len(h):
        w, mu, slack, status, iters = _active_set(Hr, gr, Gr, hr, soft, max_iter)
    else:
        w = -np.linalg.solve(Hr, gr) if Z.shape[1] else np.zeros(0)
        mu, slack, status, iters = np.zeros(0), 0.0, "optimal", 1
    x = xp + Z @ w
    # reduced mode: first-order estimate, dependent rows of the Lagrangian gradient vanish
    curv = 0.0 if reduced_hessian is not None else H @ x
    lam = ns.multipliers(curv + g + G.T @ mu) if ns.m else np.zeros(0)
    eq_res = float(np.abs(Aeq @ x - beq).max(initial=0.0))
    return QPResult(x, lam, mu, status, float(slack), iters, eq_res)
