"""Direct collocation of the stochastic self-triggered optimal control problem.

Each trigger interval is mapped to normalized time s in [0, 1] and carries
states at s = 0 and at the three Radau IIA nodes.  With interval length
Delta_k the collocation defect reads

    sum_i D[j, i] X_i - Delta_k * f(X_j) = 0,

which is affine in Delta_k.  The state at a node stacks the mean, the upper
triangle of the covariance P and the full cross-covariance C = P_{t,k}
(C is not symmetric, so it keeps all n^2 entries).

Decision vector layout: [v (N*nu) | vec K (nu*nx) | Delta (N) | r_1..r_N (N) | states].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .chance import normal_quantile
from .covprop import discrete_maps
from .model import AffineFeedbackPlan, GaussianBelief, Scenario, TriggerSchedule, resource_step
from .nlpsolve import NlpProblem, kkt_residuals

SQRT6 = np.sqrt(6.0)
RADAU_C = np.array([(4.0 - SQRT6) / 10.0, (4.0 + SQRT6) / 10.0, 1.0])
RADAU_B = np.array([(16.0 - SQRT6) / 36.0, (16.0 + SQRT6) / 36.0, 1.0 / 9.0])
TAU = np.concatenate([[0.0], RADAU_C])
DEGREE = 3
BACKOFF_FLOOR = 1e-5


def _lagrange_derivatives(tau: np.ndarray) -> np.ndarray:
    """D[j, i] = derivative of the i-th Lagrange basis polynomial at tau[j + 1]."""
    m = len(tau)
    D = np.zeros((m - 1, m))
    for i in range(m):
        others = np.delete(tau, i)
        coeffs = np.poly(others) / np.prod(tau[i] - others)
        dcoeffs = np.polyder(coeffs)
        D[:, i] = np.polyval(dcoeffs, tau[1:])
    return D


COLLOCATION_D = _lagrange_derivatives(TAU)


class SymCoords:
    """Upper-triangle coordinates of symmetric n x n matrices (row-major vec)."""

    def __init__(self, n: int):
        self.n = n
        self.iu = np.triu_indices(n)
        self.m = len(self.iu[0])
        flat_upper = self.iu[0] * n + self.iu[1]
        flat_lower = self.iu[1] * n + self.iu[0]
        self.expand = np.zeros((n * n, self.m))  # vec_r(P) = expand @ p
        self.expand[flat_upper, np.arange(self.m)] = 1.0
        self.expand[flat_lower, np.arange(self.m)] = 1.0
        self.select = np.zeros((self.m, n * n))  # p = select @ vec_r(P)
        self.select[np.arange(self.m), flat_upper] = 1.0
        self.index = np.zeros((n, n), dtype=int)  # P[i, j] = p[index[i, j]]
        self.index[self.iu] = np.arange(self.m)
        self.index[self.iu[1], self.iu[0]] = np.arange(self.m)

    def full(self, p):
        """Symmetric matrix (or stack of them) from coordinates along the last axis."""
        return np.asarray(p)[..., self.index]

    def coords(self, P):
        return np.asarray(P)[self.iu]


def _commutation(n: int) -> np.ndarray:
    T = np.zeros((n * n, n * n))
    for i in range(n):
        for j in range(n):
            T[i * n + j, j * n + i] = 1.0
    return T


@dataclass(frozen=True)
class DecisionLayout:
    N: int
    nx: int
    nu: int
    stochastic: bool = True

    @property
    def nsym(self) -> int:
        return self.nx * (self.nx + 1) // 2 if self.stochastic else 0

    @property
    def ncross(self) -> int:
        return self.nx * self.nx if self.stochastic else 0

    @property
    def ns(self) -> int:
        return self.nx + self.nsym + self.ncross

    @property
    def nK(self) -> int:
        return self.nu * self.nx if self.stochastic else 0

    @property
    def off_v(self) -> int:
        return 0

    @property
    def off_K(self) -> int:
        return self.N * self.nu

    @property
    def off_delta(self) -> int:
        return self.off_K + self.nK

    @property
    def off_r(self) -> int:
        return self.off_delta + self.N

    @property
    def off_states(self) -> int:
        return self.off_r + self.N

    @property
    def n_states(self) -> int:
        return self.N * (DEGREE + 1) * self.ns

    @property
    def size(self) -> int:
        return self.off_states + self.n_states

    def parts(self) -> dict:
        return {
            "v": self.N * self.nu,
            "K": self.nK,
            "delta": self.N,
            "r": self.N,
            "states": self.n_states,
        }

    def v(self, z):
        return z[: self.off_K].reshape(self.N, self.nu)

    def K(self, z):
        if not self.stochastic:
            return np.zeros((self.nu, self.nx))
        return z[self.off_K: self.off_delta].reshape(self.nu, self.nx)

    def delta(self, z):
        return z[self.off_delta: self.off_r]

    def r(self, z):
        return z[self.off_r: self.off_states]

    def states(self, z):
        return z[self.off_states:].reshape(self.N, DEGREE + 1, self.ns)

    def state_index(self, k: int, i: int) -> int:
        return self.off_states + (k * (DEGREE + 1) + i) * self.ns

    # slices inside one node state
    @property
    def s_mu(self):
        return slice(0, self.nx)

    @property
    def s_P(self):
        return slice(self.nx, self.nx + self.nsym)

    @property
    def s_C(self):
        return slice(self.nx + self.nsym, self.ns)

    def pack(self, v, K, delta, r, states) -> np.ndarray:
        z = np.zeros(self.size)
        z[: self.off_K] = np.ravel(v)
        if self.stochastic:
            z[self.off_K: self.off_delta] = np.ravel(K)
        z[self.off_delta: self.off_r] = delta
        z[self.off_r: self.off_states] = r
        z[self.off_states:] = np.ravel(states)
        return z


class PlanNotCertified(RuntimeError):
    """The decision vector violates the transcribed constraints beyond tolerance."""


class Transcription:
    """Evaluators of the transcribed problem for one trigger instant."""

    def __init__(
        self,
        scenario: Scenario,
        belief0: GaussianBelief,
        r0: float,
        t0: float = 0.0,
        *,
        stochastic: bool = True,
        horizon: int | None = None,
    ):
        if scenario.delta_min > scenario.delta_max:
            raise ValueError("infeasible trigger bounds: delta_min > delta_max")
        model = scenario.model
        if belief0.mu.shape != (model.nx,):
            raise ValueError(f"initial mean has shape {belief0.mu.shape}, model has nx={model.nx}")
        self.scenario = scenario
        self.model = model
        self.belief0 = belief0
        self.r0 = float(r0)
        self.t0 = float(t0)
        N = horizon or scenario.horizon_n
        self.layout = L = DecisionLayout(N, model.nx, model.nu, stochastic)
        self.sym = SymCoords(model.nx)
        n = model.nx
        self.Tn = _commutation(n)
        self.In = np.eye(n)
        self.cost = scenario.cost
        self.Wx = model.C.T @ scenario.cost.output_weight @ model.C
        self.ref_width = scenario.options.reference_smoothing

        uncertain = stochastic and (not model.noiseless or np.any(belief0.P))
        self.tight = scenario.tightening and uncertain
        self.P0_zero = not np.any(belief0.P)
        self.state_rows = [(H, h, normal_quantile(1.0 - c.epsilon))
                           for c in scenario.state_constraints for H, h in zip(c.H, c.h)]
        self.input_rows = [(H, h, normal_quantile(1.0 - c.epsilon))
                           for c in scenario.input_constraints for H, h in zip(c.H, c.h)]

        s_init = np.zeros(L.ns)
        s_init[L.s_mu] = belief0.mu
        if stochastic:
            s_init[L.s_P] = self.sym.coords(belief0.P)
            s_init[L.s_C] = belief0.P.ravel()
        self.s_init = s_init
        self.Qsym = self.sym.coords(model.Q) if stochastic else None
        sym = self.sym
        self._JPP = sym.select @ (np.kron(model.A, self.In) + np.kron(self.In, model.A)) @ sym.expand
        self._JCC = np.kron(model.A, self.In)
        self._sym_sum = sym.select @ (np.eye(n * n) + self.Tn)
        self._HH = [np.outer(H, H).ravel() @ sym.expand for H, _, _ in self.state_rows]

    # ------------------------------------------------------------------ dynamics
    def field_jacobian(self, K):
        """d f / d state; f is affine in the state for fixed K."""
        L, A = self.layout, self.model.A
        Jf = np.zeros((L.ns, L.ns))
        Jf[L.s_mu, L.s_mu] = A
        if L.stochastic:
            sym, I = self.sym, self.In
            BK = self.model.B @ K
            Jf[L.s_P, L.s_P] = self._JPP
            Jf[L.s_P, L.s_C] = sym.select @ (np.kron(BK, I) @ self.Tn + np.kron(I, BK))
            Jf[L.s_C, L.s_C] = self._JCC
        return Jf

    def field_const(self, v, K, Pk):
        """Input and noise part of f; batched over leading axes of v and Pk."""
        L = self.layout
        v = np.asarray(v, float)
        f0 = np.zeros(v.shape[:-1] + (L.ns,))
        f0[..., L.s_mu] = v @ self.model.B.T
        if L.stochastic:
            f0[..., L.s_P] = self.Qsym
            BKP = np.einsum("ij,...jk->...ik", self.model.B @ K, Pk)
            f0[..., L.s_C] = BKP.reshape(BKP.shape[:-2] + (-1,))
        return f0

    def field_dK(self, s, Pk):
        """d f / d vec(K) at node states s (..., ns) with anchors Pk (..., n, n)."""
        L, B, n, nu = self.layout, self.model.B, self.model.nx, self.model.nu
        lead = s.shape[:-1]
        out = np.zeros(lead + (L.ns, L.nK))
        C = s[..., L.s_C].reshape(lead + (n, n))
        BC = np.einsum("ap,...bq->...abpq", B, C).reshape(lead + (n * n, nu * n))
        out[..., L.s_P, :] = np.einsum("ij,...jk->...ik", self._sym_sum, BC)
        BP = np.einsum("ap,...bq->...abpq", B, np.broadcast_to(Pk, lead + (n, n)))
        out[..., L.s_C, :] = BP.reshape(lead + (n * n, nu * n))
        return out

    def field_dPk(self, K):
        """d f_C / d (symmetric coordinates of the interval-start covariance)."""
        BK = self.model.B @ K
        return np.kron(BK, self.In) @ self.sym.expand

    def anchors(self, S):
        """Interval-start covariances, shape (N, n, n)."""
        L = self.layout
        if not L.stochastic:
            return np.zeros((L.N, self.model.nx, self.model.nx))
        return self.sym.full(S[:, 0, L.s_P])

    def anchor(self, S_k):
        L = self.layout
        if not L.stochastic:
            return np.zeros((self.model.nx, self.model.nx))
        return self.sym.full(S_k[0, L.s_P])

    # ------------------------------------------------------------------ timing
    def node_times(self, delta):
        starts = self.t0 + np.concatenate([[0.0], np.cumsum(delta)[:-1]])
        return starts[:, None] + RADAU_C[None, :] * delta[:, None]

    # ------------------------------------------------------------------ objective
    def _objective_terms(self, z):
        L = self.layout
        C = self.model.C
        v, delta, S = L.v(z), L.delta(z), L.states(z)
        mu = S[:, 1:, L.s_mu]
        ref, dref = self.cost.reference.smooth(self.node_times(delta), self.ref_width)
        e = mu @ C.T - ref
        Wy, R = self.cost.output_weight, self.cost.input_weight
        stage = np.einsum("kji,il,kjl->kj", e, Wy, e)
        inp = np.einsum("ki,il,kl->k", v, R, v)
        return v, delta, S, e, dref, stage, inp

    def objective(self, z) -> float:
        L = self.layout
        v, delta, S, e, dref, stage, inp = self._objective_terms(z)
        J = float(np.sum(delta * (stage @ RADAU_B + inp)))
        if self.cost.expected_covariance_cost and L.stochastic:
            J += float(np.sum(delta * (self._trace_terms(S) @ RADAU_B)))
        if self.cost.terminal_weight is not None:
            eT = self._terminal_error(z)[0]
            J += float(eT @ self.cost.terminal_weight @ eT)
        J -= self.cost.resource_weight * float(np.sum(L.r(z)))
        return J

    def _trace_terms(self, S):
        vecW = self.Wx.ravel() @ self.sym.expand
        return S[:, 1:, self.layout.s_P] @ vecW

    def _terminal_error(self, z):
        L = self.layout
        delta = L.delta(z)
        tN = self.t0 + np.sum(delta)
        ref, dref = self.cost.reference.smooth(np.array([tN]), self.ref_width)
        muN = L.states(z)[-1, -1, L.s_mu]
        return self.model.C @ muN - ref[0], dref[0]

    def gradient(self, z) -> np.ndarray:
        L = self.layout
        C = self.model.C
        Wy, R = self.cost.output_weight, self.cost.input_weight
        v, delta, S, e, dref, stage, inp = self._objective_terms(z)
        g = np.zeros(L.size)
        gS = np.zeros_like(S)
        w = delta[:, None] * RADAU_B[None, :]  # (N, 3)
        gS[:, 1:, L.s_mu] = 2.0 * w[..., None] * (e @ Wy @ C)
        g[: L.off_K] = (2.0 * delta[:, None] * (v @ R)).ravel()
        gd = stage @ RADAU_B + inp
        dJdt = -2.0 * w * np.einsum("kji,il,kjl->kj", e, Wy, dref)  # dJ / d node time
        T = dJdt.sum(axis=1)
        later = np.concatenate([np.cumsum(T[::-1])[::-1][1:], [0.0]])
        gd += later + dJdt @ RADAU_C
        if self.cost.expected_covariance_cost and L.stochastic:
            gd += self._trace_terms(S) @ RADAU_B
            vecW = self.Wx.ravel() @ self.sym.expand
            gS[:, 1:, L.s_P] += w[..., None] * vecW[None, None, :]
        if self.cost.terminal_weight is not None:
            eT, drefT = self._terminal_error(z)
            Wt = self.cost.terminal_weight
            gS[-1, -1, L.s_mu] += 2.0 * (eT @ Wt @ C)
            gd += -2.0 * float(eT @ Wt @ drefT)
        g[L.off_delta: L.off_r] = gd
        g[L.off_r: L.off_states] = -self.cost.resource_weight
        g[L.off_states:] = gS.ravel()
        return g

    def initial_hessian(self, z) -> np.ndarray:
        """Curvature of the objective in the mean and input blocks, small elsewhere."""
        L = self.layout
        H = np.eye(L.size) * 1e-2
        delta = L.delta(z)
        CWC = self.model.C.T @ self.cost.output_weight @ self.model.C
        R = self.cost.input_weight
        for k in range(L.N):
            iv = k * L.nu
            H[iv: iv + L.nu, iv: iv + L.nu] += 2.0 * delta[k] * R
            for j in range(DEGREE):
                i0 = L.state_index(k, j + 1)
                H[i0: i0 + L.nx, i0: i0 + L.nx] += 2.0 * delta[k] * RADAU_B[j] * CWC
        H[L.off_delta: L.off_r, L.off_delta: L.off_r] += np.eye(L.N)
        return H

    # ------------------------------------------------------------------ equalities
    def eq(self, z) -> np.ndarray:
        L = self.layout
        v, K, delta, S = L.v(z), L.K(z), L.delta(z), L.states(z)
        Jf = self.field_jacobian(K)
        out = np.empty((L.N, DEGREE + 1, L.ns))
        nmP = L.nx + L.nsym
        out[0, 0] = S[0, 0] - self.s_init
        out[1:, 0, :nmP] = S[1:, 0, :nmP] - S[:-1, -1, :nmP]
        if L.stochastic:
            Pk = self.anchors(S)
            out[1:, 0, L.s_C] = S[1:, 0, L.s_C] - Pk[1:].reshape(L.N - 1, -1)
        else:
            Pk = None
        f0 = self.field_const(v, K, Pk)
        F = S[:, 1:] @ Jf.T + f0[:, None, :]
        out[:, 1:] = np.einsum("ji,kis->kjs", COLLOCATION_D, S) - delta[:, None, None] * F
        return out.ravel()

    def eq_jac(self, z) -> np.ndarray:
        L = self.layout
        v, K, delta, S = L.v(z), L.K(z), L.delta(z), L.states(z)
        ns, nmP, N = L.ns, L.nx + L.nsym, L.N
        Jf = self.field_jacobian(K)
        J = np.zeros((N, DEGREE + 1, ns, L.size))
        Sblk = J[..., L.off_states:].reshape(N, DEGREE + 1, ns, N, DEGREE + 1, ns)
        I_ns = np.eye(ns)
        Pk = self.anchors(S) if L.stochastic else None
        f0 = self.field_const(v, K, Pk)
        F = S[:, 1:] @ Jf.T + f0[:, None, :]
        Bpad = np.zeros((ns, L.nu))
        Bpad[L.s_mu] = self.model.B
        dK = self.field_dK(S[:, 1:], Pk[:, None]) if L.stochastic else None
        dPk = self.field_dPk(K) if L.stochastic else None
        for k in range(N):
            if k == 0:
                Sblk[0, 0, :, 0, 0, :] = I_ns
            else:
                Sblk[k, 0, :nmP, k, 0, :nmP] = np.eye(nmP)
                Sblk[k, 0, :nmP, k - 1, DEGREE, :nmP] = -np.eye(nmP)
                if L.stochastic:
                    Sblk[k, 0, L.s_C, k, 0, L.s_C] = np.eye(L.ncross)
                    Sblk[k, 0, L.s_C, k, 0, L.s_P] = -self.sym.expand
            for j in range(1, DEGREE + 1):
                for i in range(DEGREE + 1):
                    Sblk[k, j, :, k, i, :] = COLLOCATION_D[j - 1, i] * I_ns
                Sblk[k, j, :, k, j, :] -= delta[k] * Jf
                if L.stochastic:
                    Sblk[k, j, L.s_C, k, 0, L.s_P] -= delta[k] * dPk
            J[k, 1:, :, L.off_delta + k] = -F[k]
            J[k, 1:, :, k * L.nu: (k + 1) * L.nu] = -delta[k] * Bpad
            if L.stochastic:
                J[k, 1:, :, L.off_K: L.off_delta] = -delta[k] * dK[k]
        return J.reshape(L.n_states, L.size)

    # ------------------------------------------------------------------ inequalities
    def _sqrt(self, q):
        return np.sqrt(np.maximum(q, 0.0) + BACKOFF_FLOOR ** 2)

    def _input_mask(self):
        mask = np.ones(self.layout.N, bool)
        if self.P0_zero:
            mask[0] = False  # no feedback at the first trigger
        return mask

    def ineq(self, z) -> np.ndarray:
        L = self.layout
        res = self.scenario.resource
        v, K, delta, r, S = L.v(z), L.K(z), L.delta(z), L.r(z), L.states(z)
        r_prev = np.concatenate([[self.r0], r[:-1]])
        out = [r - (res.rho * delta + r_prev - res.eta(delta))]
        mu = S[:, 1:, L.s_mu]
        for (H, h, zq), HH in zip(self.state_rows, self._HH):
            g = mu @ H - h
            if self.tight:
                g = g + zq * self._sqrt(S[:, 1:, L.s_P] @ HH)
            out.append(g.ravel())
        if self.input_rows:
            Pk = self.anchors(S)
            mask = self._input_mask()
            for H, h, zq in self.input_rows:
                g = v @ H - h
                if self.tight:
                    a = K.T @ H
                    g = g + mask * zq * self._sqrt(np.einsum("i,kij,j->k", a, Pk, a))
                out.append(g)
        return np.concatenate(out)

    def ineq_jac(self, z) -> np.ndarray:
        L = self.layout
        res = self.scenario.resource
        v, K, delta, S = L.v(z), L.K(z), L.delta(z), L.states(z)
        N, ns = L.N, L.ns
        n_rows = N * (1 + DEGREE * len(self.state_rows) + len(self.input_rows))
        J = np.zeros((n_rows, L.size))
        ar = np.arange(N)
        J[ar, L.off_r + ar] = 1.0
        J[ar[1:], L.off_r + ar[:-1]] = -1.0
        J[ar, L.off_delta + ar] = -(res.rho - res.eta1)
        row = N
        node_cols = L.off_states + ((ar[:, None] * (DEGREE + 1) + np.arange(1, DEGREE + 1)[None, :]) * ns).ravel()
        for (H, h, zq), HH in zip(self.state_rows, self._HH):
            rows = row + np.arange(N * DEGREE)
            for i in range(L.nx):
                J[rows, node_cols + i] = H[i]
            if self.tight:
                q = (S[:, 1:, L.s_P] @ HH).ravel()
                scale = zq * 0.5 / self._sqrt(q) * (q > 0)
                for i in range(L.nsym):
                    J[rows, node_cols + L.s_P.start + i] = scale * HH[i]
            row += N * DEGREE
        if self.input_rows:
            Pk = self.anchors(S)
            mask = self._input_mask()
            start_cols = L.off_states + ar * (DEGREE + 1) * ns
            for H, h, zq in self.input_rows:
                rows = row + ar
                for i in range(L.nu):
                    J[rows, ar * L.nu + i] = H[i]
                if self.tight:
                    a = K.T @ H
                    Pa = Pk @ a  # (N, n)
                    q = Pa @ a
                    scale = mask * zq * 0.5 / self._sqrt(q) * (q > 0)
                    J[rows, L.off_K: L.off_delta] = scale[:, None] * 2.0 * np.einsum("i,kj->kij", H, Pa).reshape(N, -1)
                    aa = np.outer(a, a).ravel() @ self.sym.expand
                    for i in range(L.nsym):
                        J[rows, start_cols + L.s_P.start + i] = scale * aa[i]
                row += N
        return J

    # ------------------------------------------------------------------ bounds and guesses
    def bounds(self):
        L = self.layout
        sc = self.scenario
        lb = np.full(L.size, -np.inf)
        ub = np.full(L.size, np.inf)
        if L.stochastic:
            lb[L.off_K: L.off_delta] = -sc.options.gain_bound
            ub[L.off_K: L.off_delta] = sc.options.gain_bound
        lb[L.off_delta: L.off_r] = sc.delta_min
        ub[L.off_delta: L.off_r] = sc.delta_max
        lb[L.off_r: L.off_states] = sc.resource.r_min
        ub[L.off_r: L.off_states] = sc.resource.r_max
        return lb, ub

    def rollout(self, v, K, delta):
        """Node states solving the collocation equations exactly for given (v, K, Delta)."""
        L = self.layout
        ns = L.ns
        v = np.asarray(v, float).reshape(L.N, L.nu)
        K = np.asarray(K, float).reshape(L.nu, L.nx)
        Jf = self.field_jacobian(K)
        Dn, D0 = COLLOCATION_D[:, 1:], COLLOCATION_D[:, 0]
        S = np.zeros((L.N, DEGREE + 1, ns))
        start = self.s_init.copy()
        for k in range(L.N):
            S[k, 0] = start
            Pk = self.anchor(S[k])
            f0 = self.field_const(v[k], K, Pk)
            M = np.kron(Dn, np.eye(ns)) - delta[k] * np.kron(np.eye(DEGREE), Jf)
            rhs = (-np.outer(D0, start) + delta[k] * f0[None, :]).ravel()
            S[k, 1:] = np.linalg.solve(M, rhs).reshape(DEGREE, ns)
            start = S[k, -1].copy()
            if L.stochastic:
                start[L.s_C] = self.sym.expand @ start[L.s_P]
        return S

    def resource_rollout(self, delta):
        res = self.scenario.resource
        r, out = self.r0, []
        for d in delta:
            r = resource_step(r, d, res)
            out.append(r)
        return np.array(out)

    def assemble(self, v, K, delta) -> np.ndarray:
        L = self.layout
        delta = np.asarray(delta, float)
        r = np.clip(self.resource_rollout(delta), self.scenario.resource.r_min, self.scenario.resource.r_max)
        return L.pack(v, K, delta, r, self.rollout(v, K, delta))

    def initial_guess(self) -> np.ndarray:
        """Mid-bound intervals, least-squares tracking inputs, zero gain, consistent states."""
        L, sc, model = self.layout, self.scenario, self.model
        delta = np.full(L.N, 0.5 * (sc.delta_min + sc.delta_max))
        maps = discrete_maps(model, delta[0])
        times = self.t0 + delta[0] * np.arange(1, L.N + 1)
        ref = self.cost.reference(times)
        # x_{k+1} = Phi^{k+1} x0 + sum_i Phi^{k-i} Gamma v_i
        nx, nu, ny = model.nx, model.nu, model.ny
        G = np.zeros((L.N * ny, L.N * nu))
        free = np.zeros(L.N * ny)
        x = self.belief0.mu.copy()
        powers = [np.eye(nx)]
        for _ in range(L.N):
            powers.append(maps.Phi @ powers[-1])
        for k in range(L.N):
            x = maps.Phi @ x
            free[k * ny:(k + 1) * ny] = model.C @ x
            for i in range(k + 1):
                G[k * ny:(k + 1) * ny, i * nu:(i + 1) * nu] = model.C @ powers[k - i] @ maps.Gamma
        Wy = np.linalg.cholesky(self.cost.output_weight + 1e-12 * np.eye(ny)).T
        Rw = np.linalg.cholesky(self.cost.input_weight + 1e-12 * np.eye(nu)).T
        A_ls = np.vstack([np.kron(np.eye(L.N), Wy) @ G, np.kron(np.eye(L.N), Rw)])
        b_ls = np.concatenate([np.kron(np.eye(L.N), Wy) @ (ref.ravel() - free), np.zeros(L.N * nu)])
        v = np.linalg.lstsq(A_ls, b_ls, rcond=None)[0].reshape(L.N, nu)
        lo, hi = sc.input_bounds()
        v = np.clip(v, lo, hi)
        return self.assemble(v, np.zeros((nu, nx)), delta)

    def shift(self, z_prev: np.ndarray) -> np.ndarray:
        """Warm start from a previous solution advanced by one interval."""
        L = self.layout
        v, K, delta = L.v(z_prev), L.K(z_prev), L.delta(z_prev)
        v = np.vstack([v[1:], v[-1:]])
        delta = np.concatenate([delta[1:], delta[-1:]])
        return self.assemble(v, K, delta)

    def shift_index(self):
        """Source position in the previous decision vector for every entry of a shifted one.

        Returns ``(idx, tail)``; ``tail`` marks entries that repeat the last interval.
        """
        L = self.layout
        idx = np.arange(L.size)
        tail = np.zeros(L.size, bool)
        blocks = [(L.off_v, L.nu), (L.off_delta, 1), (L.off_r, 1), (L.off_states, (DEGREE + 1) * L.ns)]
        for start, width in blocks:
            for k in range(L.N):
                src = min(k + 1, L.N - 1)
                idx[start + k * width: start + (k + 1) * width] = start + src * width + np.arange(width)
            tail[start + (L.N - 1) * width: start + L.N * width] = True
        return idx, tail

    def shift_hessian(self, H):
        """Quasi-Newton matrix (full or over the independent variables) re-indexed like :meth:`shift`.

        The repeated tail entries keep their diagonal only, so the result
        stays positive definite.
        """
        if H is None:
            return None
        idx, tail = self.shift_index()
        m = self.layout.off_states
        if H.shape == (m, m):
            idx, tail = idx[:m], tail[:m]
        elif H.shape != (len(idx), len(idx)):
            return None
        out = H[np.ix_(idx, idx)].copy()
        d = np.diag(out).copy()
        out[tail, :] = 0.0
        out[:, tail] = 0.0
        out[tail, tail] = d[tail]
        return out

    def problem(self) -> NlpProblem:
        L = self.layout
        lb, ub = self.bounds()
        return NlpProblem(
            n=L.size,
            objective=self.objective,
            gradient=self.gradient,
            eq=self.eq,
            eq_jac=self.eq_jac,
            ineq=self.ineq,
            ineq_jac=self.ineq_jac,
            lb=lb,
            ub=ub,
            dependent=np.arange(L.off_states, L.size),
            initial_hessian=self.initial_hessian,
        )


def transcribe(
    scenario: Scenario,
    belief0: GaussianBelief,
    r0: float,
    t0: float = 0.0,
    *,
    stochastic: bool = True,
    horizon: int | None = None,
):
    """Build the collocation NLP for one trigger instant.

    Returns ``(problem, layout)``; ``problem.context`` holds the
    :class:`Transcription` for warm starts and plan extraction.
    ``stochastic=False`` gives the deterministic problem with mean states only.
    """
    tr = Transcription(scenario, belief0, r0, t0, stochastic=stochastic, horizon=horizon)
    prob = tr.problem()
    prob.context = tr
    return prob, tr.layout


def objective_value(layout: DecisionLayout, z, scenario: Scenario, t0: float = 0.0, belief0=None, r0=None) -> float:
    """Collocation-quadrature cost of decision vector ``z`` (mean trajectory, nominal inputs)."""
    belief0 = belief0 or GaussianBelief.exact(layout.states(np.asarray(z))[0, 0, : layout.nx])
    tr = Transcription(scenario, belief0, scenario.resource.r0 if r0 is None else r0, t0,
                       stochastic=layout.stochastic, horizon=layout.N)
    return tr.objective(np.asarray(z, float))


@dataclass(frozen=True, eq=False)
class PlanPrediction:
    plan: AffineFeedbackPlan
    times: np.ndarray
    beliefs: list
    resource: np.ndarray
    trigger_times: np.ndarray


def extract_plan(layout: DecisionLayout, z, scenario: Scenario, t0: float = 0.0,
                 problem: Any = None, tol: float = 1e-6) -> PlanPrediction:
    """Plan and node-wise predictions from a decision vector.

    With ``problem`` given, raises :class:`PlanNotCertified` if the
    constraint residual exceeds ``tol``.
    """
    z = np.asarray(z, float)
    if problem is not None:
        ce, ci = problem.eval_eq(z), problem.eval_ineq(z)
        viol = max(np.abs(ce).max(initial=0.0), np.maximum(ci, 0.0).max(initial=0.0),
                   np.maximum(problem.lb - z, 0).max(initial=0.0), np.maximum(z - problem.ub, 0).max(initial=0.0))
        if viol > tol:
            raise PlanNotCertified(f"constraint residual {viol:.3e} exceeds {tol:.1e}")
    delta = np.clip(layout.delta(z), scenario.delta_min, scenario.delta_max)
    schedule = TriggerSchedule(delta, scenario.delta_min, scenario.delta_max)
    plan = AffineFeedbackPlan(layout.v(z).copy(), layout.K(z).copy(), schedule)
    S = layout.states(z)
    sym = SymCoords(layout.nx)
    starts = t0 + np.concatenate([[0.0], np.cumsum(delta)[:-1]])
    times, beliefs = [], []
    for k in range(layout.N):
        for i, tau in enumerate(TAU):
            if k > 0 and i == 0:
                continue
            times.append(starts[k] + tau * delta[k])
            P = sym.full(S[k, i, layout.s_P]) if layout.stochastic else np.zeros((layout.nx, layout.nx))
            P = 0.5 * (P + P.T)
            w, V = np.linalg.eigh(P)
            P = (V * np.maximum(w, 0.0)) @ V.T
            beliefs.append(GaussianBelief(S[k, i, layout.s_mu], P))
    return PlanPrediction(plan, np.array(times), beliefs, layout.r(z).copy(), schedule.times(t0))


def certify(problem: NlpProblem, result) -> tuple:
    """Recompute (stationarity, feasibility, complementarity) independently of the solver loop."""
    return kkt_residuals(problem, result.z, result.lam_eq, result.mu_ineq, result.mu_bounds)
