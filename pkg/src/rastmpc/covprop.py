"""Mean and covariance propagation under zero-order-hold feedback.

Within a trigger interval (t_k, t_k + tau] the input is held at
``v_k + K (x(t_k) - mu(t_k))``.  The covariance P and the cross-covariance
C(t) = E[(x(t)-mu(t))(x(t_k)-mu(t_k))^T] then obey

    dP/dt = A P + P A^T + BK C^T + C (BK)^T + Q
    dC/dt = A C + BK P(t_k),         C(t_k) = P(t_k)

which is integrated here with fixed-step RK4, and solved in closed form by
``propagate_cov_exact`` through a Van Loan block exponential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .model import CrossCov, GaussianBelief, LinearSdeModel, TriggerSchedule, symmetrize

DEFAULT_STEPS = 64


@dataclass(frozen=True, eq=False)
class DiscreteMaps:
    Phi: np.ndarray
    Gamma: np.ndarray
    Wn: np.ndarray


@dataclass(frozen=True, eq=False)
class PropagationResult:
    belief_end: GaussianBelief
    cross_end: CrossCov
    times: np.ndarray
    P: np.ndarray
    C: np.ndarray
    mu: np.ndarray

    @property
    def samples(self):
        """(time offset, GaussianBelief, CrossCov) at each integrator grid point."""
        return [
            (t, GaussianBelief(m, P), CrossCov(C, self.cross_end.anchor_index))
            for t, m, P, C in zip(self.times, self.mu, self.P, self.C)
        ]


def _check_cov(P0: np.ndarray, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError(f"propagation duration must be nonnegative, got {tau}")
    P0 = np.asarray(P0, dtype=float)
    if not np.allclose(P0, P0.T, atol=1e-12, rtol=0) or (
        P0.size and np.linalg.eigvalsh(symmetrize(P0)).min() < -1e-10
    ):
        raise ValueError("initial covariance must be symmetric positive semidefinite")
    return symmetrize(P0)


def discrete_maps(model: LinearSdeModel, tau: float) -> DiscreteMaps:
    """Phi = e^{A tau}, Gamma = int_0^tau e^{As} ds B, Wn = int_0^tau e^{As} Q e^{A^T s} ds.

    One exponential of the block matrix
        [[-A, Q, 0], [0, A^T, 0], [0, B^T, 0]] * tau
    yields all three: block (2,2) is Phi^T, block (1,2) is Phi^{-1} Wn and
    block (3,2) is Gamma^T.
    """
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    A, B, Q = model.A, model.B, model.Q
    n, m = model.nx, model.nu
    M = np.zeros((2 * n + m, 2 * n + m))
    M[:n, :n] = -A
    M[:n, n:2 * n] = Q
    M[n:2 * n, n:2 * n] = A.T
    M[2 * n:, n:2 * n] = B.T
    E = expm(M * tau)
    Phi = E[n:2 * n, n:2 * n].T
    Wn = symmetrize(Phi @ E[:n, n:2 * n])
    Gamma = E[2 * n:, n:2 * n].T
    return DiscreteMaps(Phi, Gamma, Wn)


def propagate_mean(model: LinearSdeModel, mu0, v, tau: float) -> np.ndarray:
    maps = discrete_maps(model, tau)
    return maps.Phi @ np.asarray(mu0, float) + maps.Gamma @ np.atleast_1d(np.asarray(v, float))


def propagate_cov_exact(model: LinearSdeModel, P0, K, tau: float):
    """Closed form (P_end, cross_end) = ((Phi+Gamma K) P0 (Phi+Gamma K)^T + Wn, (Phi+Gamma K) P0)."""
    P0 = _check_cov(P0, tau)
    maps = discrete_maps(model, tau)
    M = maps.Phi + maps.Gamma @ np.asarray(K, float)
    cross = M @ P0
    return symmetrize(cross @ M.T + maps.Wn), cross


def _rk4_cov(A, BK, Q, P, C, Pk, h, steps):
    """RK4 on (P, C) with the anchor Pk held fixed; P symmetrized after each step."""
    def rhs(P, C):
        BKC = BK @ C.T
        return A @ P + P @ A.T + BKC + BKC.T + Q, A @ C + BK @ Pk

    Ps = np.empty((steps + 1,) + P.shape)
    Cs = np.empty((steps + 1,) + C.shape)
    Ps[0], Cs[0] = P, C
    for i in range(steps):
        k1p, k1c = rhs(P, C)
        k2p, k2c = rhs(P + 0.5 * h * k1p, C + 0.5 * h * k1c)
        k3p, k3c = rhs(P + 0.5 * h * k2p, C + 0.5 * h * k2c)
        k4p, k4c = rhs(P + h * k3p, C + h * k3c)
        P = symmetrize(P + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p))
        C = C + h / 6.0 * (k1c + 2 * k2c + 2 * k3c + k4c)
        Ps[i + 1], Cs[i + 1] = P, C
    return Ps, Cs


def propagate_cov_closed_loop(
    model: LinearSdeModel,
    P0,
    K,
    tau: float,
    steps: int = DEFAULT_STEPS,
    *,
    mu0=None,
    v=None,
    anchor_index: int = 0,
) -> PropagationResult:
    """Integrate the feedback covariance ODEs over one interval from P(t_k) = C(t_k) = P0.

    Means at the grid points are filled in exactly when ``mu0`` is given
    (with nominal input ``v``), otherwise they are zero.
    """
    P0 = _check_cov(P0, tau)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    K = np.asarray(K, float)
    BK = model.B @ K
    h = tau / steps
    Ps, Cs = _rk4_cov(model.A, BK, model.Q, P0, P0.copy(), P0, h, steps)
    times = np.linspace(0.0, tau, steps + 1)
    if mu0 is None:
        mus = np.zeros((steps + 1, model.nx))
    else:
        v = np.zeros(model.nu) if v is None else v
        mus = np.array([propagate_mean(model, mu0, v, t) for t in times])
    return PropagationResult(
        belief_end=GaussianBelief(mus[-1], Ps[-1]),
        cross_end=CrossCov(Cs[-1], anchor_index),
        times=times,
        P=Ps,
        C=Cs,
        mu=mus,
    )


def propagate_cov_open_loop(model: LinearSdeModel, P0, tau: float, steps: int = DEFAULT_STEPS) -> np.ndarray:
    """RK4 on dP/dt = A P + P A^T + Q; returns the grid values."""
    P0 = _check_cov(P0, tau)
    h = tau / steps
    A, Q = model.A, model.Q
    P = P0
    out = [P]
    for _ in range(steps):
        k1 = A @ P + P @ A.T + Q
        P2 = P + 0.5 * h * k1
        k2 = A @ P2 + P2 @ A.T + Q
        P3 = P + 0.5 * h * k2
        k3 = A @ P3 + P3 @ A.T + Q
        P4 = P + h * k3
        k4 = A @ P4 + P4 @ A.T + Q
        P = symmetrize(P + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        out.append(P)
    return np.array(out)


def propagate_plan(
    model: LinearSdeModel,
    belief0: GaussianBelief,
    v,
    K,
    schedule: TriggerSchedule,
    steps: int = DEFAULT_STEPS,
) -> list:
    """Chain interval propagations over a whole schedule, resetting C at every trigger."""
    v = np.asarray(v, float).reshape(schedule.n, -1)
    mu, P = belief0.mu, belief0.P
    out = []
    for k, tau in enumerate(schedule.deltas):
        res = propagate_cov_closed_loop(model, P, K, tau, steps, mu0=mu, v=v[k], anchor_index=k)
        out.append(res)
        mu, P = res.belief_end.mu, res.belief_end.P
    return out


@dataclass(frozen=True, eq=False)
class SliceTrajectories:
    """Conditional covariance slices on a shared grid.

    ``slices[i]`` is P_i(t) for the noise entering during interval i; the
    optional ``prior`` slice carries a nonzero initial covariance forward.
    """

    times: np.ndarray
    slices: np.ndarray
    prior: np.ndarray
    total: np.ndarray

    def max_decomposition_error(self) -> float:
        return float(np.max(np.abs(self.slices.sum(axis=0) + self.prior - self.total)))


def propagate_conditional_slices(
    model: LinearSdeModel,
    schedule: TriggerSchedule,
    K,
    P0=None,
    steps: int = DEFAULT_STEPS,
) -> SliceTrajectories:
    """Split P(t) into per-interval contributions and integrate each.

    Slice i is zero up to t_i, grows with Q inside (t_i, t_{i+1}] where the
    held feedback cannot yet react to it, and afterwards evolves without Q
    while the feedback acts on it through its own cross-covariance, reset
    at each later trigger.  The full covariance is integrated alongside on
    the same grid so the additive split can be checked pointwise.
    """
    n = model.nx
    K = np.asarray(K, float)
    BK = model.B @ K
    zero = np.zeros((n, n))
    P0 = zero if P0 is None else _check_cov(P0, 0.0)
    N = schedule.n
    grid = [np.array([0.0])]
    slices = [[zero] for _ in range(N)]
    prior = [P0]
    total = [P0]
    t = 0.0
    for j, tau in enumerate(schedule.deltas):
        h = tau / steps
        grid.append(t + h * np.arange(1, steps + 1))
        t += tau
        for i in range(N):
            Pi = slices[i][-1]
            if i > j:
                slices[i].extend([zero] * steps)
                continue
            Qi = model.Q if i == j else zero
            Ps, _ = _rk4_cov(model.A, BK, Qi, Pi, Pi.copy(), Pi, h, steps)
            slices[i].extend(Ps[1:])
        Ps, _ = _rk4_cov(model.A, BK, zero, prior[-1], prior[-1].copy(), prior[-1], h, steps)
        prior.extend(Ps[1:])
        Ps, _ = _rk4_cov(model.A, BK, model.Q, total[-1], total[-1].copy(), total[-1], h, steps)
        total.extend(Ps[1:])
    return SliceTrajectories(
        times=np.concatenate(grid),
        slices=np.array(slices),
        prior=np.array(prior),
        total=np.array(total),
    )
