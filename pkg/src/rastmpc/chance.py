"""Deterministic tightening of Gaussian chance constraints.

P(H^T x <= h) >= 1 - eps with x ~ N(mu, P) holds iff
H^T mu <= h - sqrt(H^T P H) * z(1 - eps), z the standard normal quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RADICAND_TOL = 1e-12

# Acklam's rational approximation coefficients for the normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    Rational approximation followed by one Newton correction against the
    erf-based CDF; |Phi(z) - p| stays below 1e-9 on (0, 1).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    z = _acklam(p)
    # Newton in the tail where 1 - p carries the precision.
    if p > 0.5:
        err = 0.5 * math.erfc(z / math.sqrt(2.0)) - (1.0 - p)
        z += err / (math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))
    else:
        err = normal_cdf(z) - p
        z -= err / (math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))
    return z


@dataclass(frozen=True, eq=False)
class TightenedRow:
    H: np.ndarray
    h: float
    h_tight: float
    backoff: float


def _backoff(radicand: float, epsilon: float) -> float:
    if not 0.0 < epsilon <= 0.5:
        raise ValueError(f"epsilon must lie in (0, 0.5], got {epsilon}")
    if radicand < 0.0:
        if radicand < -RADICAND_TOL:
            raise ValueError(f"negative variance {radicand:.3e} along constraint direction; covariance not PSD")
        radicand = 0.0
    return math.sqrt(radicand) * normal_quantile(1.0 - epsilon)


def tighten_state_row(H, h: float, epsilon: float, P) -> TightenedRow:
    H = np.asarray(H, float)
    b = _backoff(float(H @ np.asarray(P, float) @ H), epsilon)
    return TightenedRow(H, float(h), float(h) - b, b)


def tighten_input_row(H, h: float, epsilon: float, K, P_at_trigger) -> TightenedRow:
    """Row on the nominal input v_k; the feedback part has covariance K P K^T."""
    H = np.asarray(H, float)
    K = np.atleast_2d(np.asarray(K, float))
    P = np.atleast_2d(np.asarray(P_at_trigger, float))
    b = _backoff(float(H @ K @ P @ K.T @ H), epsilon)
    return TightenedRow(H, float(h), float(h) - b, b)
