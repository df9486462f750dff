"""Special functions used by the calibration-size solver and the power bound.

Only what the package needs: the regularized incomplete beta function for
integer shapes, and the standard normal survival function with its inverse.
All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

_CF_MAX_ITER = 100_000
_CF_EPS = 1e-16
_TINY = 1e-300


@dataclass(frozen=True)
class BetaParams:
    """Integer shape parameters of a Beta distribution."""

    a: int
    b: int

    def __post_init__(self) -> None:
        for name in ("a", "b"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise DomainError(f"Beta shape {name} must be an integer, got {value!r}")
            if value < 1:
                raise DomainError(f"Beta shape {name} must be >= 1, got {value}")


def _beta_cf(x: float, a: float, b: float) -> float:
    # Modified Lentz evaluation of the continued fraction for I_x(a, b).
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def reg_inc_beta(x: float, a: int, b: int) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``.

    This is the CDF of ``Beta(a, b)`` evaluated at ``x``. Shapes must be
    positive integers.

    Args:
        x: evaluation point in ``[0, 1]``.
        a: first shape parameter, ``a >= 1``.
        b: second shape parameter, ``b >= 1``.

    Raises:
        DomainError: if ``x`` is outside ``[0, 1]`` or a shape is invalid.
    """
    params = BetaParams(a, b)
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    a_, b_ = float(params.a), float(params.b)
    log_front = (
        math.lgamma(a_ + b_)
        - math.lgamma(a_)
        - math.lgamma(b_)
        + a_ * math.log(x)
        + b_ * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a_ + 1.0) / (a_ + b_ + 2.0):
        value = front * _beta_cf(x, a_, b_) / a_
    else:
        value = 1.0 - front * _beta_cf(1.0 - x, b_, a_) / b_
    return min(1.0, max(0.0, value))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_sf(z: float) -> float:
    """Standard normal survival function ``P(Z >= z)``."""
    return 0.5 * math.erfc(float(z) / _SQRT2)


def normal_pdf(z: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


# Acklam's rational approximation of the normal quantile (rel. error ~1.2e-9),
# polished afterwards with Newton steps on normal_sf.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _normal_ppf_initial(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    if p > 1.0 - _P_LOW:
        return -_normal_ppf_initial(1.0 - p)
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def normal_sf_inv(q: float) -> float:
    """Inverse of :func:`normal_sf`: the ``z`` with ``P(Z >= z) = q``.

    Raises:
        DomainError: unless ``0 < q < 1``.
    """
    q = float(q)
    if not 0.0 < q < 1.0:
        raise DomainError(f"q must lie strictly inside (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    z = -_normal_ppf_initial(q)
    for _ in range(3):
        pdf = normal_pdf(z)
        if pdf == 0.0:
            break
        step = (normal_sf(z) - q) / pdf
        z += step
        if abs(step) < 1e-15 * max(1.0, abs(z)):
            break
    return z
