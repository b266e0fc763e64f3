"""Standard normal CDF/quantile and truncated-normal draws usable from numba code."""
import math

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)
PROB_EPS = 1e-12

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


@njit(cache=True)
def norm_cdf(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True)
def norm_cdf_clamped(x):
    p = 0.5 * math.erfc(-x / SQRT2)
    if p < PROB_EPS:
        return PROB_EPS
    if p > 1.0 - PROB_EPS:
        return 1.0 - PROB_EPS
    return p


@njit(cache=True)
def norm_ppf(p):
    """Inverse standard normal CDF (rational approximation + one Halley step)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # Halley refinement against the erfc-based CDF
    e = 0.5 * math.erfc(-x / SQRT2) - p
    u = e * SQRT2PI * math.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return x


@njit(cache=True)
def std_normal_tail(a, rng):
    """Draw Z ~ N(0, 1) conditioned on Z >= a."""
    if a > 5.0:
        # exponential-proposal rejection (Robert, 1995)
        alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
        while True:
            z = a + rng.standard_exponential() / alpha
            d = z - alpha
            if rng.random() <= math.exp(-0.5 * d * d):
                return z
    if a < -5.0:
        while True:
            z = rng.standard_normal()
            if z >= a:
                return z
    u = 1.0 - rng.random()
    return -norm_ppf(u * norm_cdf(-a))


@njit(cache=True)
def truncnorm_positive(mean, rng):
    """N(mean, 1) truncated to [0, inf)."""
    return mean + std_normal_tail(-mean, rng)


@njit(cache=True)
def truncnorm_negative(mean, rng):
    """N(mean, 1) truncated to (-inf, 0)."""
    v = mean - std_normal_tail(mean, rng)
    if v >= 0.0:
        return -5e-324
    return v


def phi_inv(p):
    """Vectorised probit quantile for plain Python/numpy callers."""
    from scipy.special import ndtri

    return ndtri(p)
