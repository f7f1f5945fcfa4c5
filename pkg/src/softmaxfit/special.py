"""Standard normal quantile function.

Acklam's rational approximation gives about 1e-9 relative accuracy on its
own; one Halley step against ``erfc`` brings it to near machine precision.
"""

import numpy as np
from scipy.special import erfc

__all__ = ["norm_cdf", "norm_sf", "norm_ppf", "norm_isf"]

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)

_P_LOW = 0.02425
_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def norm_cdf(x):
    """Standard normal CDF, accurate in the lower tail."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def norm_sf(x):
    """Standard normal survival function ``1 - cdf(x)``."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / _SQRT2)


def _acklam_lower(p):
    # valid for 0 < p <= 0.5
    x = np.empty_like(p)
    tail = p < _P_LOW
    if np.any(tail):
        q = np.sqrt(-2.0 * np.log(p[tail]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[tail] = num / den
    mid = ~tail
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num / den
    return x


def _lower_quantile(p):
    x = _acklam_lower(p)
    # Halley refinement; the lower tail cdf is computed without cancellation
    e = norm_cdf(x) - p
    u = e * _SQRT2PI * np.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def norm_ppf(p):
    """Inverse of the standard normal CDF.

    Parameters
    ----------
    p : float or array_like
        Probabilities in the open interval (0, 1).

    Returns
    -------
    float or ndarray
        ``x`` with ``norm_cdf(x) == p`` to near double precision.

    Raises
    ------
    ValueError
        If any probability lies outside (0, 1).
    """
    p_arr = np.asarray(p, dtype=float)
    if not np.all((p_arr > 0.0) & (p_arr < 1.0)):
        raise ValueError("probabilities must lie strictly between 0 and 1")
    flat = np.atleast_1d(p_arr).ravel()
    out = np.empty_like(flat)
    upper = flat > 0.5
    # 1 - p is exact for p in [0.5, 1], so symmetry costs nothing
    out[~upper] = _lower_quantile(flat[~upper])
    out[upper] = -_lower_quantile(1.0 - flat[upper])
    out = out.reshape(p_arr.shape)
    return float(out) if out.ndim == 0 else out


def norm_isf(q):
    """Upper-tail quantile: ``x`` with ``norm_sf(x) == q``.

    Preferred over ``norm_ppf(1 - q)`` when ``q`` is tiny.
    """
    q_arr = np.asarray(q, dtype=float)
    out = -np.asarray(norm_ppf(q_arr))
    return float(out) if out.ndim == 0 else out
