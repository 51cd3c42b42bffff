"""Log-domain special functions and symmetric eigendecomposition.

Every probability in this package crosses module boundaries as a base-10
logarithm (``LogProb`` below): anomaly scores routinely correspond to tail
probabilities far below the smallest positive double, so linear-domain
survival functions are useless here.  The incomplete-gamma machinery keeps
the prefactor ``a*ln(x) - x - lgamma(a)`` in log space and only ever
exponentiates quantities of moderate size, so ``chi2_sf`` stays finite and
accurate for tails of 1e-300 and far beyond.

Scalar inputs give scalar outputs; ``chi2_sf`` also accepts arrays and is
the hot path of the per-pixel NFA computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ContractError, ParameterError

__all__ = [
    "LogProb",
    "SpectralDecomposition",
    "chi2_sf",
    "chi2_isf",
    "binomial_tail",
    "symmetric_eig",
]

# log10 of a probability (<= 0) or of an NFA (any real).
LogProb = float

_LN10 = math.log(10.0)
_EPS = 1e-17
_FPMIN = 1e-300
_MAX_ITER = 100_000


def _ln_gamma_p_series(a, x):
    """ln P(a, x) (regularized lower incomplete gamma) by power series.

    Intended for 0 < x < a + 1 where the series converges quickly and
    P stays bounded away from 1.
    """
    x = np.asarray(x, dtype=float)
    term = np.full(x.shape, 1.0 / a)
    total = term.copy()
    idx = np.arange(x.size)
    flat_x = x.ravel()
    flat_term = term.ravel()
    flat_total = total.ravel()
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        flat_term[idx] *= flat_x[idx] / ap
        flat_total[idx] += flat_term[idx]
        done = np.abs(flat_term[idx]) < np.abs(flat_total[idx]) * _EPS
        if done.any():
            idx = idx[~done]
        if idx.size == 0:
            break
    else:
        raise RuntimeError("incomplete gamma series failed to converge")
    return a * np.log(x) - x - math.lgamma(a) + np.log(total)


def _ln_gamma_q_contfrac(a, x):
    """ln Q(a, x) (regularized upper incomplete gamma) by Lentz's continued
    fraction.  Intended for x >= a + 1."""
    x = np.asarray(x, dtype=float)
    b = x + 1.0 - a
    c = np.full(x.shape, 1.0 / _FPMIN)
    d = 1.0 / b
    h = d.copy()
    idx = np.arange(x.size)
    flat_b = b.ravel()
    flat_c = c.ravel()
    flat_d = d.ravel()
    flat_h = h.ravel()
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        flat_b[idx] += 2.0
        flat_d[idx] = an * flat_d[idx] + flat_b[idx]
        np.copyto(flat_d, _FPMIN, where=_small(flat_d, idx))
        flat_c[idx] = flat_b[idx] + an / flat_c[idx]
        np.copyto(flat_c, _FPMIN, where=_small(flat_c, idx))
        flat_d[idx] = 1.0 / flat_d[idx]
        delt = flat_d[idx] * flat_c[idx]
        flat_h[idx] *= delt
        done = np.abs(delt - 1.0) < _EPS
        if done.any():
            idx = idx[~done]
        if idx.size == 0:
            break
    else:
        raise RuntimeError("incomplete gamma continued fraction failed to converge")
    return a * np.log(x) - x - math.lgamma(a) + np.log(h)


def _small(arr, idx):
    mask = np.zeros(arr.shape, dtype=bool)
    mask[idx] = np.abs(arr[idx]) < _FPMIN
    return mask


def chi2_sf(d, m) -> LogProb:
    """log10 P(X > d) for X ~ chi-square with ``m`` degrees of freedom.

    ``d`` may be a scalar or an ndarray; the result has the same shape.
    Monotone nonincreasing in ``d``, exactly 0 at ``d = 0``, finite for
    arbitrarily deep tails.
    """
    m = _check_dof(m)
    arr = np.asarray(d, dtype=float)
    if arr.size and (not np.all(np.isfinite(arr)) or np.any(arr < 0)):
        raise ParameterError("chi2_sf requires finite d >= 0")
    a = 0.5 * m
    x = 0.5 * arr
    out = np.zeros(x.shape, dtype=float)
    flat_x = x.ravel()
    flat_out = out.ravel()
    series = (flat_x > 0) & (flat_x < a + 1.0)
    confrac = flat_x >= a + 1.0
    if series.any():
        ln_p = _ln_gamma_p_series(a, flat_x[series])
        # Q = 1 - P; in this regime P <= ~0.7 so the subtraction is benign.
        flat_out[series] = np.log1p(-np.exp(ln_p))
    if confrac.any():
        flat_out[confrac] = _ln_gamma_q_contfrac(a, flat_x[confrac])
    out = out / _LN10
    if np.isscalar(d) or np.ndim(d) == 0:
        return float(out)
    return out


def chi2_isf(p, m) -> float:
    """Inverse of ``chi2_sf`` in the linear probability argument.

    Returns d such that P(X > d) = p for X ~ chi-square(m).  Bisection on
    ``chi2_sf`` down to an absolute bracket width of 1e-12; robustness is
    preferred over speed because this runs once per configuration.
    """
    m = _check_dof(m)
    if not (isinstance(p, (float, int, np.floating)) and 0.0 < p < 1.0):
        raise ParameterError("chi2_isf requires 0 < p < 1")
    target = math.log10(p)
    hi = float(max(m, 1))
    while chi2_sf(hi, m) > target:
        hi *= 2.0
        if hi > 1e18:
            raise RuntimeError("chi2_isf bracket expansion failed")
    lo = 0.0
    # Bisect to a 1e-12 bracket, then keep halving while the log-domain
    # residual exceeds 1e-10 (roots microscopically close to 0 need it).
    while hi - lo > 1e-12 or abs(chi2_sf(0.5 * (lo + hi), m) - target) > 1e-10:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if chi2_sf(mid, m) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def binomial_tail(n, k, p) -> LogProb:
    """log10 P(X >= k) for X ~ Binomial(n, p).

    Exact log-space summation of the pmf for n <= 10^4; the regularized
    incomplete beta identity P(X >= k) = I_p(k, n - k + 1) for larger n.
    Monotone nonincreasing in k.
    """
    n = _check_count(n, "n")
    k = _check_count(k, "k")
    if k > n:
        raise ParameterError(f"binomial_tail requires k <= n, got k={k} n={n}")
    if not (isinstance(p, (float, int, np.floating)) and 0.0 <= p <= 1.0):
        raise ParameterError("binomial_tail requires 0 <= p <= 1")
    p = float(p)
    if k == 0:
        return 0.0
    if p == 0.0:
        return -math.inf
    if p == 1.0:
        return 0.0
    if k == n:
        return n * math.log10(p)
    if n <= 10_000:
        i = np.arange(k, n + 1, dtype=float)
        ln_terms = (
            gammaln(n + 1.0)
            - gammaln(i + 1.0)
            - gammaln(n - i + 1.0)
            + i * math.log(p)
            + (n - i) * math.log1p(-p)
        )
        return min(float(logsumexp(ln_terms)) / _LN10, 0.0)
    return min(_ln_betainc(float(k), float(n - k + 1), p) / _LN10, 0.0)


def _ln_betainc(a, b, x):
    """ln I_x(a, b), the regularized incomplete beta, prefactor in log space."""
    ln_pre = (
        a * math.log(x)
        + b * math.log1p(-x)
        - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return ln_pre + math.log(_betacf(a, b, x) / a)
    # I_x >= ~0.4 here, so the complement never cancels catastrophically.
    ln_other = ln_pre + math.log(_betacf(b, a, 1.0 - x) / b)
    return math.log1p(-math.exp(min(ln_other, -1e-18)))


def _betacf(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delt = d * c
        h *= delt
        if abs(delt - 1.0) < 3e-16:
            return h
    raise RuntimeError("incomplete beta continued fraction failed to converge")


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues (descending) and the matching orthonormal eigenvectors.

    Column i of ``eigenvectors`` pairs with ``eigenvalues[i]``.  Signs are
    fixed so the first non-negligible entry of each column is positive,
    which makes learned filter banks reproducible bit for bit.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def symmetric_eig(c) -> SpectralDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    Input must be symmetric within 1e-10 relative tolerance (this is a
    contract, not something silently repaired beyond averaging with the
    transpose).  Deterministic for identical input.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 1:
        raise ParameterError(f"expected a square matrix, got shape {c.shape}")
    if c.shape[0] > 4096:
        raise ParameterError("matrices larger than 4096x4096 are not supported")
    if not np.all(np.isfinite(c)):
        raise ParameterError("matrix entries must be finite")
    scale = max(1.0, float(np.abs(c).max()))
    if float(np.abs(c - c.T).max()) > 1e-10 * scale:
        raise ContractError("matrix is not symmetric within 1e-10 relative tolerance")
    w, v = np.linalg.eigh(0.5 * (c + c.T))
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    for j in range(v.shape[1]):
        col = v[:, j]
        cmax = np.abs(col).max()
        nz = np.nonzero(np.abs(col) > 1e-8 * cmax)[0]
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    w.flags.writeable = False
    v.flags.writeable = False
    return SpectralDecomposition(eigenvalues=w, eigenvectors=v)


def _check_dof(m):
    if isinstance(m, (bool, np.bool_)) or not isinstance(m, (int, np.integer)):
        raise ParameterError(f"degrees of freedom must be an integer, got {m!r}")
    m = int(m)
    if m < 1:
        raise ParameterError(f"degrees of freedom must be >= 1, got {m}")
    return m


def _check_count(v, name):
    if isinstance(v, (bool, np.bool_)) or not isinstance(v, (int, np.integer)):
        raise ParameterError(f"{name} must be an integer, got {v!r}")
    v = int(v)
    if v < 0:
        raise ParameterError(f"{name} must be >= 0, got {v}")
    return v
