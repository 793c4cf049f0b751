"""Gaussian divergences, the Shapiro-Wilk test and trace summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import StatsError


@dataclass(frozen=True)
class GaussianSummary:
    mu: float
    sigma: float


def fit_gaussian(samples) -> GaussianSummary:
    """Sample mean and (n-1)-denominator standard deviation."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise StatsError("need at least 2 samples")
    sd = float(np.std(x, ddof=1))
    if not sd > 0:
        raise StatsError("samples have zero variance")
    return GaussianSummary(float(np.mean(x)), sd)


def _check_sigma(*sigmas):
    for s in sigmas:
        if not s > 0:
            raise StatsError(f"sigma must be > 0, got {s}")


def gaussian_kl(p: GaussianSummary, q: GaussianSummary) -> float:
    """KL(P || Q) for univariate Gaussians."""
    _check_sigma(p.sigma, q.sigma)
    return (
        math.log(q.sigma / p.sigma)
        + 0.5 * (p.sigma**2 + (p.mu - q.mu) ** 2) / q.sigma**2
        - 0.5
    )


def jeffreys_j(p: GaussianSummary, q: GaussianSummary) -> float:
    """Symmetrized KL divergence, ``KL(P||Q) + KL(Q||P)``.

    Evaluated in a form that is symmetric term by term, so swapping the
    arguments gives a bit-identical result.  The log terms of the two KL
    directions cancel.
    """
    _check_sigma(p.sigma, q.sigma)
    vp, vq = p.sigma**2, q.sigma**2
    d2 = (p.mu - q.mu) ** 2
    return 0.5 * ((vp + d2) / vq + (vq + d2) / vp) - 1.0


def jeffreys_j_array(mu_p, sigma_p, mu_q, sigma_q):
    """Vectorized :func:`jeffreys_j`.  Zero sigma on either side gives +inf."""
    mu_p, sigma_p, mu_q, sigma_q = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (mu_p, sigma_p, mu_q, sigma_q))
    )
    if np.any(sigma_p < 0) or np.any(sigma_q < 0):
        raise StatsError("sigma must be nonnegative")
    vp, vq = sigma_p**2, sigma_q**2
    d2 = (mu_p - mu_q) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        j = 0.5 * ((vp + d2) / vq + (vq + d2) / vp) - 1.0
    return np.where((vp == 0) | (vq == 0), np.inf, j)


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston 1992 / AS R94)

# Polynomial corrections of the two extreme coefficients in powers of
# u = 1/sqrt(n), constant term first.
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
# Normalizing transform of W for 4 <= n <= 11 (polynomials in n).
_GAMMA_SMALL = (-2.273, 0.459)
_MU_SMALL = (0.5440, -0.39978, 0.025054, -6.714e-4)
_LOGSIG_SMALL = (1.3822, -0.77857, 0.062767, -0.0020322)
# ... and for n >= 12 (polynomials in log n).
_MU_LARGE = (-1.5861, -0.31082, -0.083751, 0.0038915)
_LOGSIG_LARGE = (-0.4803, -0.082676, 0.0030302)

SW_MIN_N = 3
SW_MAX_N = 5000


def _poly(coef, x):
    return sum(c * x**k for k, c in enumerate(coef))


@lru_cache(maxsize=64)
def _sw_coefficients(n):
    """Antisymmetric weights a_1..a_n for sorted samples (a_n > 0)."""
    if n == 3:
        a = np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
        a.setflags(write=False)
        return a
    i = np.arange(1, n + 1)
    m = ndtri((i - 0.375) / (n + 0.25))
    ssq = float(np.sum(m * m))
    u = 1.0 / math.sqrt(n)
    an = _poly(_C1, u) + m[-1] / math.sqrt(ssq)
    a = m.copy()
    if n > 5:
        an1 = _poly(_C2, u) + m[-2] / math.sqrt(ssq)
        phi = (ssq - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
        a /= math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        phi = (ssq - 2 * m[-1] ** 2) / (1 - 2 * an**2)
        a /= math.sqrt(phi)
        a[-1], a[0] = an, -an
    a.setflags(write=False)
    return a


def _sw_pvalue(w, n):
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return min(max(p, 0.0), 1.0)
    if n <= 11:
        gamma = _poly(_GAMMA_SMALL, n)
        mu = _poly(_MU_SMALL, n)
        sigma = math.exp(_poly(_LOGSIG_SMALL, n))
        one_minus = 1.0 - w
        if one_minus <= 0 or gamma - math.log(one_minus) <= 0:
            return 1.0 if one_minus <= 0 else 0.0
        y = -math.log(gamma - math.log(one_minus))
    else:
        ln = math.log(n)
        mu = _poly(_MU_LARGE, ln)
        sigma = math.exp(_poly(_LOGSIG_LARGE, ln))
        if w >= 1.0:
            return 1.0
        y = math.log(1.0 - w)
    return float(ndtr(-(y - mu) / sigma))


def shapiro_wilk(samples):
    """Shapiro-Wilk W statistic and p-value for 3 <= n <= 5000.

    Weights follow Royston's approximation to the expected normal order
    statistics; the p-value comes from his normalizing transformation of
    ``log(1 - W)`` (n >= 12) or ``-log(gamma - log(1 - W))`` (4 <= n <= 11).
    n = 3 uses the exact distribution.

    Returns
    -------
    (float, float)
        ``(W, p)``.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if not SW_MIN_N <= n <= SW_MAX_N:
        raise StatsError(f"Shapiro-Wilk needs {SW_MIN_N} <= n <= {SW_MAX_N}, got n = {n}")
    if not np.all(np.isfinite(x)):
        raise StatsError("samples must be finite")
    if x[-1] - x[0] <= 0:
        raise StatsError("all samples are identical")
    xc = x - x.mean()
    a = _sw_coefficients(n)
    w = float(np.dot(a, xc) ** 2 / np.dot(xc, xc))
    w = min(w, 1.0)
    return w, _sw_pvalue(w, n)


@dataclass
class NormalityReport:
    w: np.ndarray
    p: np.ndarray
    alpha: float

    @property
    def rejected(self):
        return self.p < self.alpha

    @property
    def rejections(self):
        return int(np.count_nonzero(self.rejected))

    def __len__(self):
        return self.w.size

    def to_csv(self, path, timestamps=None):
        from .timeseries import format_timestamp

        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,timestamp,w_statistic,p_value,rejected\n")
            for i in range(len(self)):
                ts = format_timestamp(timestamps[i]) if timestamps is not None else ""
                fh.write(f"{i},{ts},{self.w[i]!r},{self.p[i]!r},{int(self.rejected[i])}\n")


def normality_scan(per_step_samples, alpha=0.05) -> NormalityReport:
    """Shapiro-Wilk test of every step's sample set."""
    if not 0.0 <= alpha <= 1.0:
        raise StatsError("alpha must lie in [0, 1]")
    ws, ps = [], []
    for step, samples in enumerate(per_step_samples):
        try:
            w, p = shapiro_wilk(samples)
        except StatsError as exc:
            raise StatsError(f"step {step}: {exc}") from None
        ws.append(w)
        ps.append(p)
    return NormalityReport(np.array(ws), np.array(ps), float(alpha))


def median_j(trace) -> float:
    """Median of per-step divergences (mean of the two central values for even counts).

    ``+inf`` entries are allowed; NaN is not.
    """
    x = np.asarray(trace, dtype=np.float64).ravel()
    if x.size == 0:
        raise StatsError("empty trace")
    if np.any(np.isnan(x)):
        raise StatsError("trace contains NaN")
    return float(np.median(x))


def divergence_trace(pred, meas) -> np.ndarray:
    """Per-step Jeffreys divergence between predicted and measurement Gaussians.

    Both arguments are sequences of :class:`GaussianSummary` or
    ``(mu, sigma)`` pairs, or ``(n, 2)`` arrays.
    """
    pred = _as_pairs(pred)
    meas = _as_pairs(meas)
    if pred.shape[0] != meas.shape[0]:
        raise StatsError(f"length mismatch: {pred.shape[0]} predictions vs {meas.shape[0]} measurements")
    return jeffreys_j_array(pred[:, 0], pred[:, 1], meas[:, 0], meas[:, 1])


def _as_pairs(seq):
    if isinstance(seq, np.ndarray):
        a = np.asarray(seq, dtype=np.float64)
    else:
        a = np.array([(g.mu, g.sigma) if isinstance(g, GaussianSummary) else tuple(g) for g in seq],
                     dtype=np.float64)
    return a.reshape(-1, 2)
