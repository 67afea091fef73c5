"""MCMC output diagnostics: effective sample size, split potential scale
reduction, and highest-posterior-density intervals."""

from __future__ import annotations

import numpy as np

# convergence bar for the potential scale reduction statistic
RHAT_THRESHOLD = 1.1


def ess(series: np.ndarray) -> float:
    """Effective sample size by initial-positive-sequence truncation of the
    autocorrelation sum, capped at the series length.

    A constant series is degenerate and reports 0.
    """
    x = np.asarray(series, dtype=float).ravel()
    n = x.shape[0]
    if n < 10:
        raise ValueError("need at least 10 samples")
    x = x - x.mean()
    variance = x @ x / n
    if variance == 0.0:
        return 0.0
    size = 1
    while size < 2 * n:
        size <<= 1
    freq = np.fft.rfft(x, size)
    acov = np.fft.irfft(freq * np.conj(freq), size)[:n].real / n
    rho = acov / acov[0]
    # Geyer pairs: sum consecutive-lag pairs while they stay positive
    tau = -1.0
    m = 0
    while 2 * m + 1 < n:
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        m += 1
    if tau <= 0.0:
        return float(n)
    return float(min(n, n / tau))


def rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction: each chain is halved, then the usual
    between/within variance ratio is taken over the split halves."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise ValueError("expected a (n_chains, n_samples) array")
    m, n = chains.shape
    if m < 2:
        raise ValueError("need at least 2 chains")
    if n < 10:
        raise ValueError("need at least 10 samples per chain")
    half = n // 2
    split = np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)
    within = split.var(axis=1, ddof=1).mean()
    if within == 0.0:
        raise ValueError("zero within-chain variance")
    between = half * split.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * within + between / half
    # the raw ratio can dip below one by O(1/n); that carries no diagnostic
    # meaning, so report the convergent floor
    return float(max(np.sqrt(var_plus / within), 1.0))


def hpd_interval(series: np.ndarray, mass: float = 0.9) -> tuple:
    """Shortest contiguous interval spanning ceil(mass * n) inter-draw gaps of
    the sorted sample (ties break toward the lowest lower endpoint)."""
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    x = np.sort(np.asarray(series, dtype=float).ravel())
    n = x.shape[0]
    if n < 20:
        raise ValueError("need at least 20 samples")
    span = int(np.ceil(mass * n))
    if span >= n:
        return float(x[0]), float(x[-1])
    widths = x[span:] - x[: n - span]
    k = int(np.argmin(widths))
    return float(x[k]), float(x[k + span])
