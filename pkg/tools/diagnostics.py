"""
Semi-Implicit Studio - Diagnostics

Comparison tooling for posterior samples:
  * two-sample Kolmogorov-Smirnov distance with its asymptotic p-value
  * column moments and a Pearson correlation matrix
  * the closed-form Gaussian sandwich used to certify the bound estimators
  * plot data (Freedman-Diaconis histograms, 2-D density grids) as DataFrames
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from models.schemas import KsResult, MomentTable

logger = logging.getLogger(__name__)


# ============================================================
# Kolmogorov-Smirnov
# ============================================================

def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """sup |ECDF_a - ECDF_b| over the union of both samples."""
    a, b = np.sort(a), np.sort(b)
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_two_sample(a, b) -> KsResult:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two non-empty samples")
    if a.size < 2 or b.size < 2:
        raise ValueError(f"KS test needs at least 2 draws per sample, got {a.size} and {b.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("KS samples must be finite")
    d = ks_statistic(a, b)
    en = math.sqrt(a.size * b.size / (a.size + b.size))
    p = float(np.clip(special.kolmogorov(en * d), 0.0, 1.0))
    return KsResult(statistic=d, p_value=p, n1=int(a.size), n2=int(b.size))


# ============================================================
# Moments
# ============================================================

def summary_stats(draws: np.ndarray, names: Optional[Sequence[str]] = None, method: str = "") -> MomentTable:
    """Column means, sample sds (ddof=1) and Pearson correlations.

    Correlations touching a zero-variance column are reported as 0 (the
    diagonal stays 1) and the column is listed in `zero_variance`.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[0] < 2:
        raise ValueError("summary statistics need at least 2 draws")
    d = draws.shape[1]
    names = list(names) if names is not None else [f"z{i + 1}" for i in range(d)]
    cov = np.atleast_2d(np.cov(draws, rowvar=False, ddof=1))
    var = np.diag(cov).copy()
    flat = var <= 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.atleast_2d(np.corrcoef(draws, rowvar=False))
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    flagged = [names[i] for i in np.flatnonzero(flat)]
    if flagged:
        logger.warning("Zero-variance columns in %s draws: %s", method or "posterior", ", ".join(flagged))
    return MomentTable(method=method, variables=names, means=draws.mean(axis=0).tolist(),
                       sds=np.sqrt(np.maximum(var, 0.0)).tolist(), correlation=corr.tolist(),
                       zero_variance=flagged)


# ============================================================
# Gaussian sandwich
# ============================================================

@dataclass(frozen=True)
class GaussianSandwichCase:
    """q(z | psi) = N(psi, sigma_sq), psi ~ N(m, tau_sq), target N(0, 1)."""

    sigma_sq: float
    tau_sq: float
    m: float = 0.0

    def __post_init__(self):
        if self.sigma_sq <= 0 or self.tau_sq < 0:
            raise ValueError("sigma_sq must be positive and tau_sq non-negative")


@dataclass(frozen=True)
class SandwichValues:
    elbo: float
    lower: float
    upper: float


def gaussian_oracle(case: GaussianSandwichCase) -> SandwichValues:
    s2, t2, m = case.sigma_sq + case.tau_sq, case.tau_sq, case.m
    elbo = -0.5 * (s2 + m * m - 1.0 - math.log(s2))
    lower = -0.5 * (case.sigma_sq + m * m + t2 - 1.0 - math.log(case.sigma_sq))
    upper = (-0.5 * (s2 + m * m) + 0.5 * math.log(case.sigma_sq)
             + (case.sigma_sq + 2.0 * t2) / (2.0 * case.sigma_sq))
    return SandwichValues(elbo, lower, upper)


# ============================================================
# Trends
# ============================================================

def spearman_trend(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation; NaN when either side is constant."""
    if len(x) < 2:
        return float("nan")
    if np.ptp(np.asarray(x, dtype=np.float64)) == 0 or np.ptp(np.asarray(y, dtype=np.float64)) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y)[0])


def quartile_drop(trace: np.ndarray) -> float:
    """First-quartile mean minus last-quartile mean of a loss trace."""
    trace = np.asarray(trace, dtype=np.float64)
    q = max(trace.size // 4, 1)
    return float(trace[:q].mean() - trace[-q:].mean())


# ============================================================
# Plot data
# ============================================================

def fd_histogram(values: np.ndarray) -> pd.DataFrame:
    values = np.asarray(values, dtype=np.float64).ravel()
    edges = np.histogram_bin_edges(values, bins="fd")
    counts, _ = np.histogram(values, bins=edges)
    widths = np.diff(edges)
    density = counts / np.maximum(counts.sum() * widths, np.finfo(np.float64).tiny)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts, "density": density})


def histogram_table(draws: Mapping[str, np.ndarray], names: Sequence[str]) -> pd.DataFrame:
    """Long-format histograms for every (method, variable) pair."""
    frames = []
    for method, values in draws.items():
        values = np.atleast_2d(np.asarray(values, dtype=np.float64).T).T
        for i, name in enumerate(names):
            frame = fd_histogram(values[:, i])
            frame.insert(0, "variable", name)
            frame.insert(0, "method", method)
            frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def density_grid(draws: np.ndarray, size: int = 50) -> pd.DataFrame:
    """Normalized 2-D histogram of bivariate draws on a size x size grid of cell centers."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim != 2 or draws.shape[1] != 2:
        raise ValueError("density grid needs draws of shape (n, 2)")
    hist, xe, ye = np.histogram2d(draws[:, 0], draws[:, 1], bins=size, density=True)
    xc, yc = 0.5 * (xe[:-1] + xe[1:]), 0.5 * (ye[:-1] + ye[1:])
    gx, gy = np.meshgrid(xc, yc, indexing="ij")
    return pd.DataFrame({"x": gx.ravel(), "y": gy.ravel(), "density": hist.ravel()})


def log_density_grid(log_density: Callable[[np.ndarray], np.ndarray], lo: Sequence[float],
                     hi: Sequence[float], size: int = 100) -> pd.DataFrame:
    """Evaluate a 2-D log density on a regular grid for contour plots."""
    xs = np.linspace(lo[0], hi[0], size)
    ys = np.linspace(lo[1], hi[1], size)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    values = np.asarray(log_density(points), dtype=np.float64)
    return pd.DataFrame({"x": points[:, 0], "y": points[:, 1], "log_density": values})
