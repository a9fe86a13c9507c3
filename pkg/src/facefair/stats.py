"""Correlation, inter-rater agreement and percentile bootstrap intervals."""

from __future__ import annotations

import logging
from itertools import combinations
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


class UndefinedStatisticError(ValueError):
    """The statistic has no value for this input (e.g. correlation of a constant series)."""


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equal-length series with at least two values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("series must be finite")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("correlation is undefined when a series has zero variance")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def _kappa_pair(a: np.ndarray, b: np.ndarray) -> float:
    labels = np.unique(np.concatenate([a, b]))
    p_o = float(np.mean(a == b))
    pa = np.array([np.mean(a == lab) for lab in labels])
    pb = np.array([np.mean(b == lab) for lab in labels])
    p_e = float(pa @ pb)
    if np.isclose(p_e, 1.0):
        log.info("chance agreement is 1 (both raters constant and equal); kappa set to 1")
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def cohen_kappa(ratings) -> float:
    """Cohen's kappa for an (items x raters) table of categorical labels.

    With two raters this is the usual statistic. With more raters the value
    is the mean of Cohen's kappa over all rater pairs (not Fleiss' kappa).
    """
    t = np.asarray(ratings)
    if t.ndim != 2 or t.shape[0] < 1 or t.shape[1] < 2:
        raise ValueError("ratings must be an (items x raters) table with at least two raters")
    return float(np.mean([_kappa_pair(t[:, i], t[:, j])
                          for i, j in combinations(range(t.shape[1]), 2)]))


def kappa_from_confusion(table) -> float:
    """Two-rater kappa from a square agreement (confusion) matrix of counts."""
    m = np.asarray(table, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.sum() <= 0:
        raise ValueError("need a nonempty square count matrix")
    n = m.sum()
    p_o = np.trace(m) / n
    p_e = float(m.sum(axis=1) @ m.sum(axis=0)) / n ** 2
    if np.isclose(p_e, 1.0):
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


def bootstrap_ci(values, statistic: Callable = np.mean, n_boot: int = 2000, alpha: float = 0.05,
                 rng: np.random.Generator | None = None, *, vectorized: bool = False,
                 ) -> tuple[float, float]:
    """Percentile bootstrap interval for ``statistic`` of ``values``.

    Rows of ``values`` are resampled with replacement. With
    ``vectorized=True`` the statistic is called once on an
    ``(n_boot, n, ...)`` stack and must accept ``axis=1``.
    """
    if n_boot < 100:
        raise ValueError("n_boot must be at least 100")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if rng is None:
        raise ValueError("an explicit seeded rng is required")
    v = np.asarray(values)
    n = v.shape[0]
    if n < 1:
        raise ValueError("need at least one value")
    idx = rng.integers(0, n, size=(n_boot, n))
    if vectorized:
        stats = np.asarray(statistic(v[idx], axis=1), dtype=float)
    else:
        stats = np.array([statistic(v[row]) for row in idx], dtype=float)
    lo, hi = np.quantile(stats, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)
