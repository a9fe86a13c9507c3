"""Demographic balancing by reweighting, and the two-sample KS alignment check.

The balance objective acts on per-sample weights over a feature table:

    L(w) = sum_d ||mu_d - mu||^2 + max(0, delta - sigma_d)^2

``mu_d`` is the weighted mean of group d, ``mu`` the average of the group
means weighted by group row counts (the ordinary pooled mean when weights are
uniform) and ``sigma_d`` the root-mean of the per-feature weighted variances
of group d. Every term depends only on the weights' proportions within each
group, so rescaling one group's weights leaves the loss unchanged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov

N_GROUPS = 5


class BalanceError(ValueError):
    """Invalid feature table, weights or balancing parameters."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up during optimisation."""


@dataclass
class FeatureTable:
    rows: np.ndarray
    groups: np.ndarray
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        groups = np.asarray(self.groups, dtype=int)
        if rows.ndim != 2 or groups.shape != (rows.shape[0],):
            raise BalanceError("rows must be (N, F) with one group label per row")
        if rows.shape[0] < N_GROUPS:
            raise BalanceError(f"need at least {N_GROUPS} rows, got {rows.shape[0]}")
        if not np.all(np.isfinite(rows)):
            raise BalanceError("feature table contains non-finite values")
        labels = set(groups.tolist())
        if not labels <= set(range(1, N_GROUPS + 1)):
            raise BalanceError(f"group labels must lie in 1..{N_GROUPS}, got {sorted(labels)}")
        counts = np.bincount(groups, minlength=N_GROUPS + 1)[1:]
        if np.any(counts < 2):
            missing = [int(g) + 1 for g in np.flatnonzero(counts < 2)]
            raise BalanceError(f"every group needs at least 2 rows; groups {missing} do not")
        self.rows, self.groups = rows, groups
        if not self.columns:
            self.columns = [f"f{k}" for k in range(rows.shape[1])]

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def group_index(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.groups == d)

    def uniform_weights(self) -> np.ndarray:
        return np.ones(self.n)


@dataclass(frozen=True)
class BalanceConfig:
    delta: float = 0.1
    learning_rate: float = 1.0
    max_iters: int = 500
    tolerance: float = 1e-10

    def __post_init__(self):
        if self.delta < 0:
            raise BalanceError("delta must be nonnegative")
        if self.learning_rate <= 0 or self.max_iters < 0 or self.tolerance < 0:
            raise BalanceError("learning_rate must be positive; max_iters and tolerance nonnegative")


@dataclass
class BalanceResult:
    weights: np.ndarray
    loss_history: list[float]
    iterations: int
    converged: bool


def _check_weights(table: FeatureTable, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (table.n,):
        raise BalanceError(f"expected {table.n} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise BalanceError("weights must be finite and nonnegative")
    return w


def group_moments(table: FeatureTable, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted (mu_d, per-feature variance v_d, pooled mu); rows of the first two follow group order 1..5."""
    w = _check_weights(table, w)
    X = table.rows
    mus, vs = [], []
    for d in range(1, N_GROUPS + 1):
        idx = table.group_index(d)
        wd = w[idx]
        total = wd.sum()
        if total <= 0:
            raise NumericalError(f"group {d} has zero total weight")
        mu_d = wd @ X[idx] / total
        mus.append(mu_d)
        vs.append(wd @ (X[idx] - mu_d) ** 2 / total)
    sizes = np.array([table.group_index(d).size for d in range(1, N_GROUPS + 1)], dtype=float)
    mus = np.array(mus)
    return mus, np.array(vs), sizes @ mus / sizes.sum()


def balance_loss(table: FeatureTable, w, delta: float = 0.1) -> float:
    mus, vs, mu = group_moments(table, w)
    sigma = np.sqrt(vs.mean(axis=1))
    return float(np.sum((mus - mu) ** 2) + np.sum(np.maximum(0.0, delta - sigma) ** 2))


def balance_loss_grad(table: FeatureTable, w, delta: float = 0.1) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to every weight.

    Where sigma_d = 0 the hinge term is not differentiable; its gradient is
    taken as zero there.
    """
    w = _check_weights(table, w)
    X = table.rows
    mus, vs, mu = group_moments(table, w)
    sigma = np.sqrt(vs.mean(axis=1))
    diff = mus - mu
    hinge = np.maximum(0.0, delta - sigma)
    loss = float(np.sum(diff ** 2) + np.sum(hinge ** 2))

    grad = np.zeros(table.n)
    F = X.shape[1]
    total_diff = diff.sum(axis=0)
    for k, d in enumerate(range(1, N_GROUPS + 1)):
        idx = table.group_index(d)
        Wd = w[idx].sum()
        centred = X[idx] - mus[k]
        # mu_d moves directly; mu moves through its share n_d / N of mu_d
        grad[idx] = 2.0 * centred @ (diff[k] - (idx.size / table.n) * total_diff) / Wd
        if hinge[k] > 0 and sigma[k] > 0:
            dv = ((centred ** 2) - vs[k]).sum(axis=1) / (F * Wd)
            grad[idx] += -2.0 * hinge[k] * dv / (2.0 * sigma[k])
    return loss, grad


def _normalise(table: FeatureTable, w: np.ndarray) -> np.ndarray:
    """Rescale each group so its weights sum to its row count."""
    out = w.copy()
    for d in range(1, N_GROUPS + 1):
        idx = table.group_index(d)
        s = out[idx].sum()
        if s <= 0:
            return None
        out[idx] *= idx.size / s
    return out


def optimize_weights(table: FeatureTable, cfg: BalanceConfig = BalanceConfig()) -> BalanceResult:
    """Projected gradient descent with backtracking, starting from uniform weights.

    Each step moves along the negative gradient, clips at zero and rescales
    every group back to its row count (the loss does not depend on per-group
    scale). A step is accepted only if it lowers the loss; otherwise the step
    size halves. The step size grows by 1.5x after each accepted step.
    """
    w = _normalise(table, table.uniform_weights())
    loss, grad = balance_loss_grad(table, w, cfg.delta)
    history = [loss]
    eta = cfg.learning_rate
    converged = False
    it = 0
    while it < cfg.max_iters:
        it += 1
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite loss or gradient at iteration {it}")
        if loss <= cfg.tolerance:
            converged = True
            break
        accepted = False
        while eta > 1e-14:
            cand = _normalise(table, np.maximum(w - eta * grad, 0.0))
            if cand is not None:
                new_loss, new_grad = balance_loss_grad(table, cand, cfg.delta)
                if not math.isfinite(new_loss):
                    raise NumericalError(f"non-finite loss at iteration {it}")
                if new_loss < loss:
                    accepted = True
                    break
            eta *= 0.5
        if not accepted:
            converged = True
            break
        improvement = loss - new_loss
        w, loss, grad = cand, new_loss, new_grad
        history.append(loss)
        eta *= 1.5
        if improvement <= cfg.tolerance * max(1.0, history[0]):
            converged = True
            break
    return BalanceResult(w, history, it, converged)


def max_mean_deviation(table: FeatureTable, w) -> float:
    mus, _, mu = group_moments(table, w)
    return float(np.max(np.linalg.norm(mus - mu, axis=1)))


def group_quotas(target_n: int) -> list[int]:
    """Equal per-group counts; any remainder goes one each to the lowest group ids."""
    if target_n < N_GROUPS:
        raise BalanceError(f"target_n must be at least {N_GROUPS}, got {target_n}")
    base, rem = divmod(target_n, N_GROUPS)
    return [base + (1 if k < rem else 0) for k in range(N_GROUPS)]


def resample(items, groups, w, target_n: int, rng: np.random.Generator) -> list:
    """Draw ``target_n`` items with replacement, equal quota per group, probability ∝ weight."""
    groups = np.asarray(groups, dtype=int)
    w = np.asarray(w, dtype=float)
    if len(items) != groups.size or w.shape != groups.shape:
        raise BalanceError("items, groups and weights must have equal length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise BalanceError("weights must be finite and nonnegative")
    out = []
    for d, quota in zip(range(1, N_GROUPS + 1), group_quotas(target_n)):
        idx = np.flatnonzero(groups == d)
        total = w[idx].sum()
        if idx.size == 0 or total <= 0:
            raise BalanceError(f"group {d} has no positively weighted items to draw from")
        picks = rng.choice(idx, size=quota, replace=True, p=w[idx] / total)
        out.extend(items[i] for i in picks)
    return out


# --------------------------------------------------------------------------
# Two-sample Kolmogorov-Smirnov test

EXACT_MAX_N = 20


def _ks_numerator(a: np.ndarray, b: np.ndarray) -> int:
    """n_a * n_b * D as an exact integer."""
    na, nb = a.size, b.size
    pooled = np.unique(np.concatenate([a, b]))
    ca = np.searchsorted(a, pooled, side="right")
    cb = np.searchsorted(b, pooled, side="right")
    return int(np.max(np.abs(ca.astype(np.int64) * nb - cb.astype(np.int64) * na)))


def ks_exact_pvalue(a, b) -> float:
    """Exact permutation p-value P(D* >= D_obs), counting lattice paths.

    Each relabelling of the pooled sample is a monotone path from (0, 0) to
    (n_a, n_b). The ECDF difference is only observable after a complete block
    of tied values, so the constraint is checked only at those points. The
    count uses Python integers and is exact.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    na, nb = a.size, b.size
    target = _ks_numerator(a, b)
    if target == 0:
        return 1.0
    pooled = np.sort(np.concatenate([a, b]))
    n = na + nb
    check = np.ones(n + 1, dtype=bool)
    check[1:n] = pooled[1:] != pooled[:-1]
    # paths[i] = number of ways to reach (i, k - i) without reaching |diff| >= target
    paths = [1] + [0] * na
    for k in range(1, n + 1):
        new = [0] * (na + 1)
        for i in range(max(0, k - nb), min(k, na) + 1):
            j = k - i
            total = (paths[i - 1] if i > 0 else 0) + (paths[i] if j > 0 else 0)
            if check[k] and abs(i * nb - j * na) >= target:
                total = 0
            new[i] = total
        paths = new
    return 1.0 - paths[na] / comb(n, na)


def ks_two_sample(a, b) -> tuple[float, float]:
    """Return (D, p) for two samples.

    D is the largest absolute difference of the two empirical CDFs. When both
    samples have at most 20 values the p-value is the exact permutation
    probability; otherwise it comes from the asymptotic Kolmogorov
    distribution evaluated at sqrt(n_a n_b / (n_a + n_b)) * D.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise BalanceError("both samples must be nonempty")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise BalanceError("samples must be finite")
    na, nb = a.size, b.size
    num = _ks_numerator(a, b)
    D = num / (na * nb)
    if max(na, nb) <= EXACT_MAX_N:
        p = ks_exact_pvalue(a, b)
    else:
        en = math.sqrt(na * nb / (na + nb))
        p = float(kolmogorov(en * D)) if D > 0 else 1.0
    return D, min(1.0, max(0.0, p))


def kolmogorov_series(x: float, terms: int = 100) -> float:
    """Survival function of the Kolmogorov distribution from its alternating series."""
    if x <= 0:
        return 1.0
    k = np.arange(1, terms + 1)
    return float(min(1.0, max(0.0, 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * x * x)))))


@dataclass
class AlignmentReport:
    min_p: float
    threshold: float
    per_feature: list[dict]

    @property
    def aligned(self) -> bool:
        return self.min_p > self.threshold


def alignment_check(table: FeatureTable, threshold: float = 0.85) -> AlignmentReport:
    """Compare each group against the pooled sample, feature by feature, and keep the smallest p."""
    rows = []
    for f, name in enumerate(table.columns):
        pooled = table.rows[:, f]
        for d in range(1, N_GROUPS + 1):
            D, p = ks_two_sample(table.rows[table.group_index(d), f], pooled)
            rows.append({"feature": name, "group": d, "D": D, "p": p})
    return AlignmentReport(min(r["p"] for r in rows), threshold, rows)


# --------------------------------------------------------------------------
# CSV interfaces


def read_feature_table(path) -> FeatureTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "group" not in reader.fieldnames:
            raise BalanceError(f"{path}: expected a 'group' column")
        cols = [c for c in reader.fieldnames if c != "group"]
        rows, groups = [], []
        for line_no, rec in enumerate(reader, start=2):
            try:
                rows.append([float(rec[c]) for c in cols])
                groups.append(int(rec["group"]))
            except (TypeError, ValueError) as exc:
                raise BalanceError(f"{path}:{line_no}: {exc}") from None
    return FeatureTable(np.array(rows, dtype=float).reshape(len(rows), len(cols)), np.array(groups), cols)


def write_feature_table(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*table.columns, "group"])
        for row, g in zip(table.rows, table.groups):
            w.writerow([*(repr(float(v)) for v in row), int(g)])


def write_weights(path, w) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["index", "weight"])
        for i, v in enumerate(np.asarray(w, dtype=float)):
            out.writerow([i, repr(float(v))])


def read_weights(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        recs = sorted(((int(r["index"]), float(r["weight"])) for r in reader))
    if [i for i, _ in recs] != list(range(len(recs))):
        raise BalanceError(f"{path}: weight indices must be 0..N-1")
    return np.array([v for _, v in recs])
