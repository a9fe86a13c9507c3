"""Verification benchmark: pairs, ROC, TPR@FAR, EER, thresholds and fairness gaps.

Conventions used throughout:

* a pair is accepted iff ``score >= tau`` (ties accept);
* FAR is the impostor accept rate, TPR the genuine accept rate;
* the per-group "accept rate" used by the parity difference is the genuine
  accept rate, i.e. the group TPR at ``tau``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np


class ProtocolError(ValueError):
    """The pair protocol cannot produce the requested quantity."""


class ExtrapolationWarning(UserWarning):
    """A FAR target lies below the smallest positive FAR the data can resolve."""


@dataclass
class PairSet:
    scores: np.ndarray
    genuine: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        self.genuine = np.asarray(self.genuine, dtype=bool).ravel()
        self.group = np.asarray(self.group, dtype=int).ravel()
        if not (self.scores.size == self.genuine.size == self.group.size):
            raise ProtocolError("scores, genuine and group must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ProtocolError("scores must be finite")
        if not self.genuine.any():
            raise ProtocolError("a pair set needs at least one genuine pair")

    def __len__(self):
        return self.scores.size

    @property
    def usable_for_far(self) -> bool:
        """False for genuine-only sets, which cannot support any FAR-based metric."""
        return bool((~self.genuine).any())

    def groups(self) -> list[int]:
        return sorted(set(self.group.tolist()))

    def counts(self) -> dict[int, dict[str, int]]:
        return {g: {"genuine": int((self.genuine & (self.group == g)).sum()),
                    "impostor": int((~self.genuine & (self.group == g)).sum())}
                for g in self.groups()}

    def subset(self, mask) -> "PairSet":
        mask = np.asarray(mask, dtype=bool)
        return PairSet(self.scores[mask], self.genuine[mask], self.group[mask])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["score", "genuine", "group"])
            for s, gen, g in zip(self.scores, self.genuine, self.group):
                w.writerow([repr(float(s)), int(gen), int(g)])

    @classmethod
    def from_csv(cls, path) -> "PairSet":
        with open(path, newline="") as fh:
            recs = list(csv.DictReader(fh))
        return cls([float(r["score"]) for r in recs], [int(r["genuine"]) == 1 for r in recs],
                   [int(r["group"]) for r in recs])


def _cosine_matrix_rows(U: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", U[i], U[j])


def sample_pairs(embeddings, identity_ids, group_ids, impostor_ratio: float,
                 rng: np.random.Generator, cross_group: bool = False) -> PairSet:
    """Score every genuine pair and a sample of impostor pairs.

    ``embeddings`` holds one unit vector per sample (an all-zero row means the
    encoder produced no usable feature and scores 0 against everything). All
    within-identity pairs are genuine. Impostor pairs are drawn without
    replacement, ``round(impostor_ratio * genuine_count)`` per group, between
    different identities of the same group (or of any group when
    ``cross_group`` is set, in which case the pair is labelled with the first
    sample's group).
    """
    U = np.asarray(embeddings, dtype=float)
    ids = np.asarray(identity_ids)
    grp = np.asarray(group_ids, dtype=int)
    if U.ndim != 2 or U.shape[0] != ids.size or ids.size != grp.size:
        raise ProtocolError("embeddings, identity_ids and group_ids must align")
    if np.unique(ids).size < 2:
        raise ProtocolError("need at least two identities")
    if impostor_ratio < 0:
        raise ProtocolError("impostor_ratio must be nonnegative")
    if np.any(np.linalg.norm(U, axis=1) == 0):
        warnings.warn("zero embeddings present; their pairs score 0", RuntimeWarning, stacklevel=2)

    gi, gj = [], []
    for iid in np.unique(ids):
        members = np.flatnonzero(ids == iid)
        for a, b in combinations(members, 2):
            gi.append(a)
            gj.append(b)
    if not gi:
        raise ProtocolError("no identity has two samples, so there are no genuine pairs")
    gi, gj = np.array(gi), np.array(gj)

    ii, jj = [], []
    if impostor_ratio > 0:
        for g in sorted(set(grp.tolist())):
            n_gen = int(np.sum(grp[gi] == g))
            want = int(round(impostor_ratio * n_gen))
            if want == 0:
                continue
            left = np.flatnonzero(grp == g)
            right = np.arange(ids.size) if cross_group else left
            a, b = np.meshgrid(left, right, indexing="ij")
            a, b = a.ravel(), b.ravel()
            keep = (ids[a] != ids[b]) & ((a < b) | cross_group)
            a, b = a[keep], b[keep]
            if want > a.size:
                warnings.warn(f"group {g}: only {a.size} impostor pairs available, {want} requested",
                              RuntimeWarning, stacklevel=2)
                want = a.size
            pick = np.sort(rng.choice(a.size, size=want, replace=False))
            ii.append(a[pick])
            jj.append(b[pick])
    ii = np.concatenate(ii) if ii else np.zeros(0, dtype=int)
    jj = np.concatenate(jj) if jj else np.zeros(0, dtype=int)

    first = np.concatenate([gi, ii])
    second = np.concatenate([gj, jj])
    scores = np.clip(_cosine_matrix_rows(U, first, second), -1.0, 1.0)
    genuine = np.concatenate([np.ones(gi.size, bool), np.zeros(ii.size, bool)])
    return PairSet(scores, genuine, grp[first])


# --------------------------------------------------------------------------
# ROC and operating points


@dataclass
class RocCurve:
    thresholds: np.ndarray
    far: np.ndarray
    tpr: np.ndarray

    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.far))


def roc(pairs: PairSet) -> RocCurve:
    """ROC from one descending sort and a cumulative sweep.

    The first point is threshold +inf (nothing accepted); then one point per
    distinct score, where a threshold equal to that score accepts every pair
    scoring at least that much. Tied scores therefore share one point.
    """
    if not pairs.usable_for_far:
        raise ProtocolError("pair set has no impostor pairs; FAR is undefined")
    order = np.argsort(-pairs.scores, kind="stable")
    s = pairs.scores[order]
    gen = pairs.genuine[order]
    tp = np.cumsum(gen)
    fp = np.cumsum(~gen)
    last = np.r_[s[1:] != s[:-1], True]
    n_gen, n_imp = tp[-1], fp[-1]
    thresholds = np.r_[np.inf, s[last]]
    tpr = np.r_[0.0, tp[last] / n_gen]
    far = np.r_[0.0, fp[last] / n_imp]
    return RocCurve(thresholds, far, tpr)


def tpr_at_far(curve: RocCurve, far_target: float, *, with_flag: bool = False):
    """TPR at a FAR target, interpolated linearly in log10(FAR).

    If the target is attained exactly, the best TPR at that FAR is returned.
    Between two sweep points the TPR is interpolated from the last point
    below the target to the first point above it. A target smaller than the
    smallest positive FAR cannot be bracketed on a log axis; the TPR at the
    smallest positive FAR is returned, an ``ExtrapolationWarning`` is issued,
    and ``with_flag=True`` also returns ``True`` as a second value.
    """
    if not 0.0 < far_target < 1.0:
        raise ValueError(f"far_target must lie in (0, 1), got {far_target}")
    far, tpr = curve.far, curve.tpr
    flag = False
    exact = np.flatnonzero(far == far_target)
    if exact.size:
        value = float(tpr[exact].max())
    else:
        hi = int(np.searchsorted(far, far_target, side="right"))
        lo = hi - 1
        if far[lo] == 0.0:
            value = float(tpr[hi])
            flag = True
            warnings.warn(f"FAR target {far_target:g} is below the smallest positive FAR "
                          f"{far[hi]:g}; using the TPR there", ExtrapolationWarning, stacklevel=2)
        else:
            x0, x1 = math.log10(far[lo]), math.log10(far[hi])
            frac = (math.log10(far_target) - x0) / (x1 - x0)
            value = float(tpr[lo] + frac * (tpr[hi] - tpr[lo]))
    return (value, flag) if with_flag else value


def eer(curve: RocCurve) -> float:
    """Equal error rate, linearly interpolated where FAR crosses FNR = 1 - TPR."""
    d = curve.far - (1.0 - curve.tpr)
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return float(curve.far[k])
    frac = -d[k - 1] / (d[k] - d[k - 1])
    return float(curve.far[k - 1] + frac * (curve.far[k] - curve.far[k - 1]))


@dataclass(frozen=True)
class OperatingPoint:
    tau: float
    target_far: float

    def __post_init__(self):
        if not math.isfinite(self.tau):
            raise ValueError("tau must be finite")


def global_threshold(pairs: PairSet, far_target: float) -> OperatingPoint:
    """The loosest threshold whose pooled FAR does not exceed the target.

    Candidates are the observed impostor scores (accept iff score >= tau), so
    the result is the smallest impostor score whose FAR is within target; the
    admissible interval of thresholds is (next lower impostor score, tau].
    For ``far_target >= 1`` every pair is accepted and tau is placed just
    below the smallest score. A positive target below the smallest nonzero
    FAR the impostor scores can realise raises ``ProtocolError``.
    """
    imp = np.sort(pairs.scores[~pairs.genuine])[::-1]
    if imp.size == 0:
        raise ProtocolError("no impostor scores; cannot set a FAR threshold")
    if far_target >= 1.0:
        return OperatingPoint(float(np.nextafter(pairs.scores.min(), -np.inf)), float(far_target))
    if far_target < 0:
        raise ValueError("far_target must be nonnegative")
    n = imp.size
    # FAR at tau = imp[k] counts every impostor >= imp[k]
    fars = np.searchsorted(-imp, -imp, side="right") / n
    ok = np.flatnonzero(fars <= far_target)
    if ok.size == 0:
        raise ProtocolError(f"FAR target {far_target:g} is unattainable with observed thresholds; "
                            f"smallest achievable FAR is {fars.min():g}")
    return OperatingPoint(float(imp[ok[-1]]), float(far_target))


@dataclass
class GroupRates:
    group: int
    evaluated: bool
    tpr: float = float("nan")
    fpr: float = float("nan")
    accept_rate: float = float("nan")
    n_genuine: int = 0
    n_impostor: int = 0


def _rates(scores, genuine, tau):
    acc = scores >= tau
    return float(acc[genuine].mean()), float(acc[~genuine].mean())


def group_rates(pairs: PairSet, tau: float) -> dict[int, GroupRates]:
    out = {}
    for g, c in pairs.counts().items():
        if c["genuine"] == 0 or c["impostor"] == 0:
            out[g] = GroupRates(g, False, n_genuine=c["genuine"], n_impostor=c["impostor"])
            continue
        m = pairs.group == g
        tpr, fpr = _rates(pairs.scores[m], pairs.genuine[m], tau)
        out[g] = GroupRates(g, True, tpr, fpr, tpr, c["genuine"], c["impostor"])
    return out


def pooled_rates(pairs: PairSet, tau: float) -> GroupRates:
    tpr, fpr = _rates(pairs.scores, pairs.genuine, tau)
    return GroupRates(0, True, tpr, fpr, tpr, int(pairs.genuine.sum()), int((~pairs.genuine).sum()))


def _spread(values) -> float:
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise ValueError("need rates for at least two groups")
    return max(vals) - min(vals)


def tpr_gap(group_tprs) -> float:
    """Largest minus smallest group TPR (in whatever units the inputs use)."""
    return _spread(group_tprs.values() if isinstance(group_tprs, dict) else group_tprs)


def dpd(group_accept_rates) -> float:
    """Largest difference in accept rate over ordered group pairs, i.e. max - min."""
    return _spread(group_accept_rates.values() if isinstance(group_accept_rates, dict)
                   else group_accept_rates)


def eo_gap(rates: dict[int, GroupRates], pooled: GroupRates) -> float:
    """Largest deviation of any group's TPR or FPR from the pooled rates."""
    worst = 0.0
    skipped = [g for g, r in rates.items() if not r.evaluated]
    if skipped:
        warnings.warn(f"groups {skipped} lack genuine or impostor pairs and are excluded",
                      RuntimeWarning, stacklevel=2)
    for r in rates.values():
        if r.evaluated:
            worst = max(worst, abs(r.tpr - pooled.tpr), abs(r.fpr - pooled.fpr))
    return worst


@dataclass
class FairnessReport:
    label: str
    target_far: float
    tau: float
    groups: dict[int, GroupRates]
    tpr_gap: float
    dpd: float
    eo_gap: float
    tpr_at_far: dict[str, float] = field(default_factory=dict)
    eer: float = float("nan")

    def to_dict(self) -> dict:
        d = {"model": self.label, "target_far": self.target_far, "tau": self.tau,
             "tpr_gap": self.tpr_gap, "dpd": self.dpd, "eo_gap": self.eo_gap, "eer": self.eer,
             "groups": {str(g): {"evaluated": r.evaluated, "tpr": r.tpr, "fpr": r.fpr,
                                 "accept_rate": r.accept_rate, "n_genuine": r.n_genuine,
                                 "n_impostor": r.n_impostor}
                        for g, r in sorted(self.groups.items())}}
        for key, v in self.tpr_at_far.items():
            d[f"tpr_at_far_{key}"] = v
        return d


def far_key(far: float) -> str:
    """'1e-4' style label used in report field names."""
    exp = math.log10(far)
    return f"1e{int(round(exp))}" if abs(exp - round(exp)) < 1e-9 else f"{far:g}"


def fairness_report(pairs: PairSet, target_far: float, label: str = "",
                    report_fars=(1e-2, 1e-4)) -> FairnessReport:
    """Everything reported for one model at one common threshold."""
    op = global_threshold(pairs, target_far)
    rates = group_rates(pairs, op.tau)
    evaluated = {g: r for g, r in rates.items() if r.evaluated}
    curve = roc(pairs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtrapolationWarning)
        at = {far_key(f): tpr_at_far(curve, f) for f in report_fars}
    return FairnessReport(label, target_far, op.tau, rates,
                          tpr_gap({g: r.tpr for g, r in evaluated.items()}),
                          dpd({g: r.accept_rate for g, r in evaluated.items()}),
                          eo_gap(rates, pooled_rates(pairs, op.tau)), at, eer(curve))


def pareto_frontier(points) -> list[tuple[float, float]]:
    """Non-dominated (accuracy, disparity) points, higher accuracy and lower disparity preferred.

    Exact duplicates keep their first occurrence. Output is sorted by
    accuracy, ties broken by disparity.
    """
    pts = [(float(a), float(d)) for a, d in points]
    if not pts:
        raise ValueError("need at least one point")
    kept, seen = [], set()
    for k, (a, d) in enumerate(pts):
        if (a, d) in seen:
            continue
        dominated = any(a2 >= a and d2 <= d and (a2 > a or d2 < d) for a2, d2 in pts)
        if not dominated:
            kept.append((a, d))
            seen.add((a, d))
    return sorted(kept)
