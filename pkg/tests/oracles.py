"""Brute-force reference implementations shared by the metric tests and the acceptance run.

Each oracle re-derives its answer by enumerating every candidate threshold
directly, without reusing any sweep logic from the package.
"""

import numpy as np

from facefair.metrics import PairSet


def random_pairset(rng, max_n=200):
    """Random scores with occasional heavy ties; always has both pair kinds."""
    n = int(rng.integers(2, max_n + 1))
    gen = rng.random(n) < rng.uniform(0.2, 0.8)
    gen[0], gen[1] = True, False
    scores = rng.normal(0, 1, n) + gen * rng.uniform(0, 2)
    if rng.random() < 0.4:
        scores = np.round(scores, 1)
    return PairSet(scores, gen, rng.integers(1, 6, n))


def threshold_points(pairs):
    """(far, tpr) at +inf and at every distinct score, by direct counting."""
    gen = pairs.scores[pairs.genuine]
    imp = pairs.scores[~pairs.genuine]
    pts = [(0.0, 0.0)]
    for t in sorted(set(pairs.scores.tolist()), reverse=True):
        pts.append((sum(s >= t for s in imp) / len(imp), sum(s >= t for s in gen) / len(gen)))
    return pts


def tpr_bracket(pairs, target):
    """Best TPR with FAR <= target, and worst TPR with FAR > target."""
    pts = threshold_points(pairs)
    below = max(t for f, t in pts if f <= target)
    above = min((t for f, t in pts if f > target), default=1.0)
    return below, above


def eer_bracket(pairs):
    """FAR range of the first threshold step where FAR overtakes FNR."""
    pts = threshold_points(pairs)
    prev = pts[0]
    for f, t in pts:
        if f >= 1.0 - t:
            return min(prev[0], f), max(prev[0], f)
        prev = (f, t)
    raise AssertionError("FAR never reaches FNR")


def check_sweep_against_oracle(pairs, curve, tpr_at, eer_value, targets):
    """Return a list of human-readable mismatches (empty means agreement)."""
    problems = []
    got = sorted(zip(curve.far.tolist(), curve.tpr.tolist()))
    want = sorted(threshold_points(pairs))
    if len(got) != len(want) or not np.allclose(got, want, rtol=0, atol=1e-12):
        problems.append("roc points differ")
    for target in targets:
        lo, hi = tpr_bracket(pairs, target)
        v = tpr_at[target]
        if not lo - 1e-12 <= v <= hi + 1e-12:
            problems.append(f"tpr@{target}: {v} outside [{lo}, {hi}]")
    lo, hi = eer_bracket(pairs)
    if not lo - 1e-12 <= eer_value <= hi + 1e-12:
        problems.append(f"eer {eer_value} outside [{lo}, {hi}]")
    return problems
