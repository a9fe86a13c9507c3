from itertools import combinations
from math import comb

import numpy as np
import pytest
from scipy import stats as sps

from facefair import balancing as bal


def table_1d(groups_values):
    rows, groups = [], []
    for d, values in enumerate(groups_values, start=1):
        rows += list(values)
        groups += [d] * len(values)
    return bal.FeatureTable(np.array(rows, dtype=float), np.array(groups))


def composition_imbalanced(seed=0):
    """Five groups mixing the same three clusters in different proportions."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    props = [(0.7, 0.2, 0.1), (0.1, 0.7, 0.2), (0.2, 0.1, 0.7), (0.4, 0.4, 0.2), (0.34, 0.33, 0.33)]
    rows, groups = [], []
    for d, p in enumerate(props, start=1):
        for k, c in enumerate(np.round(np.array(p) * 60).astype(int)):
            rows.append(centers[k] + 0.3 * rng.standard_normal((c, 2)))
            groups += [d] * c
    return bal.FeatureTable(np.concatenate(rows), np.array(groups))


# ---------------------------------------------------------------- loss


def test_point_mass_groups_pay_only_the_hinge():
    t = table_1d([[0.3, 0.3]] * 5)
    assert bal.balance_loss(t, t.uniform_weights()) == pytest.approx(5 * 0.1 ** 2, abs=1e-15)


def test_two_shifted_groups_hand_value():
    # groups 1 and 2 have means 0 and 1; the rest sit at the pooled mean 0.5; all sigma = 0.5
    t = table_1d([[-0.5, 0.5], [0.5, 1.5], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
    assert bal.balance_loss(t, t.uniform_weights()) == pytest.approx(0.25 + 0.25, abs=1e-15)


def test_balanced_groups_with_sigma_at_delta_have_zero_loss():
    t = table_1d([[0.9, 1.1]] * 5)
    assert bal.balance_loss(t, t.uniform_weights()) < 1e-20


def test_loss_invariances():
    t = composition_imbalanced(1)
    rng = np.random.default_rng(0)
    w = rng.uniform(0.1, 2.0, t.n)
    base = bal.balance_loss(t, w)
    perm = np.arange(t.n)
    for d in range(1, 6):
        idx = t.group_index(d)
        perm[idx] = rng.permutation(idx)
    shuffled = bal.FeatureTable(t.rows[perm], t.groups[perm])
    assert bal.balance_loss(shuffled, w[perm]) == pytest.approx(base, rel=1e-12)
    scaled = w.copy()
    scaled[t.group_index(3)] *= 7.5
    assert bal.balance_loss(t, scaled) == pytest.approx(base, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    t = bal.FeatureTable(rng.standard_normal((20, 3)) * 0.05, np.repeat(np.arange(1, 6), 4))
    w = rng.uniform(0.5, 1.5, t.n)
    _, g = bal.balance_loss_grad(t, w, delta=0.1)
    h = 1e-6
    for i in range(t.n):
        e = np.zeros(t.n)
        e[i] = h
        num = (bal.balance_loss(t, w + e) - bal.balance_loss(t, w - e)) / (2 * h)
        assert abs(num - g[i]) <= 1e-6 * max(1.0, abs(num))


# ---------------------------------------------------------------- optimiser


def test_already_balanced_table_keeps_uniform_weights():
    t = table_1d([[0.0, 1.0]] * 5)
    r = bal.optimize_weights(t)
    assert np.array_equal(r.weights, np.ones(t.n))
    assert r.loss_history == [0.0]


def test_small_instance_against_grid_search_oracle():
    t = table_1d([[0, 2, 2], [0, 0, 2], [0.5, 1.5], [0.5, 1.5], [0.5, 1.5]])
    initial = bal.balance_loss(t, t.uniform_weights())
    # Oracle: exhaustive grid over the share of weight on the value 0 in groups 1 and 2.
    grid = np.linspace(0.0, 1.0, 1001)
    best = np.inf
    for a in grid[1:-1:5]:
        for b in grid[1:-1:5]:
            w = np.array([3 * a, 1.5 * (1 - a), 1.5 * (1 - a), 1.5 * b, 1.5 * b, 3 * (1 - b)] + [1.0] * 6)
            best = min(best, bal.balance_loss(t, w))
    r = bal.optimize_weights(t)
    assert r.loss_history[-1] < 0.1 * initial
    assert r.loss_history[-1] <= best + 1e-6


def test_loss_history_nonincreasing_and_respects_max_iters():
    t = composition_imbalanced(2)
    r = bal.optimize_weights(t, bal.BalanceConfig(max_iters=5))
    assert r.iterations <= 5
    assert all(b <= a for a, b in zip(r.loss_history, r.loss_history[1:]))
    assert np.all(r.weights >= 0)


def test_non_finite_loss_reports_iteration():
    t = table_1d([[1e200, -1e200], [0, 1], [0, 1], [0, 1], [0, 1]])
    with np.errstate(all="ignore"), pytest.raises(bal.NumericalError, match="iteration 1"):
        bal.optimize_weights(t)


def test_table_validation():
    with pytest.raises(bal.BalanceError, match="groups \\[5\\]"):
        table_1d([[0, 1], [0, 1], [0, 1], [0, 1], [0]])
    with pytest.raises(bal.BalanceError):
        bal.FeatureTable(np.zeros(10), np.r_[np.repeat(np.arange(1, 6), 2)[:-1], 6])


# ---------------------------------------------------------------- resampling


def test_uniform_weights_one_per_group():
    groups = np.repeat(np.arange(1, 6), 3)
    out = bal.resample(list(range(15)), groups, np.ones(15), 5, np.random.default_rng(0))
    assert sorted(groups[out].tolist()) == [1, 2, 3, 4, 5]


def test_quota_remainder_goes_to_lowest_groups():
    assert bal.group_quotas(12) == [3, 3, 2, 2, 2]
    with pytest.raises(bal.BalanceError):
        bal.group_quotas(4)


def test_zero_weight_never_drawn_and_ratio_matches_weights():
    groups = np.repeat(np.arange(1, 6), 3)
    w = np.tile([0.0, 1.0, 3.0], 5)
    out = np.array(bal.resample(list(range(15)), groups, w, 50_000, np.random.default_rng(1)))
    picks = out[groups[out] == 1]
    assert not np.any(picks == 0)
    ratio = np.sum(picks == 2) / np.sum(picks == 1)
    assert abs(ratio / 3.0 - 1.0) < 0.05


def test_resample_rejects_groups_without_weight():
    groups = np.repeat(np.arange(1, 6), 2)
    w = np.ones(10)
    w[groups == 4] = 0
    with pytest.raises(bal.BalanceError, match="group 4"):
        bal.resample(list(range(10)), groups, w, 10, np.random.default_rng(0))


# ---------------------------------------------------------------- KS test


def permutation_oracle(a, b):
    """Exhaustive relabelling p-value P(D >= D_obs) using exact integer numerators."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = a.size, b.size
    pooled = np.concatenate([a, b])
    values = np.unique(pooled)

    def numer(mask):
        x, y = pooled[mask], pooled[~mask]
        ca = np.searchsorted(np.sort(x), values, side="right")
        cb = np.searchsorted(np.sort(y), values, side="right")
        return int(np.max(np.abs(ca * nb - cb * na)))

    obs = numer(np.r_[np.ones(na, bool), np.zeros(nb, bool)])
    hits = 0
    for idx in combinations(range(na + nb), na):
        m = np.zeros(na + nb, bool)
        m[list(idx)] = True
        hits += numer(m) >= obs
    return obs / (na * nb), hits / comb(na + nb, na)


def brute_force_D(a, b):
    pts = np.concatenate([a, b])
    return max(abs(np.mean(np.asarray(a) <= x) - np.mean(np.asarray(b) <= x)) for x in pts)


def test_ks_trivial_cases():
    assert bal.ks_two_sample([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    assert bal.ks_two_sample([0, 0], [1, 1])[0] == 1.0
    with pytest.raises(bal.BalanceError):
        bal.ks_two_sample([], [1.0])


def test_ks_hand_case_and_series_cross_check():
    a, b = [1, 2, 3], [1.5, 2.5, 3.5]
    D, p = bal.ks_two_sample(a, b)
    assert D == pytest.approx(brute_force_D(a, b)) == pytest.approx(1 / 3)
    assert (D, p) == pytest.approx(permutation_oracle(a, b))
    x = np.sqrt(9 / 6) * D
    from scipy.special import kolmogorov
    assert bal.kolmogorov_series(x, terms=100) == pytest.approx(float(kolmogorov(x)), abs=1e-12)


def test_ks_matches_exhaustive_permutation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(60):
        na, nb = rng.integers(1, 9, size=2)
        ties = rng.random() < 0.5
        draw = (lambda n: rng.integers(0, 4, n).astype(float)) if ties else (lambda n: rng.standard_normal(n))
        a, b = draw(na), draw(nb)
        D, p = bal.ks_two_sample(a, b)
        oD, op = permutation_oracle(a, b)
        assert D == pytest.approx(oD, abs=1e-15)
        assert p == pytest.approx(op, abs=1e-12)


def test_ks_up_to_twenty_matches_monte_carlo_and_scipy():
    rng = np.random.default_rng(1)
    for na, nb in [(20, 20), (20, 13), (17, 20), (12, 19)]:
        a, b = rng.standard_normal(na), rng.standard_normal(nb) + 0.4
        D, p = bal.ks_two_sample(a, b)
        ref = sps.ks_2samp(a, b, method="exact")
        assert D == pytest.approx(ref.statistic, abs=1e-15)
        assert p == pytest.approx(ref.pvalue, abs=1e-9)
        pooled = np.concatenate([a, b])
        grid = np.sort(pooled)
        n_perm = 20_000
        labels = np.argsort(rng.random((n_perm, na + nb)), axis=1) < na  # random relabellings
        order = np.argsort(pooled)
        ca = np.cumsum(labels[:, order], axis=1) / na
        cb = np.cumsum(~labels[:, order], axis=1) / nb
        assert np.unique(grid).size == grid.size  # continuous draws: every prefix is an ECDF point
        p_mc = np.mean(np.max(np.abs(ca - cb), axis=1) >= D - 1e-12)
        assert abs(p - p_mc) <= 4 * np.sqrt(p * (1 - p) / n_perm) + 1e-3


def test_ks_symmetry_and_monotone_invariance():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal(30), rng.standard_normal(25) + 0.3
    assert bal.ks_two_sample(a, b) == bal.ks_two_sample(b, a)
    Da, pa = bal.ks_two_sample(a, b)
    Db, pb = bal.ks_two_sample(np.exp(a), np.exp(b))
    assert Da == Db and pa == pb


def test_large_samples_use_asymptotic_distribution():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(300), rng.standard_normal(200)
    D, p = bal.ks_two_sample(a, b)
    ref = sps.ks_2samp(a, b, method="asymp")
    assert D == pytest.approx(ref.statistic)
    assert p == pytest.approx(float(sps.kstwobign.sf(np.sqrt(300 * 200 / 500) * D)), rel=1e-9)


# ---------------------------------------------------------------- acceptance cohort and I/O


def test_composition_cohort_balances_by_ninety_percent():
    t = composition_imbalanced(0)
    r = bal.optimize_weights(t)
    before = bal.max_mean_deviation(t, t.uniform_weights())
    after = bal.max_mean_deviation(t, r.weights)
    assert after <= 0.1 * before


def test_alignment_check_reports_minimum_p():
    t = composition_imbalanced(0)
    rep = bal.alignment_check(t, 0.85)
    assert rep.min_p == min(r["p"] for r in rep.per_feature)
    assert len(rep.per_feature) == 2 * 5
    assert not rep.aligned


def test_csv_round_trips(tmp_path):
    t = composition_imbalanced(0)
    bal.write_feature_table(tmp_path / "f.csv", t)
    back = bal.read_feature_table(tmp_path / "f.csv")
    assert np.array_equal(back.rows, t.rows) and np.array_equal(back.groups, t.groups)
    w = np.random.default_rng(0).random(t.n)
    bal.write_weights(tmp_path / "w.csv", w)
    assert np.array_equal(bal.read_weights(tmp_path / "w.csv"), w)


def test_feature_csv_errors_name_the_line(tmp_path):
    (tmp_path / "bad.csv").write_text("x,group\n1.0,1\nabc,2\n")
    with pytest.raises(bal.BalanceError, match=":3:"):
        bal.read_feature_table(tmp_path / "bad.csv")
