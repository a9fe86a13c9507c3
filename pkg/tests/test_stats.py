import logging

import numpy as np
import pytest

from facefair.stats import (UndefinedStatisticError, bootstrap_ci, cohen_kappa, kappa_from_confusion,
                            pearson_r)


def _cov_r(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / (vx * vy) ** 0.5


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson_r(x, -x) == pytest.approx(-1.0)
    assert pearson_r([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(_cov_r([1, 2, 3, 4], [1, 3, 2, 4])) \
        == pytest.approx(0.8)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(0)
    x, y = rng.random(30), rng.random(30)
    r = pearson_r(x, y)
    assert pearson_r(3 * x + 2, y) == pytest.approx(r, abs=1e-12)
    assert pearson_r(x, 0.5 * y - 7) == pytest.approx(r, abs=1e-12)
    assert pearson_r(-2 * x, y) == pytest.approx(-r, abs=1e-12)


def test_pearson_rejects_degenerate_input():
    with pytest.raises(UndefinedStatisticError):
        pearson_r([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson_r([1], [2])
    with pytest.raises(ValueError):
        pearson_r([1, 2], [1, float("nan")])


def test_kappa_identical_raters():
    a = np.array([0, 1, 2, 1, 0, 2, 2])
    assert cohen_kappa(np.c_[a, a]) == 1.0


def test_kappa_permuted_rater_is_near_zero():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 3, 20_000)
    assert abs(cohen_kappa(np.c_[a, rng.permutation(a)])) < 0.05


def test_kappa_hand_table_against_counting():
    # 20 yes/yes, 5 yes/no, 10 no/yes, 15 no/no
    r1 = np.array([1] * 25 + [0] * 25)
    r2 = np.array([1] * 20 + [0] * 5 + [1] * 10 + [0] * 15)
    n = len(r1)
    p_o = sum(int(a == b) for a, b in zip(r1, r2)) / n
    p_e = sum((sum(r1 == lab) / n) * (sum(r2 == lab) / n) for lab in (0, 1))
    oracle = (p_o - p_e) / (1 - p_e)
    assert oracle == pytest.approx(0.4)
    assert cohen_kappa(np.c_[r1, r2]) == pytest.approx(oracle, abs=1e-12)
    assert kappa_from_confusion([[20, 5], [10, 15]]) == pytest.approx(oracle, abs=1e-12)


def test_kappa_constant_equal_raters_is_one_and_logged(caplog):
    with caplog.at_level(logging.INFO, logger="facefair.stats"):
        assert cohen_kappa(np.c_[[2, 2, 2], [2, 2, 2]]) == 1.0
    assert "chance agreement" in caplog.text


def test_kappa_relabelling_invariance():
    rng = np.random.default_rng(2)
    t = rng.integers(0, 4, (200, 2))
    relabel = np.array([3, 0, 2, 1])
    assert cohen_kappa(relabel[t]) == pytest.approx(cohen_kappa(t), abs=1e-12)


def test_kappa_three_raters_is_mean_pairwise():
    rng = np.random.default_rng(3)
    t = rng.integers(0, 2, (50, 3))
    pairs = [cohen_kappa(t[:, [i, j]]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert cohen_kappa(t) == pytest.approx(np.mean(pairs))


def test_bootstrap_constant_data():
    assert bootstrap_ci(np.full(20, 3.5), rng=np.random.default_rng(0)) == (3.5, 3.5)


def test_bootstrap_coverage():
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(1000)
        lo, hi = bootstrap_ci(x, np.mean, 2000, 0.05, rng, vectorized=True)
        hits += lo <= 0 <= hi
    assert hits >= 45


def test_bootstrap_is_deterministic_and_vectorised_path_agrees():
    x = np.random.default_rng(4).random(50)
    a = bootstrap_ci(x, rng=np.random.default_rng(9))
    b = bootstrap_ci(x, rng=np.random.default_rng(9))
    c = bootstrap_ci(x, rng=np.random.default_rng(9), vectorized=True)
    assert a == b
    assert c == pytest.approx(a, abs=1e-12)


def test_bootstrap_widens_as_alpha_shrinks():
    x = np.random.default_rng(5).standard_normal(200)
    widths = []
    for alpha in (0.2, 0.1, 0.05, 0.01):
        lo, hi = bootstrap_ci(x, alpha=alpha, rng=np.random.default_rng(1))
        widths.append(hi - lo)
    assert all(b >= a for a, b in zip(widths, widths[1:]))


def test_bootstrap_argument_checks():
    with pytest.raises(ValueError):
        bootstrap_ci([1, 2], n_boot=50, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        bootstrap_ci([1, 2], alpha=1.5, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        bootstrap_ci([1, 2])
