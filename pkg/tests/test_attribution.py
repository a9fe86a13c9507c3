from itertools import product

import numpy as np
import pytest

from facefair import attribution as attr
from facefair.attribution import ATTR_FACTORS, InterventionRun, RankDeficiencyError
from facefair.cohort import NEUTRAL, CohortSpec, RangeError, changed_factors, cohort_identities

TRUE = {"light": 0.42, "pose": 0.31, "expression": 0.27}


# ---------------------------------------------------------------- planning


def test_one_level_per_factor_gives_three_conditions():
    plan = attr.plan_interventions(NEUTRAL, {"light": [("left", 0.2)], "pose": [(30, 0)], "expression": [2]})
    assert [c.factor for c in plan] == list(ATTR_FACTORS)


def test_empty_factor_is_skipped():
    plan = attr.plan_interventions(NEUTRAL, {"light": [("left", 0.2)], "pose": [], "expression": [1, 2]})
    assert {c.factor for c in plan} == {"light", "expression"} and len(plan) == 3


def test_default_grid_enumeration():
    plan = attr.plan_interventions()
    lights = list(product(("front", "left", "right", "top"), (0.2, 0.8)))
    expected = len(lights) + 5 + 5
    assert len(plan) == expected == 18
    assert [c.level for c in plan if c.factor == "light"] == lights
    factor_fields = {"light": {"light_dir", "light_intensity"}, "pose": {"pose_yaw", "pose_pitch"},
                     "expression": {"expression"}}
    for c in plan:
        assert set(changed_factors(NEUTRAL, c.attrs)) <= factor_fields[c.factor]
    assert len({c.label for c in plan}) == len(plan)


def test_invalid_levels_raise_range_errors():
    with pytest.raises(RangeError):
        attr.plan_interventions(NEUTRAL, {"light": [("left", 0.95)]})
    with pytest.raises(RangeError):
        attr.plan_interventions(NEUTRAL, {"pose": [(45, 0)]})
    with pytest.raises(RangeError):
        attr.plan_interventions(NEUTRAL, {"hair": [1]})


def test_perturbation_magnitudes_within_unit_interval():
    for c in attr.plan_interventions():
        assert 0.0 <= attr.perturbation_magnitude(c.factor, NEUTRAL, c.attrs) <= 1.0
    assert attr.perturbation_magnitude("pose", NEUTRAL, NEUTRAL) == 0.0


# ---------------------------------------------------------------- decomposition


def _additive_runs(coef, rng, n_per_factor=6, noise=0.0):
    runs = []
    for f in ATTR_FACTORS:
        for k in range(n_per_factor):
            d = float(rng.uniform(0.1, 1.0))
            delta = coef[f] * d + (noise * rng.standard_normal() if noise else 0.0)
            runs.append(InterventionRun(f, f"{f}:{k}", d, 0.1 + delta, delta))
    return runs


def test_exact_recovery_of_reference_coefficients():
    aw = attr.decompose(_additive_runs(TRUE, np.random.default_rng(0)))
    for f in ATTR_FACTORS:
        assert abs(aw.shares[f] - TRUE[f]) < 1e-9
        assert abs(aw.weights[f] - TRUE[f]) < 1e-9
    assert aw.residual < 1e-12 and aw.clamped == []
    assert aw.r_squared == pytest.approx(1.0)
    assert sum(aw.shares.values()) == pytest.approx(1.0, abs=1e-9)


def test_exact_recovery_any_positive_triple():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c = dict(zip(ATTR_FACTORS, rng.uniform(0.01, 3, 3)))
        aw = attr.decompose(_additive_runs(c, rng))
        total = sum(c.values())
        for f in ATTR_FACTORS:
            assert abs(aw.shares[f] - c[f] / total) < 1e-9


def test_light_only_design_is_rank_deficient():
    runs = [InterventionRun("light", f"l{k}", 0.5 + 0.1 * k, 0.2, 0.1 * k) for k in range(4)]
    runs += [InterventionRun("pose", "p0", 0.0, 0.1, 0.0), InterventionRun("expression", "e0", 0.0, 0.1, 0.0)]
    with pytest.raises(RankDeficiencyError, match="pose, expression"):
        attr.decompose(runs)


def _grid_oracle(runs):
    """Least squares by exhaustive search over coefficients on a 0.001 grid.

    Each run loads on a single factor, so the squared error is a sum of one
    independent term per factor and the three-dimensional search is exactly
    three one-dimensional searches.
    """
    grid = np.round(np.arange(-1000, 2001) * 0.001, 3)
    coef = {}
    for f in ATTR_FACTORS:
        d = np.array([r.delta_factor for r in runs if r.factor == f])
        y = np.array([r.delta for r in runs if r.factor == f])
        sse = ((y[None, :] - grid[:, None] * d[None, :]) ** 2).sum(axis=1)
        coef[f] = grid[int(np.argmin(sse))]
    w = {f: max(c, 0.0) for f, c in coef.items()}
    return {f: w[f] / sum(w.values()) for f in ATTR_FACTORS}


def test_noisy_system_matches_grid_search_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        runs = _additive_runs(TRUE, rng, n_per_factor=10, noise=0.005)
        aw = attr.decompose(runs)
        oracle = _grid_oracle(runs)
        for f in ATTR_FACTORS:
            assert abs(aw.shares[f] - oracle[f]) < 0.01


def test_negative_coefficient_is_clamped_and_reported():
    runs = _additive_runs({"light": 0.5, "pose": -0.2, "expression": 0.5}, np.random.default_rng(3))
    aw = attr.decompose(runs)
    assert aw.clamped == ["pose"] and aw.weights["pose"] == 0.0
    assert aw.shares["light"] == pytest.approx(0.5)


def test_shares_are_scale_and_order_invariant():
    rng = np.random.default_rng(4)
    runs = _additive_runs(TRUE, rng, noise=0.01)
    ref = attr.decompose(runs).shares
    scaled = [InterventionRun(r.factor, r.level, r.delta_factor, 3 * r.measured_disparity, 3 * r.delta)
              for r in runs]
    for f in ATTR_FACTORS:
        assert attr.decompose(scaled).shares[f] == pytest.approx(ref[f], abs=1e-12)
    for _ in range(5):
        shuffled = [runs[i] for i in rng.permutation(len(runs))]
        for f in ATTR_FACTORS:
            assert attr.decompose(shuffled).shares[f] == pytest.approx(ref[f], abs=1e-12)


def test_unevaluable_runs_excluded_with_warning():
    runs = _additive_runs(TRUE, np.random.default_rng(5))
    runs.append(InterventionRun("light", "bad", 1.0, float("nan"), float("nan"), False))
    with pytest.warns(RuntimeWarning, match="unevaluable"):
        aw = attr.decompose(runs)
    assert aw.shares["light"] == pytest.approx(0.42, abs=1e-9)


def test_runs_and_weights_csv_round_trip(tmp_path):
    runs = _additive_runs(TRUE, np.random.default_rng(6), noise=0.01)
    attr.write_runs(tmp_path / "r.csv", runs)
    assert attr.read_runs(tmp_path / "r.csv") == runs
    attr.write_weights(tmp_path / "w.csv", attr.decompose(runs))
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "factor,weight,share,variance_share"


# ---------------------------------------------------------------- measurement with a planted simulator


def _identities(per_group=30, seed=0):
    return cohort_identities(CohortSpec(identities_per_group=per_group, variants_per_identity=1,
                                        intervention_plan=(), seed=seed))


def test_condition_identical_to_base_has_zero_delta():
    model = attr.PlantedSensitivityEncoder(seed=1)
    plan = attr.plan_interventions(NEUTRAL, {"light": [("front", 0.5), ("left", 0.2)],
                                             "pose": [(0.0, 0.0)], "expression": [0]})
    meas = attr.measure_disparity_deltas(model, _identities(), plan, replicates=4, seed=1)
    for r in meas.runs:
        if r.delta_factor == 0.0:
            assert r.delta == 0.0


def test_light_only_simulator_moves_only_light_runs():
    model = attr.PlantedSensitivityEncoder({"light": 1.0, "pose": 0.0, "expression": 0.0}, seed=2)
    meas = attr.measure_disparity_deltas(model, _identities(), attr.plan_interventions(), replicates=6,
                                         seed=2)
    light = [abs(r.delta) for r in meas.runs if r.factor == "light"]
    other = [abs(r.delta) for r in meas.runs if r.factor != "light"]
    assert max(other) == 0.0
    assert max(light) > 0.05
    aw = attr.decompose(meas.runs)
    assert aw.shares["light"] == pytest.approx(1.0)


def test_measurement_is_bit_reproducible():
    model = attr.PlantedSensitivityEncoder(seed=3)
    plan = attr.plan_interventions()
    a = attr.measure_disparity_deltas(model, _identities(seed=3), plan, replicates=3, seed=3)
    b = attr.measure_disparity_deltas(model, _identities(seed=3), plan, replicates=3, seed=3)
    assert a.runs == b.runs and a.tau == b.tau


def test_planted_simulator_validates_its_settings():
    with pytest.raises(ValueError):
        attr.PlantedSensitivityEncoder({"hair": 1.0})
    with pytest.raises(ValueError):
        attr.PlantedSensitivityEncoder(sigma0=-1)
