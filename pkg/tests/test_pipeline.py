import csv
import json
import shutil

import pytest

from facefair import cli, pipeline
from facefair.cohort import CohortSpec, ConfigurationError
from facefair.pipeline import RunConfig

TINY = {
    "seed": 3,
    "cohort": {"identities_per_group": 3, "variants_per_identity": 4},
    "render": {"noise_sigma": 0.03, "noise_albedo_gain": 3.0},
    "train": {"epochs": 2, "batch_size": 16, "lr": 0.005},
    "balance": {"target_n": 20},
    "attribution": {"identities_per_group": 12, "replicates": 2},
    "threshold_far": 0.1,
}


def _write_cfg(path, out, **extra):
    d = json.loads(json.dumps(TINY))
    d.update(extra)
    d["output_dir"] = str(out)
    path.write_text(json.dumps(d))
    return path


def _full_run(tmp, name):
    out = tmp / name
    cfg = _write_cfg(tmp / f"{name}.json", out)
    for command in ("generate", "balance", "train", "audit", "report"):
        assert cli.run([command, "--config", str(cfg)]) == 0, command
    return out


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("runs")
    return _full_run(tmp, "a"), _full_run(tmp, "b")


# ---------------------------------------------------------------- configuration


def test_default_config_sizes():
    cfg = RunConfig(seed=0)
    assert cfg.cohort_spec().total == 1000
    assert CohortSpec(identities_per_group=200, variants_per_identity=10).total == 10_000


def test_seed_is_required_and_validated():
    with pytest.raises(ConfigurationError, match="seed"):
        RunConfig.from_dict({})
    with pytest.raises(ConfigurationError, match="seed"):
        RunConfig.from_dict({"seed": -1})
    with pytest.raises(ConfigurationError, match="seed"):
        RunConfig.from_dict({"seed": True})


def test_unknown_keys_and_nested_seeds_rejected():
    with pytest.raises(ConfigurationError, match="unknown"):
        RunConfig.from_dict({"seed": 1, "sead": 2})
    with pytest.raises(ConfigurationError, match="cohort"):
        RunConfig.from_dict({"seed": 1, "cohort": {"seed": 4}})
    with pytest.raises(ConfigurationError, match="train"):
        RunConfig.from_dict({"seed": 1, "train": {"seed": 4}})
    with pytest.raises(ConfigurationError, match="schema_version"):
        RunConfig.from_dict({"seed": 1, "schema_version": 2})


def test_out_of_range_intensity_names_field_and_bound():
    with pytest.raises(ConfigurationError, match=r"light_intensity.*0\.9.*\[0\.2, 0\.8\]"):
        RunConfig.from_dict({"seed": 1, "cohort": {"base": {"light_intensity": 0.9}}})


def test_config_round_trip_and_hash(tmp_path):
    cfg = RunConfig.from_dict(dict(TINY, output_dir="x"))
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.sha256() == cfg.sha256()
    moved = RunConfig.from_dict(dict(TINY, output_dir="elsewhere"))
    assert moved.sha256() == cfg.sha256()
    assert RunConfig.from_dict(dict(TINY, seed=4)).sha256() != cfg.sha256()


def test_attribution_model_must_exist():
    with pytest.raises(ConfigurationError, match="attribution.model"):
        RunConfig.from_dict({"seed": 1, "models": [{"variant": "cosface"}],
                             "attribution": {"model": "arcface"}})


# ---------------------------------------------------------------- CLI exit codes


def test_cli_corrupt_config_exits_one(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "cohort": {"base": {"light_intensity": 0.9}}}))
    assert cli.run(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "light_intensity" in err and "[0.2, 0.8]" in err
    (tmp_path / "junk.json").write_text("{not json")
    assert cli.run(["generate", "--config", str(tmp_path / "junk.json")]) == 1


def test_cli_missing_artifacts_exit_one(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", tmp_path / "empty")
    assert cli.run(["train", "--config", str(cfg)]) == 1
    assert cli.run(["report", "--config", str(cfg)]) == 1
    assert cli.run(["generate", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert cli.run(["audit", "--config", str(cfg)]) == 1
    assert "arcface, cosface, adaface" in capsys.readouterr().err


def test_cli_locked_output_exits_two(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", tmp_path / "locked")
    with pipeline.output_lock(tmp_path / "locked"):
        assert cli.run(["generate", "--config", str(cfg)]) == 2
    assert "locked" in capsys.readouterr().err


def test_cli_seed_override_and_transfer_arguments(tmp_path):
    out = tmp_path / "s"
    assert cli.run(["generate", "--seed", "5", "--out", str(out),
                    "--config", str(_write_cfg(tmp_path / "c.json", out))]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 5
    assert cli.run(["transfer", str(out)]) == 1
    assert cli.run(["generate", "extra", "--config", str(tmp_path / "c.json")]) == 1


# ---------------------------------------------------------------- full runs


def test_full_run_writes_expected_artifacts(two_runs):
    out = two_runs[0]
    for rel in ("config.json", "cohort/manifest.json", "eval_cohort/manifest.json", "balance/weights.csv",
                "models/arcface.params", "models/adaface_loss.csv", "audit/pairs_cosface.csv",
                "audit/attribution.csv", "bundle.json", "table1.csv", "table2.csv", "pareto.svg",
                "bias_distribution.svg", "report/report.md"):
        assert (out / rel).exists(), rel
    bundle = json.loads((out / "bundle.json").read_text())
    assert set(bundle["reports"]) == {"arcface", "cosface", "adaface"}
    assert 1 <= len(bundle["pareto"]) <= 3
    rep = bundle["reports"]["arcface"]
    for key in ("tpr_gap", "dpd", "eo_gap", "tpr_at_far_1e-2", "tpr_at_far_1e-4"):
        assert key in rep
    shares = bundle["attribution"]["shares"]
    assert sum(shares.values()) == pytest.approx(1.0)
    assert bundle["provenance"]["config_sha256"] == RunConfig.load(out / "config.json").sha256()


def test_repeated_runs_give_identical_bundles(two_runs):
    a, b = two_runs
    for rel in ("bundle.json", "table1.csv", "table2.csv", "attribution.csv", "report/report.md"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_single_model_audit_has_trivial_pareto(two_runs, tmp_path):
    out = tmp_path / "one"
    shutil.copytree(two_runs[0], out, ignore=shutil.ignore_patterns(".facefair.lock"))
    cfg = RunConfig.from_dict(dict(TINY, models=[{"variant": "cosface"}], output_dir=str(out)))
    bundle = pipeline.cmd_audit(cfg)
    rep = bundle["reports"]["cosface"]
    assert bundle["pareto"] == [[rep["accuracy"], rep["tpr_gap"]]]


def test_transfer_against_itself(two_runs, tmp_path):
    a = two_runs[0]
    assert cli.run(["transfer", str(a), str(a / "bundle.json"), "--out", str(tmp_path / "t")]) == 0
    with open(tmp_path / "t" / "transfer.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["dataset", "gap_percent", "r"]
    assert float(rows[1]["r"]) == pytest.approx(1.0)
    report = json.loads((tmp_path / "t" / "transfer.json").read_text())["metrics"]
    assert report["group_tpr"]["mean_abs_gap"] == 0.0
    assert report["group_tpr"]["r_ci"][0] == pytest.approx(1.0)


def test_transfer_between_seeds_reports_interval(two_runs, tmp_path):
    other = tmp_path / "c"
    cfg = _write_cfg(tmp_path / "c.json", other, seed=11)
    for command in ("generate", "train", "audit"):
        assert cli.run([command, "--config", str(cfg)]) == 0
    result = pipeline.cmd_transfer(two_runs[0], other, tmp_path / "t", n_boot=200)
    entry = result["group_tpr"]
    assert entry["n"] == 15
    if entry["r"] is not None:
        lo, hi = entry["r_ci"]
        assert -1 <= lo <= hi <= 1


def test_report_mentions_both_threshold_conventions(two_runs):
    text = (two_runs[0] / "report" / "report.md").read_text()
    assert "table1.csv" in text and "table2.csv" in text
    assert "Attribution shares" in text
