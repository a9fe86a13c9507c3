"""Run configuration and the pipeline commands behind the ``facefair`` CLI.

Every command reads a :class:`RunConfig`, writes into the configured output
directory and holds a lock file there while it runs. All randomness derives
from the single top-level seed:

========================  ===============================================
stream                    seed
========================  ===============================================
training cohort           ``seed``
held-out audit cohort     ``seed + 1000`` (identity ids offset by 5000)
attribution identities    ``seed + 2000`` (identity ids offset by 20000)
training                  ``seed``
pair sampling             ``[seed, 0xA0D17]``
resampling                ``[seed, 0xBA1]``
diffusion edits           ``[seed, 0xD1F, identity, variant]``
========================  ===============================================
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
import shutil
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy
from filelock import FileLock, Timeout

from . import __version__
from . import attribution as attr
from . import balancing as bal
from . import diffusion as dif
from . import metrics as met
from . import stats
from . import svg
from .cohort import (AttributeVector, CohortSpec, ConfigurationError, RenderParams, cohort_identities,
                     default_registry, generate_cohort, load_cohort, save_cohort, stack_pixels)
from .recognizer import (MarginConfig, TrainConfig, embed_batch, load_params, save_params, train,
                         write_loss_log)

SCHEMA_VERSION = 1
EVAL_SEED_OFFSET, EVAL_ID_OFFSET = 1000, 5000
ATTR_SEED_OFFSET, ATTR_ID_OFFSET = 2000, 20000


class MissingArtifactError(ConfigurationError):
    """A command was run before the artifacts it consumes exist."""


class LockedError(RuntimeError):
    """Another command holds the output directory."""


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class DiffusionSettings:
    enabled: bool = False
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 250
    t_edit: int = 150
    guidance_w: float = 1.0
    variance: float = 0.01

    def __post_init__(self):
        sched = dif.linear_schedule(self.T, self.beta_start, self.beta_end)
        dif.subsample_schedule(sched, self.steps)
        if not 0 <= self.t_edit <= self.steps:
            raise ValueError(f"t_edit: value {self.t_edit} outside [0, {self.steps}]")
        dif.GuidanceConfig(self.guidance_w)
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")

    def schedule(self) -> dif.NoiseSchedule:
        return dif.subsample_schedule(dif.linear_schedule(self.T, self.beta_start, self.beta_end),
                                      self.steps)


@dataclass(frozen=True)
class BalanceSettings:
    delta: float = 0.1
    learning_rate: float = 1.0
    max_iters: int = 500
    tolerance: float = 1e-10
    target_n: int | None = None
    alignment_threshold: float = 0.85
    features_csv: str | None = None

    def __post_init__(self):
        self.config()
        if self.target_n is not None:
            bal.group_quotas(self.target_n)

    def config(self) -> bal.BalanceConfig:
        return bal.BalanceConfig(self.delta, self.learning_rate, self.max_iters, self.tolerance)


@dataclass(frozen=True)
class AttributionSettings:
    model: str = "planted"
    identities_per_group: int = 400
    replicates: int = 40
    impostors_per_probe: int = 10
    target_far: float = 1e-2
    grid: dict | None = None
    sensitivities: dict = field(default_factory=lambda: {"light": 0.42, "pose": 0.31,
                                                         "expression": 0.27})
    sigma0: float = 0.7
    gain: float = 4.0

    def __post_init__(self):
        if self.identities_per_group < 2 or self.replicates < 1 or self.impostors_per_probe < 1:
            raise ValueError("identities_per_group >= 2, replicates >= 1 and impostors_per_probe >= 1")
        if not 0 < self.target_far < 1:
            raise ValueError(f"target_far: value {self.target_far} outside (0, 1)")
        self.plan()
        attr.PlantedSensitivityEncoder(dict(self.sensitivities), self.sigma0, self.gain)

    def plan(self, base: AttributeVector = AttributeVector()) -> list[attr.Condition]:
        grid = None if self.grid is None else {k: [tuple(v) if isinstance(v, list) else v for v in lv]
                                               for k, lv in self.grid.items()}
        return attr.plan_interventions(base, grid)


def _default_models():
    return [MarginConfig(v) for v in ("arcface", "cosface", "adaface")]


@dataclass(frozen=True)
class RunConfig:
    seed: int
    label: str = "desk"
    cohort: CohortSpec = CohortSpec()
    eval_identities_per_group: int | None = None
    render: RenderParams = RenderParams()
    diffusion: DiffusionSettings = DiffusionSettings()
    balance: BalanceSettings = BalanceSettings()
    models: tuple = field(default_factory=lambda: tuple(_default_models()))
    train: TrainConfig = TrainConfig()
    operating_points: tuple = (1e-2, 1e-4)
    threshold_far: float = 1e-2
    impostor_ratio: float = 1.0
    attribution: AttributionSettings = AttributionSettings()
    bootstrap_n: int = 1000
    bootstrap_alpha: float = 0.05
    output_dir: str = "out"

    def __post_init__(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"seed: must be an integer in [0, 2^64), got {self.seed!r}")
        names = [m.variant for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"models: duplicate variants {names}")
        for far in self.operating_points:
            if not 0 < far < 1:
                raise ConfigurationError(f"operating_points: value {far} outside (0, 1)")
        if not 0 < self.threshold_far < 1:
            raise ConfigurationError(f"threshold_far: value {self.threshold_far} outside (0, 1)")
        if self.impostor_ratio <= 0:
            raise ConfigurationError("impostor_ratio: must be positive")
        if self.bootstrap_n < 100 or not 0 < self.bootstrap_alpha < 1:
            raise ConfigurationError("bootstrap_n must be >= 100 and bootstrap_alpha in (0, 1)")
        if self.attribution.model not in ("planted", *names):
            raise ConfigurationError(f"attribution.model: {self.attribution.model!r} is neither "
                                     f"'planted' nor a configured model {names}")
        if self.diffusion.enabled:
            model = dif.attribute_condition_model(self.diffusion.variance)
            for factor, value in self.cohort.intervention_plan:
                if (factor, value) not in model.means:
                    raise ConfigurationError(f"cohort.intervention_plan: ({factor}, {value}) has no "
                                             f"diffusion condition")

    # ---- derived settings
    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def cohort_spec(self) -> CohortSpec:
        return replace(self.cohort, seed=self.seed)

    def eval_spec(self) -> CohortSpec:
        n = self.eval_identities_per_group or self.cohort.identities_per_group
        return replace(self.cohort, seed=self.seed + EVAL_SEED_OFFSET, identities_per_group=n)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    # ---- serialization
    def to_dict(self, *, include_output: bool = True) -> dict:
        spec = self.cohort.to_dict()
        spec.pop("seed")
        trn = asdict(self.train)
        trn.pop("seed")
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "label": self.label,
            "cohort": spec,
            "eval_identities_per_group": self.eval_identities_per_group,
            "render": asdict(self.render),
            "diffusion": asdict(self.diffusion),
            "balance": asdict(self.balance),
            "models": [m.to_dict() for m in self.models],
            "train": trn,
            "operating_points": list(self.operating_points),
            "threshold_far": self.threshold_far,
            "impostor_ratio": self.impostor_ratio,
            "attribution": asdict(self.attribution),
            "bootstrap_n": self.bootstrap_n,
            "bootstrap_alpha": self.bootstrap_alpha,
        }
        d["render"]["head_axes"] = list(self.render.head_axes)
        if include_output:
            d["output_dir"] = self.output_dir
        return d

    def canonical_json(self) -> str:
        """The experiment definition without the output location, in canonical form."""
        return json.dumps(self.to_dict(include_output=False), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
        if "seed" not in d:
            raise ConfigurationError("seed: required (no implicit entropy)")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        kw = {"seed": d.pop("seed")}

        def section(name, build):
            if name not in d:
                return
            try:
                kw[name] = build(d.pop(name))
            except ConfigurationError as exc:
                raise ConfigurationError(f"{name}: {exc}") from None
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigurationError(f"{name}: {exc}") from None

        def cohort(v):
            if "seed" in v:
                raise ConfigurationError("seed: set the top-level seed instead")
            return CohortSpec.from_dict(v)

        def render(v):
            v = dict(v)
            if "head_axes" in v:
                v["head_axes"] = tuple(v["head_axes"])
            return RenderParams(**v)

        def models(v):
            out = []
            for m in v:
                m = dict(m)
                out.append(MarginConfig(**m))
            return tuple(out)

        def train_cfg(v):
            if "seed" in v:
                raise ConfigurationError("seed: set the top-level seed instead")
            return TrainConfig(**v)

        section("cohort", cohort)
        section("render", render)
        section("diffusion", lambda v: DiffusionSettings(**v))
        section("balance", lambda v: BalanceSettings(**v))
        section("models", models)
        section("train", train_cfg)
        section("attribution", lambda v: AttributionSettings(**v))
        section("operating_points", tuple)
        for key in list(d):
            kw[key] = d.pop(key)
        try:
            return cls(**kw)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Helpers


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".facefair.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockedError(f"{out} is locked by another facefair command") from None
    try:
        yield
    finally:
        lock.release()


def _clean(v):
    """JSON-safe copy: NaN becomes null, numpy scalars become Python numbers."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if (isinstance(x, float) and math.isnan(x)) else
                        (repr(x) if isinstance(x, float) else x) for x in row])


def provenance(cfg: RunConfig) -> dict:
    return {
        "config_sha256": cfg.sha256(),
        "config": json.loads(cfg.canonical_json()),
        "versions": {"facefair": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "seeds": {"run": cfg.seed, "cohort": cfg.seed, "eval_cohort": cfg.seed + EVAL_SEED_OFFSET,
                  "attribution": cfg.seed + ATTR_SEED_OFFSET, "train": cfg.seed,
                  "pairs": [cfg.seed, 0xA0D17]},
    }


def _require_dir(path: Path, producer: str) -> None:
    if not (path / "manifest.json").exists():
        raise MissingArtifactError(f"{path} not found; run '{producer}' first")


# --------------------------------------------------------------------------
# generate


def diffusion_editor(cfg: RunConfig):
    """Attribute editor that routes each planned intervention through a masked diffusion edit."""
    sched = cfg.diffusion.schedule()
    model = dif.attribute_condition_model(cfg.diffusion.variance)
    guidance = dif.GuidanceConfig(cfg.diffusion.guidance_w)
    spec = cfg.cohort_spec()

    def edit(identity, variant, target):
        if not spec.intervention_plan:
            return target
        factor, level = spec.intervention_plan[variant % len(spec.intervention_plan)]
        state = dif.face_state(identity.latent, spec.base, free_factor=factor)
        rng = np.random.default_rng([cfg.seed, 0xD1F, identity.identity_id, variant])
        edited = dif.edit_attribute(state, cfg.diffusion.t_edit, (factor, level), sched, model,
                                    guidance, rng)
        return dif.decode_attributes(edited.attribute_coords)

    return edit


def _write_cohort(path: Path, spec: CohortSpec, cfg: RunConfig, id_offset: int) -> Path:
    if path.exists():
        shutil.rmtree(path)
    editor = diffusion_editor(cfg) if cfg.diffusion.enabled else None
    obs = generate_cohort(spec, cfg.render, default_registry(), id_offset=id_offset,
                          attribute_editor=editor)
    return save_cohort(path, obs, spec, cfg.render, default_registry(),
                       extra={"id_offset": id_offset, "diffusion": asdict(cfg.diffusion)})


def cmd_generate(cfg: RunConfig) -> Path:
    """Render the training cohort (``cohort/``) and the held-out audit cohort (``eval_cohort/``)."""
    out = cfg.out
    with output_lock(out):
        path = _write_cohort(out / "cohort", cfg.cohort_spec(), cfg, 0)
        _write_cohort(out / "eval_cohort", cfg.eval_spec(), cfg, EVAL_ID_OFFSET)
        cfg.save(out / "config.json")
    return path


# --------------------------------------------------------------------------
# balance


def cohort_feature_table(observations) -> bal.FeatureTable:
    """Attribute coordinates of every observation, labelled with its group."""
    rows = np.stack([dif.attribute_coords(o.attributes) for o in observations])
    cols = ["yaw", "pitch", "light_front", "light_left", "light_right", "light_top", "intensity",
            "expression"]
    return bal.FeatureTable(rows, np.array([o.group_id for o in observations]), cols)


def cmd_balance(cfg: RunConfig) -> dict:
    out = cfg.out
    with output_lock(out):
        _require_dir(out / "cohort", "generate")
        obs, _ = load_cohort(out / "cohort")
        if cfg.balance.features_csv:
            table = bal.read_feature_table(cfg.balance.features_csv)
            if table.n != len(obs):
                raise ConfigurationError(f"balance.features_csv has {table.n} rows; cohort has {len(obs)}")
        else:
            table = cohort_feature_table(obs)
        bdir = out / "balance"
        bdir.mkdir(exist_ok=True)
        bal.write_feature_table(bdir / "features.csv", table)
        uniform = table.uniform_weights()
        result = bal.optimize_weights(table, cfg.balance.config())
        bal.write_weights(bdir / "weights.csv", result.weights)
        before = bal.alignment_check(table, cfg.balance.alignment_threshold)
        summary = {
            "loss_history": result.loss_history,
            "iterations": result.iterations,
            "converged": result.converged,
            "max_mean_deviation": {"uniform": bal.max_mean_deviation(table, uniform),
                                   "optimized": bal.max_mean_deviation(table, result.weights)},
            "alignment_min_p": before.min_p,
            "alignment_threshold": before.threshold,
            "aligned": before.aligned,
        }
        if cfg.balance.target_n is not None:
            files = [f"g{o.group_id:02d}_id{o.identity_id:04d}_v{o.variant:02d}.f32" for o in obs]
            rng = np.random.default_rng([cfg.seed, 0xBA1])
            picked = bal.resample(files, table.groups, result.weights, cfg.balance.target_n, rng)
            write_json(bdir / "resampled.json", {"files": picked})
            summary["resampled"] = len(picked)
        write_json(bdir / "balance.json", summary)
    return summary


# --------------------------------------------------------------------------
# train


def _training_observations(cfg: RunConfig):
    obs, _ = load_cohort(cfg.out / "cohort")
    resampled = cfg.out / "balance" / "resampled.json"
    if cfg.balance.target_n is not None and resampled.exists():
        by_name = {f"g{o.group_id:02d}_id{o.identity_id:04d}_v{o.variant:02d}.f32": o for o in obs}
        obs = [by_name[f] for f in json.loads(resampled.read_text())["files"]]
    return obs


def cmd_train(cfg: RunConfig) -> dict:
    out = cfg.out
    results = {}
    with output_lock(out):
        _require_dir(out / "cohort", "generate")
        obs = _training_observations(cfg)
        mdir = out / "models"
        mdir.mkdir(exist_ok=True)
        for mc in cfg.models:
            res = train(obs, mc, cfg.train_config())
            save_params(mdir / f"{mc.variant}.params", res.params)
            write_loss_log(mdir / f"{mc.variant}_loss.csv", res.loss_log)
            results[mc.variant] = {"initial_loss": res.loss_log[0][2], "final_loss": res.loss_log[-1][2]}
        write_json(mdir / "training.json", results)
    return results


# --------------------------------------------------------------------------
# attribution


def run_attribution(cfg: RunConfig) -> tuple[attr.Measurement, attr.AttributionWeights]:
    a = cfg.attribution
    spec = CohortSpec(identities_per_group=a.identities_per_group, variants_per_identity=1,
                      intervention_plan=(), seed=cfg.seed + ATTR_SEED_OFFSET,
                      identity_dim=cfg.cohort.identity_dim, base=cfg.cohort.base)
    identities = cohort_identities(spec, default_registry(), ATTR_ID_OFFSET)
    if a.model == "planted":
        model = attr.PlantedSensitivityEncoder(dict(a.sensitivities), a.sigma0, a.gain,
                                               seed=cfg.seed, base=cfg.cohort.base)
    else:
        path = cfg.out / "models" / f"{a.model}.params"
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run 'train' first")
        model = attr.RenderedEncoder(load_params(path), cfg.render,
                                     {g.group_id: g.shape_offset for g in default_registry()},
                                     seed=cfg.seed)
    meas = attr.measure_disparity_deltas(model, identities, a.plan(cfg.cohort.base), cfg.cohort.base,
                                         a.target_far, a.replicates, a.impostors_per_probe, cfg.seed)
    return meas, attr.decompose(meas.runs)


def _write_attribution(directory: Path, meas, weights) -> dict:
    attr.write_runs(directory / "attribution_runs.csv", meas.runs)
    attr.write_weights(directory / "attribution.csv", weights)
    d = weights.to_dict()
    d.update({"light": weights.shares["light"], "pose": weights.shares["pose"],
              "expression": weights.shares["expression"], "base_disparity": meas.base_disparity,
              "tau": meas.tau})
    return d


def cmd_attribute(cfg: RunConfig) -> dict:
    out = cfg.out
    with output_lock(out):
        adir = out / "attribution"
        adir.mkdir(exist_ok=True)
        meas, weights = run_attribution(cfg)
        d = _write_attribution(adir, meas, weights)
        write_json(adir / "attribution.json", d)
    return d


# --------------------------------------------------------------------------
# audit


def evaluate_model(params, observations, cfg: RunConfig, label: str):
    """Pairs, fairness report and per-group TPR@FAR rows for one model on the audit cohort."""
    X = stack_pixels(observations)
    _, _, u = embed_batch(params, X)
    ids = np.array([o.identity_id for o in observations])
    groups = np.array([o.group_id for o in observations])
    pairs = met.sample_pairs(u, ids, groups, cfg.impostor_ratio, np.random.default_rng([cfg.seed, 0xA0D17]))
    report = met.fairness_report(pairs, cfg.threshold_far, label, cfg.operating_points)
    rows = []
    for g in pairs.groups():
        sub = pairs.subset(pairs.group == g)
        curve = met.roc(sub)
        for far in cfg.operating_points:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", met.ExtrapolationWarning)
                tpr, flag = met.tpr_at_far(curve, far, with_flag=True)
            rows.append({"model": label, "group": g, "far": far, "tpr": tpr, "extrapolated": flag})
    return pairs, report, rows


def _table1_gaps(rows, model):
    out = {}
    for far in sorted({r["far"] for r in rows}, reverse=True):
        vals = [r["tpr"] for r in rows if r["model"] == model and r["far"] == far]
        out[met.far_key(far)] = met.tpr_gap(vals) if len(vals) >= 2 else float("nan")
    return out


def write_audit_tables(out: Path, bundle: dict) -> None:
    """Emit table CSVs and SVG figures from a bundle's contents only."""
    t1 = bundle["table1"]
    _write_csv(out / "table1.csv", ["model", "group", "far", "tpr", "extrapolated"],
               [[r["model"], r["group"], r["far"], r["tpr"], int(r["extrapolated"])] for r in t1])
    fars = [met.far_key(f) for f in bundle["provenance"]["config"]["operating_points"]]
    header = ["model", "target_far", "tau", "accuracy", "tpr_gap", "dpd", "eo_gap", "eer"] + [
        f"per_group_far_tpr_gap_{k}" for k in fars]
    rows = []
    for name, rep in bundle["reports"].items():
        rows.append([name, rep["target_far"], rep["tau"], rep["accuracy"], rep["tpr_gap"], rep["dpd"],
                     rep["eo_gap"], _nan(rep["eer"])] + [_nan(rep["per_group_far_tpr_gap"].get(k))
                                                         for k in fars])
    _write_csv(out / "table2.csv", header, rows)
    a = bundle["attribution"]
    _write_csv(out / "attribution.csv", ["factor", "weight", "share", "variance_share"],
               [[f, a["weights"][f], a["shares"][f], a["variance_shares"][f]] for f in attr.ATTR_FACTORS])

    points = {name: (rep["accuracy"], rep["tpr_gap"]) for name, rep in bundle["reports"].items()}
    frontier = [tuple(p) for p in bundle["pareto"]]
    (out / "pareto.svg").write_text(svg.scatter_with_frontier(
        points, frontier, "Accuracy vs TPR gap", "pooled TPR at common threshold", "TPR gap"))
    groups = sorted({int(g) for rep in bundle["reports"].values() for g in rep["groups"]})
    series = {name: [rep["groups"][str(g)]["tpr"] or 0.0 for g in groups]
              for name, rep in bundle["reports"].items()}
    if not series:
        shares = bundle["attribution"]["shares"]
        groups, series = list(attr.ATTR_FACTORS), {"share": [shares[f] for f in attr.ATTR_FACTORS]}
    (out / "bias_distribution.svg").write_text(svg.grouped_bars(
        groups, series, "Group TPR at common threshold", "group", "TPR"))


def _nan(v):
    return float("nan") if v is None else v


def cmd_audit(cfg: RunConfig) -> dict:
    """Evaluate every configured model, attribute disparity and write the audit bundle."""
    out = cfg.out
    with output_lock(out):
        params = {}
        if cfg.models:
            _require_dir(out / "eval_cohort", "generate")
            missing = [m.variant for m in cfg.models if not (out / "models" / f"{m.variant}.params").exists()]
            if missing:
                raise MissingArtifactError(f"no trained parameters for: {', '.join(missing)}; run 'train'")
            params = {m.variant: load_params(out / "models" / f"{m.variant}.params") for m in cfg.models}
        adir = out / "audit"
        adir.mkdir(exist_ok=True)
        reports, table1 = {}, []
        if params:
            obs, _ = load_cohort(out / "eval_cohort")
            for name, p in params.items():
                pairs, report, rows = evaluate_model(p, obs, cfg, name)
                pairs.to_csv(adir / f"pairs_{name}.csv")
                d = report.to_dict()
                d["accuracy"] = met.pooled_rates(pairs, report.tau).tpr
                d["per_group_far_tpr_gap"] = _table1_gaps(rows, name)
                reports[name] = d
                table1.extend(rows)
        meas, weights = run_attribution(cfg)
        attribution = _write_attribution(adir, meas, weights)
        pareto = met.pareto_frontier([(r["accuracy"], r["tpr_gap"]) for r in reports.values()]) \
            if reports else []
        bundle = {
            "schema_version": SCHEMA_VERSION,
            "label": cfg.label,
            "reports": reports,
            "table1": table1,
            "attribution": attribution,
            "pareto": [list(p) for p in pareto],
            "transfer": {},
            "provenance": provenance(cfg),
        }
        bundle = _clean(bundle)
        write_json(out / "bundle.json", bundle)
        write_audit_tables(out, bundle)
    return bundle


# --------------------------------------------------------------------------
# transfer


def load_bundle(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "bundle.json"
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run 'audit' first")
    return json.loads(path.read_text())


def _disparity_vectors(bundle: dict) -> dict:
    reps = bundle["reports"]
    vec = {"group_tpr": {}, "group_fpr": {}}
    for name, rep in sorted(reps.items()):
        for g, r in sorted(rep["groups"].items()):
            vec["group_tpr"][f"{name}/{g}"] = r["tpr"]
            vec["group_fpr"][f"{name}/{g}"] = r["fpr"]
    for metric in ("tpr_gap", "dpd", "eo_gap"):
        vec[metric] = {name: rep[metric] for name, rep in sorted(reps.items())}
    vec["attribution"] = {f: bundle["attribution"]["shares"][f] for f in attr.ATTR_FACTORS}
    return vec


def cmd_transfer(bundle_a, bundle_b, out, n_boot: int = 1000, alpha: float = 0.05) -> dict:
    """Compare the disparity patterns of two audit bundles."""
    A, B = load_bundle(bundle_a), load_bundle(bundle_b)
    va, vb = _disparity_vectors(A), _disparity_vectors(B)
    for metric in va:
        if set(va[metric]) != set(vb[metric]):
            diff = sorted(set(va[metric]) ^ set(vb[metric]))
            raise ConfigurationError(f"bundles differ in {metric} keys: {diff}")
    seed = A["provenance"]["seeds"]["run"]
    report = {}
    for metric in va:
        keys = sorted(va[metric])
        x = np.array([_nan(va[metric][k]) for k in keys], dtype=float)
        y = np.array([_nan(vb[metric][k]) for k in keys], dtype=float)
        entry = {"n": len(keys), "mean_abs_gap": float(np.mean(np.abs(x - y))) if keys else None,
                 "r": None, "r_ci": None}
        try:
            entry["r"] = stats.pearson_r(x, y)
        except ValueError:
            pass
        if entry["r"] is not None and len(keys) >= 3:
            entry["r_ci"] = list(_bootstrap_r(x, y, n_boot, alpha, np.random.default_rng([seed, 0x7F])))
        report[metric] = entry
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with output_lock(out):
        rows = [[A["label"], _gap_percent(A), 1.0], [B["label"], _gap_percent(B), report["group_tpr"]["r"]]]
        _write_csv(out / "transfer.csv", ["dataset", "gap_percent", "r"],
                   [[d, g, float("nan") if r is None else r] for d, g, r in rows])
        write_json(out / "transfer.json", {"a": A["label"], "b": B["label"], "metrics": report})
    return report


def _gap_percent(bundle) -> float:
    gaps = [rep["tpr_gap"] for rep in bundle["reports"].values()]
    return 100.0 * float(np.mean(gaps)) if gaps else float("nan")


def _bootstrap_r(x, y, n_boot, alpha, rng):
    idx = rng.integers(0, x.size, size=(n_boot, x.size))
    rs = []
    for row in idx:
        try:
            rs.append(stats.pearson_r(x[row], y[row]))
        except ValueError:
            continue
    if len(rs) < 2:
        return (float("nan"), float("nan"))
    lo, hi = np.quantile(rs, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# report


def cmd_report(cfg: RunConfig) -> str:
    """Re-emit tables and figures from ``bundle.json`` and return a text summary."""
    out = cfg.out
    with output_lock(out):
        bundle = load_bundle(out)
        rdir = out / "report"
        rdir.mkdir(exist_ok=True)
        write_audit_tables(rdir, bundle)
        lines = [f"# Audit report: {bundle['label']}", "",
                 f"config sha256: {bundle['provenance']['config_sha256']}", ""]
        if bundle["reports"]:
            lines += ["| model | tau | accuracy | TPR gap | DPD | EO gap |", "|---|---|---|---|---|---|"]
            for name, rep in bundle["reports"].items():
                lines.append(f"| {name} | {rep['tau']:.4f} | {rep['accuracy']:.3f} | {rep['tpr_gap']:.3f} "
                             f"| {rep['dpd']:.3f} | {rep['eo_gap']:.3f} |")
            lines += ["", "Per-group TPR gaps at per-group FAR operating points (table1.csv) and the gap "
                      "at one common threshold (table2.csv) use different thresholds and are reported "
                      "separately.", ""]
        s = bundle["attribution"]["shares"]
        lines.append(f"Attribution shares: light {s['light']:.3f}, pose {s['pose']:.3f}, "
                     f"expression {s['expression']:.3f} (R^2 {bundle['attribution']['r_squared']:.3f})")
        text = "\n".join(lines) + "\n"
        (rdir / "report.md").write_text(text)
    return text
