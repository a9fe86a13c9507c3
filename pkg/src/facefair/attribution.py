"""Single-factor intervention experiments and additive attribution of disparity.

Three coarse factors are attributed: ``light`` (direction and intensity),
``pose`` (yaw and pitch) and ``expression``. Each condition changes one of
them relative to a base attribute vector. For every condition the TPR gap
across groups is measured at a threshold fixed on the base condition, and
the change relative to the base gap is regressed, without intercept, on the
normalised size of the perturbation:

    delta_gap ~ w_light * d_light + w_pose * d_pose + w_exp * d_exp

Each run only has a nonzero regressor for its own factor.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .cohort import (INTENSITY_RANGE, NEUTRAL, AttributeVector, IdentitySpec,
                     RangeError, YAW_RANGE, intervene)
from .metrics import PairSet, global_threshold, group_rates, tpr_gap

ATTR_FACTORS = ("light", "pose", "expression")


class RankDeficiencyError(ValueError):
    """A factor has no run with a nonzero perturbation, so its weight is not identifiable."""


# --------------------------------------------------------------------------
# Planning


def default_grid() -> dict:
    return {
        "light": [(d, lam) for d in ("front", "left", "right", "top") for lam in (0.2, 0.8)],
        "pose": [(yaw, 0.0) for yaw in (-30.0, -15.0, 0.0, 15.0, 30.0)],
        "expression": [0, 1, 2, 3, 4],
    }


def _apply(base: AttributeVector, factor: str, level) -> AttributeVector:
    if factor == "light":
        direction, lam = level
        return intervene(intervene(base, "light_dir", direction), "light_intensity", lam)
    if factor == "pose":
        if np.isscalar(level):
            level = (level, base.pitch_deg)
        yaw, pitch = level
        return intervene(intervene(base, "pose_yaw", yaw), "pose_pitch", pitch)
    if factor == "expression":
        return intervene(base, "expression", level)
    raise RangeError(f"unknown factor {factor!r}; expected one of {ATTR_FACTORS}")


@dataclass(frozen=True)
class Condition:
    factor: str
    level: tuple | float | int
    attrs: AttributeVector

    @property
    def label(self) -> str:
        lv = self.level if isinstance(self.level, tuple) else (self.level,)
        return f"{self.factor}:" + "/".join(str(v) for v in lv)


def plan_interventions(base: AttributeVector = NEUTRAL, grid: dict | None = None) -> list[Condition]:
    """One condition per (factor, level), in factor order then grid order.

    Levels equal to the base produce a condition identical to the base,
    which is kept: its measured change is zero by construction.
    """
    grid = default_grid() if grid is None else grid
    unknown = set(grid) - set(ATTR_FACTORS)
    if unknown:
        raise RangeError(f"unknown factors in grid: {sorted(unknown)}")
    out = []
    for factor in ATTR_FACTORS:
        for level in grid.get(factor, []):
            level = tuple(level) if isinstance(level, (list, tuple)) else level
            out.append(Condition(factor, level, _apply(base, factor, level)))
    return out


def perturbation_magnitude(factor: str, base: AttributeVector, attrs: AttributeVector) -> float:
    """Unnormalised size of a single-factor change, designed to lie in [0, 1] from a neutral base.

    light: half for a change of direction plus half the intensity change
    relative to its largest possible excursion from the neutral 0.5;
    pose: the larger angle change over 30 degrees; expression: level change
    over 4.
    """
    if factor == "light":
        span = (INTENSITY_RANGE[1] - INTENSITY_RANGE[0]) / 2.0
        return (0.5 * (attrs.light_dir != base.light_dir)
                + 0.5 * abs(attrs.light_intensity - base.light_intensity) / span)
    if factor == "pose":
        return max(abs(attrs.yaw_deg - base.yaw_deg), abs(attrs.pitch_deg - base.pitch_deg)) / YAW_RANGE[1]
    if factor == "expression":
        return abs(attrs.expression_level - base.expression_level) / 4.0
    raise RangeError(f"unknown factor {factor!r}")


# --------------------------------------------------------------------------
# Models that embed an identity under a condition


class ConditionEncoder(Protocol):
    def embed(self, identities: Sequence[IdentitySpec], attrs: AttributeVector,
              replicate: int) -> np.ndarray: ...


@dataclass
class PlantedSensitivityEncoder:
    """Simulated recogniser with known per-factor sensitivities.

    An identity's clean code is a fixed random projection of its latent.
    A capture adds isotropic noise whose scale grows with the perturbation
    and more steeply for darker subjects:

        sigma = sigma0 * (1 + gain * (1 - albedo) * sum_f k_f * m_f)

    where ``m_f`` is :func:`perturbation_magnitude`. The noise draw depends on
    (seed, identity, replicate) only, so the same draw is reused under every
    condition and condition effects are compared on common random numbers.
    """

    sensitivities: dict = field(default_factory=lambda: {"light": 0.42, "pose": 0.31,
                                                         "expression": 0.27})
    sigma0: float = 0.7
    gain: float = 4.0
    embedding_dim: int = 32
    seed: int = 0
    base: AttributeVector = NEUTRAL

    def __post_init__(self):
        unknown = set(self.sensitivities) - set(ATTR_FACTORS)
        if unknown:
            raise ValueError(f"unknown factors {sorted(unknown)}")
        if any(v < 0 for v in self.sensitivities.values()) or self.sigma0 < 0 or self.gain < 0:
            raise ValueError("sensitivities, sigma0 and gain must be nonnegative")

    def _projection(self, dim: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xA77, dim])
        return rng.standard_normal((self.embedding_dim, dim)) / math.sqrt(dim)

    def load(self, attrs: AttributeVector) -> float:
        return sum(self.sensitivities.get(f, 0.0) * perturbation_magnitude(f, self.base, attrs)
                   for f in ATTR_FACTORS)

    def embed(self, identities, attrs, replicate):
        identities = list(identities)
        Z = np.stack([i.latent for i in identities])
        clean = Z @ self._projection(Z.shape[1]).T
        albedo = np.array([i.albedo for i in identities])
        sigma = self.sigma0 * (1.0 + self.gain * (1.0 - albedo) * self.load(attrs))
        noise = np.stack([np.random.default_rng([self.seed, 0x5EED, i.identity_id, replicate])
                          .standard_normal(self.embedding_dim) for i in identities])
        f = clean + sigma[:, None] * noise
        return f / np.linalg.norm(f, axis=1, keepdims=True)


@dataclass
class RenderedEncoder:
    """Adapter: render each identity under the condition and embed it with trained parameters."""

    params: object
    render_params: object
    shape_offsets: dict
    seed: int = 0

    def embed(self, identities, attrs, replicate):
        from .cohort import render
        from .recognizer import embed_batch

        X = np.stack([render(i, attrs, self.render_params, shape_offset=self.shape_offsets[i.group],
                             noise_seed=[self.seed, 0xA11, i.identity_id, replicate]).pixels.ravel()
                      for i in identities])
        _, _, u = embed_batch(self.params, X)
        return u


# --------------------------------------------------------------------------
# Measurement


@dataclass
class InterventionRun:
    factor: str
    level: str
    delta_factor: float
    measured_disparity: float
    delta: float
    evaluable: bool = True


@dataclass
class _Protocol:
    gallery: np.ndarray
    gen_i: np.ndarray
    gen_j: np.ndarray
    imp_i: np.ndarray
    imp_j: np.ndarray
    groups: np.ndarray


def _pair_protocol(identities, replicates: int, impostors_per_probe: int, rng) -> _Protocol:
    """Gallery = one base capture per identity; probes = ``replicates`` captures per identity.

    Genuine pairs match each probe with its own gallery entry. Each probe is
    also matched with ``impostors_per_probe`` gallery entries of other
    identities from the same group. The pairs are fixed once and reused for
    every condition.
    """
    n = len(identities)
    groups = np.array([i.group for i in identities])
    probe_owner = np.repeat(np.arange(n), replicates)
    imp_i, imp_j = [], []
    for p, owner in enumerate(probe_owner):
        same = np.flatnonzero((groups == groups[owner]) & (np.arange(n) != owner))
        k = min(impostors_per_probe, same.size)
        for g in rng.choice(same, size=k, replace=False):
            imp_i.append(g)
            imp_j.append(p)
    return _Protocol(np.arange(n), probe_owner, np.arange(probe_owner.size),
                     np.array(imp_i, dtype=int), np.array(imp_j, dtype=int), groups)


def _pairset(gallery_u, probe_u, proto: _Protocol) -> PairSet:
    gen = np.einsum("ij,ij->i", gallery_u[proto.gen_i], probe_u[proto.gen_j])
    imp = np.einsum("ij,ij->i", gallery_u[proto.imp_i], probe_u[proto.imp_j])
    return PairSet(np.r_[gen, imp], np.r_[np.ones(gen.size, bool), np.zeros(imp.size, bool)],
                   np.r_[proto.groups[proto.gen_i], proto.groups[proto.imp_i]])


def _probe_embeddings(model, identities, attrs, replicates):
    per_rep = [model.embed(identities, attrs, r + 1) for r in range(replicates)]
    # probe order: identity-major, replicate-minor, matching _pair_protocol
    return np.stack(per_rep, axis=1).reshape(len(identities) * replicates, -1)


@dataclass
class Measurement:
    runs: list[InterventionRun]
    base_disparity: float
    tau: float


def measure_disparity_deltas(model, identities: Sequence[IdentitySpec], plan: Sequence[Condition],
                             base: AttributeVector = NEUTRAL, target_far: float = 1e-2,
                             replicates: int = 10, impostors_per_probe: int = 10,
                             seed: int = 0) -> Measurement:
    """Measure each condition's TPR gap at a threshold fixed on the base condition."""
    identities = list(identities)
    rng = np.random.default_rng([seed, 0xDE17A])
    proto = _pair_protocol(identities, replicates, impostors_per_probe, rng)
    gallery = model.embed(identities, base, 0)

    base_pairs = _pairset(gallery, _probe_embeddings(model, identities, base, replicates), proto)
    tau = global_threshold(base_pairs, target_far).tau
    base_gap = _gap(base_pairs, tau)
    if base_gap is None:
        raise ValueError("base condition has a group without genuine or impostor pairs")

    raw = {c.label: perturbation_magnitude(c.factor, base, c.attrs) for c in plan}
    scale = {f: max([raw[c.label] for c in plan if c.factor == f], default=0.0) for f in ATTR_FACTORS}
    runs = []
    for c in plan:
        pairs = _pairset(gallery, _probe_embeddings(model, identities, c.attrs, replicates), proto)
        gap = _gap(pairs, tau)
        d = raw[c.label] / scale[c.factor] if scale[c.factor] > 0 else 0.0
        if gap is None:
            warnings.warn(f"condition {c.label}: a group is unevaluable; run excluded",
                          RuntimeWarning, stacklevel=2)
            runs.append(InterventionRun(c.factor, c.label, d, float("nan"), float("nan"), False))
        else:
            runs.append(InterventionRun(c.factor, c.label, d, gap, gap - base_gap))
    return Measurement(runs, base_gap, tau)


def _gap(pairs: PairSet, tau: float):
    rates = group_rates(pairs, tau)
    if not all(r.evaluated for r in rates.values()):
        return None
    return tpr_gap([r.tpr for r in rates.values()])


# --------------------------------------------------------------------------
# Decomposition


@dataclass
class AttributionWeights:
    weights: dict
    shares: dict
    variance_shares: dict
    residual: float
    r_squared: float
    clamped: list[str]

    @property
    def w_light(self):
        return self.weights["light"]

    @property
    def w_pose(self):
        return self.weights["pose"]

    @property
    def w_exp(self):
        return self.weights["expression"]

    def to_dict(self) -> dict:
        return {"weights": self.weights, "shares": self.shares,
                "variance_shares": self.variance_shares, "residual": self.residual,
                "r_squared": self.r_squared, "clamped": self.clamped}


def decompose(runs: Sequence[InterventionRun]) -> AttributionWeights:
    """Least squares without intercept, one regressor column per factor.

    Negative coefficients are clamped to zero (and listed in ``clamped``)
    before normalising to shares. ``variance_shares`` splits the explained
    sum of squares of the unclamped fit by factor; with disjoint regressors
    the split is exact.
    """
    usable = [r for r in runs if r.evaluable]
    if len(usable) < len(runs):
        warnings.warn(f"{len(runs) - len(usable)} unevaluable runs excluded", RuntimeWarning,
                      stacklevel=2)
    X = np.array([[r.delta_factor if r.factor == f else 0.0 for f in ATTR_FACTORS] for r in usable])
    y = np.array([r.delta for r in usable])
    deficient = [f for k, f in enumerate(ATTR_FACTORS) if X.size == 0 or not np.any(X[:, k] != 0)]
    if deficient:
        raise RankDeficiencyError(f"no run with a nonzero perturbation for: {', '.join(deficient)}")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    fitted = X @ coef
    residual = float(np.linalg.norm(y - fitted))
    ss_total = float(y @ y)
    explained = np.array([float(np.sum((X[:, k] * coef[k]) ** 2)) for k in range(len(ATTR_FACTORS))])

    clamped = [f for f, c in zip(ATTR_FACTORS, coef) if c < 0]
    w = np.maximum(coef, 0.0)
    total = w.sum()
    shares = w / total if total > 0 else np.zeros_like(w)
    vs = explained / explained.sum() if explained.sum() > 0 else np.zeros_like(explained)
    return AttributionWeights(
        weights={f: float(v) for f, v in zip(ATTR_FACTORS, w)},
        shares={f: float(v) for f, v in zip(ATTR_FACTORS, shares)},
        variance_shares={f: float(v) for f, v in zip(ATTR_FACTORS, vs)},
        residual=residual,
        r_squared=float(explained.sum() / ss_total) if ss_total > 0 else 1.0,
        clamped=clamped)


def write_runs(path, runs: Sequence[InterventionRun]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "level", "delta_factor", "measured_disparity", "delta", "evaluable"])
        for r in runs:
            w.writerow([r.factor, r.level, repr(r.delta_factor), repr(r.measured_disparity),
                        repr(r.delta), int(r.evaluable)])


def read_runs(path) -> list[InterventionRun]:
    with open(path, newline="") as fh:
        return [InterventionRun(r["factor"], r["level"], float(r["delta_factor"]),
                                float(r["measured_disparity"]), float(r["delta"]),
                                r["evaluable"] == "1") for r in csv.DictReader(fh)]


def write_weights(path, aw: AttributionWeights) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "weight", "share", "variance_share"])
        for f in ATTR_FACTORS:
            w.writerow([f, repr(aw.weights[f]), repr(aw.shares[f]), repr(aw.variance_shares[f])])
