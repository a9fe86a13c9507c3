"""Parametric synthetic identities and a landmark-template Phong renderer.

An identity is a latent vector that deforms a 68-point landmark template and
scales an ellipsoidal head; a group contributes the albedo distribution.
Attribute changes (pose, light, expression) are applied one factor at a time
through :func:`intervene`, so every rendered variant of an identity differs
from the neutral base in exactly one controlled factor.
"""
from __future__ import annotations

import json
import math
import os
import re
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_GROUPS = 5
N_LANDMARKS = 68

YAW_RANGE = (-30.0, 30.0)
PITCH_RANGE = (-30.0, 30.0)
INTENSITY_RANGE = (0.2, 0.8)
EXPRESSION_LEVELS = (0, 1, 2, 3, 4)

LIGHT_DIRECTIONS = {
    "front": np.array([0.0, 0.0, 1.0]),
    "left": np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0),
    "right": np.array([1.0, 0.0, 1.0]) / math.sqrt(2.0),
    "top": np.array([0.0, 1.0, 1.0]) / math.sqrt(2.0),
}

# Blendshape order: smile, brow raise, mouth open, eye squint.
FACS_MAGNITUDES = (0.0, 0.25, 0.5, 0.75, 1.0)
FACS_PROFILE = np.array([1.0, 0.6, 0.8, 0.4])

FACTORS = ("pose_yaw", "pose_pitch", "light_dir", "light_intensity", "expression")

# Fixed seed for the template bases; never tied to a run seed.
_BASIS_SEED = 20240611


class RangeError(ValueError):
    """An attribute value lies outside its legal range."""


class ConfigurationError(ValueError):
    """A cohort specification cannot be realized."""


def _check_range(name, value, bounds):
    lo, hi = bounds
    if not (isinstance(value, (int, float, np.floating, np.integer)) and lo <= value <= hi):
        raise RangeError(f"{name}: value {value!r} outside [{lo}, {hi}]")


def facs_coefficients(level: int) -> np.ndarray:
    if level not in EXPRESSION_LEVELS:
        raise RangeError(f"expression: level {level!r} outside {{0..4}}")
    return FACS_MAGNITUDES[level] * FACS_PROFILE


@dataclass(frozen=True)
class DemographicGroup:
    group_id: int
    name: str
    albedo_mean: float
    albedo_spread: float = 0.05
    shape_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not 0.0 < self.albedo_mean <= 1.0:
            raise ValueError(f"albedo_mean must lie in (0, 1], got {self.albedo_mean}")
        if self.albedo_spread < 0:
            raise ValueError("albedo_spread must be nonnegative")


def default_registry() -> list[DemographicGroup]:
    """Five opaque cohorts with a planted albedo ordering.

    The albedo means are a simulator configuration chosen to plant an
    illumination-by-reflectance interaction; they carry no claim about any
    real population.
    """
    means = (0.85, 0.35, 0.7, 0.55, 0.6)
    offsets = ((0.0, 0.0, 0.0), (0.02, -0.01, 0.0), (-0.02, 0.01, -0.01),
               (0.01, 0.02, 0.01), (-0.01, -0.02, 0.0))
    return [DemographicGroup(g + 1, f"g{g + 1}", means[g], 0.05, offsets[g]) for g in range(N_GROUPS)]


def check_registry(groups: Sequence[DemographicGroup]) -> None:
    ids = [g.group_id for g in groups]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("group ids must be unique")
    if len(groups) != N_GROUPS:
        raise ConfigurationError(f"registry must hold exactly {N_GROUPS} groups")


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    group: int
    latent: np.ndarray = field(compare=False)
    albedo: float

    def __eq__(self, other):
        if not isinstance(other, IdentitySpec):
            return NotImplemented
        return (self.identity_id == other.identity_id and self.group == other.group
                and self.albedo == other.albedo and np.array_equal(self.latent, other.latent))

    def __hash__(self):
        return hash((self.identity_id, self.group, self.albedo, self.latent.tobytes()))


def sample_identity(group: DemographicGroup, rng: np.random.Generator, *,
                    identity_id: int = 0, dim: int = 16) -> IdentitySpec:
    """Draw a standard-normal latent and a clamped albedo for ``group``."""
    latent = rng.standard_normal(dim)
    lo = group.albedo_mean - 3.0 * group.albedo_spread
    hi = group.albedo_mean + 3.0 * group.albedo_spread
    albedo = float(np.clip(group.albedo_mean + group.albedo_spread * rng.standard_normal(), lo, hi))
    albedo = min(max(albedo, 1e-3), 1.0)
    return IdentitySpec(identity_id=identity_id, group=group.group_id, latent=latent, albedo=albedo)


@dataclass(frozen=True)
class AttributeVector:
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    light_dir: str = "front"
    light_intensity: float = 0.5
    expression_level: int = 0

    def __post_init__(self):
        _check_range("pose_yaw", self.yaw_deg, YAW_RANGE)
        _check_range("pose_pitch", self.pitch_deg, PITCH_RANGE)
        if self.light_dir not in LIGHT_DIRECTIONS:
            raise RangeError(f"light_dir: {self.light_dir!r} not in {sorted(LIGHT_DIRECTIONS)}")
        _check_range("light_intensity", self.light_intensity, INTENSITY_RANGE)
        if self.expression_level not in EXPRESSION_LEVELS:
            raise RangeError(f"expression: level {self.expression_level!r} outside {{0..4}}")

    @property
    def facs(self) -> np.ndarray:
        return facs_coefficients(self.expression_level)

    def to_dict(self) -> dict:
        return asdict(self)


NEUTRAL = AttributeVector()


def intervene(base: AttributeVector, factor: str, value) -> AttributeVector:
    """Return ``base`` with only ``factor`` set to ``value``."""
    if factor == "pose_yaw":
        _check_range(factor, value, YAW_RANGE)
        return replace(base, yaw_deg=float(value))
    if factor == "pose_pitch":
        _check_range(factor, value, PITCH_RANGE)
        return replace(base, pitch_deg=float(value))
    if factor == "light_dir":
        if value not in LIGHT_DIRECTIONS:
            raise RangeError(f"light_dir: {value!r} not in {sorted(LIGHT_DIRECTIONS)}")
        return replace(base, light_dir=value)
    if factor == "light_intensity":
        _check_range(factor, value, INTENSITY_RANGE)
        return replace(base, light_intensity=float(value))
    if factor == "expression":
        if value not in EXPRESSION_LEVELS:
            raise RangeError(f"expression: level {value!r} outside {{0..4}}")
        return replace(base, expression_level=int(value))
    raise RangeError(f"unknown factor {factor!r}; expected one of {FACTORS}")


def changed_factors(a: AttributeVector, b: AttributeVector) -> list[str]:
    """Factors in which two attribute vectors differ (facs folds into expression)."""
    out = []
    if a.yaw_deg != b.yaw_deg:
        out.append("pose_yaw")
    if a.pitch_deg != b.pitch_deg:
        out.append("pose_pitch")
    if a.light_dir != b.light_dir:
        out.append("light_dir")
    if a.light_intensity != b.light_intensity:
        out.append("light_intensity")
    if a.expression_level != b.expression_level:
        out.append("expression")
    return out


# --------------------------------------------------------------------------
# Geometry


def _ring(cx, cy, rx, ry, n, start=0.0):
    a = start + 2 * np.pi * np.arange(n) / n
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


def landmark_template() -> np.ndarray:
    """Frontal 68-point layout (jaw, brows, nose, eyes, mouth) in head units."""
    t = np.linspace(-0.5, 0.5, 17) * np.pi * 1.1
    jaw = np.stack([0.62 * np.sin(t), 0.05 - 0.72 * np.cos(t)], axis=1)
    bx = np.linspace(-0.15, 0.15, 5)
    brow_r = np.stack([-0.30 + bx, 0.36 + 0.04 * np.cos(bx * 8)], axis=1)
    brow_l = np.stack([0.30 + bx, 0.36 + 0.04 * np.cos(bx * 8)], axis=1)
    bridge = np.stack([np.zeros(4), np.linspace(0.26, 0.0, 4)], axis=1)
    nostril = np.stack([np.linspace(-0.12, 0.12, 5), np.full(5, -0.08)], axis=1)
    eye_r = _ring(-0.27, 0.22, 0.10, 0.045, 6, np.pi)
    eye_l = _ring(0.27, 0.22, 0.10, 0.045, 6, np.pi)
    mouth_out = _ring(0.0, -0.36, 0.24, 0.09, 12, np.pi)
    mouth_in = _ring(0.0, -0.36, 0.15, 0.04, 8, np.pi)
    pts = np.concatenate([jaw, brow_r, brow_l, bridge, nostril, eye_r, eye_l, mouth_out, mouth_in])
    assert pts.shape == (N_LANDMARKS, 2)
    return pts


# Per-landmark darkening strength (jaw carries none: it marks the outline).
_FEATURE_STRENGTH = np.concatenate([
    np.zeros(17), np.full(10, 0.55), np.full(4, 0.15), np.full(5, 0.35),
    np.full(12, 0.7), np.full(12, 0.5), np.full(8, 0.6)])


def expression_blendshapes() -> np.ndarray:
    """(4, 68, 2) displacement fields: smile, brow raise, mouth open, squint."""
    tpl = landmark_template()
    b = np.zeros((4, N_LANDMARKS, 2))
    mouth = np.arange(48, 68)
    rel = tpl[mouth, 0] / 0.24
    b[0, mouth, 0] = 0.05 * rel
    b[0, mouth, 1] = 0.06 * rel ** 2
    b[1, 17:27, 1] = 0.08
    lower = mouth[tpl[mouth, 1] < -0.36 - 1e-9]
    b[2, lower, 1] = -0.10
    eyes = np.arange(36, 48)
    centre = np.where(eyes < 42, 0.22, 0.22)
    b[3, eyes, 1] = -0.6 * (tpl[eyes, 1] - centre)
    return b


def mirror_index() -> np.ndarray:
    """Index of each landmark's left-right partner in the template."""
    tpl = landmark_template()
    flipped = tpl * np.array([-1.0, 1.0])
    d = np.linalg.norm(tpl[:, None, :] - flipped[None, :, :], axis=2)
    return np.argmin(d, axis=1)


def _identity_basis(dim: int, scale: float = 0.025) -> np.ndarray:
    # Bilaterally symmetric deformations, so a mirrored face keeps its identity.
    rng = np.random.default_rng(_BASIS_SEED + dim)
    raw = rng.standard_normal((dim, N_LANDMARKS, 2))
    mirrored = raw[:, mirror_index(), :] * np.array([-1.0, 1.0])
    return scale * (raw + mirrored) / math.sqrt(2.0)


@dataclass(frozen=True)
class RenderParams:
    height: int = 32
    width: int = 32
    k_a: float = 0.15
    k_d: float = 0.7
    k_s: float = 0.15
    shininess: float = 8.0
    head_axes: tuple = (0.72, 0.92, 0.70)
    feature_radius: float = 0.06
    noise_sigma: float = 0.0
    noise_albedo_gain: float = 0.0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ValueError("image must be at least 4x4")
        if min(self.k_a, self.k_d, self.k_s) < 0 or self.shininess <= 0:
            raise ValueError("Phong constants must be nonnegative and shininess positive")
        if self.noise_sigma < 0 or self.noise_albedo_gain < 0:
            raise ValueError("noise_sigma and noise_albedo_gain must be nonnegative")

    def noise_level(self, albedo: float) -> float:
        """Sensor noise for a subject; darker subjects get a lower signal-to-noise ratio."""
        return self.noise_sigma * (1.0 + self.noise_albedo_gain * (1.0 - albedo))


@dataclass
class Observation:
    pixels: np.ndarray
    identity_id: int
    group_id: int
    attributes: AttributeVector
    variant: int = 0


def _rotation(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    y, p = math.radians(yaw_deg), math.radians(pitch_deg)
    ry = np.array([[math.cos(y), 0.0, math.sin(y)], [0.0, 1.0, 0.0], [-math.sin(y), 0.0, math.cos(y)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(p), -math.sin(p)], [0.0, math.sin(p), math.cos(p)]])
    return ry @ rx


def head_geometry(identity: IdentitySpec, attrs: AttributeVector,
                  params: RenderParams = RenderParams(), shape_offset=(0.0, 0.0, 0.0)):
    """Ellipsoid axes and 3-D landmarks in the head frame."""
    lat = identity.latent
    axes = np.asarray(params.head_axes) * (1.0 + 0.04 * np.tanh(lat[:3]) + np.asarray(shape_offset))
    xy = landmark_template() + np.tensordot(lat, _identity_basis(lat.size), axes=1)
    xy = xy + np.tensordot(attrs.facs, expression_blendshapes(), axes=1)
    xy = xy * np.array([axes[0] / 0.72, axes[1] / 0.92])
    inside = 1.0 - (xy[:, 0] / axes[0]) ** 2 - (xy[:, 1] / axes[1]) ** 2
    z = axes[2] * np.sqrt(np.clip(inside, 0.0, None))
    return axes, np.column_stack([xy, z])


def project_landmarks(identity: IdentitySpec, attrs: AttributeVector,
                      params: RenderParams = RenderParams()) -> np.ndarray:
    """Landmark positions in image coordinates after pose rotation."""
    _, lm = head_geometry(identity, attrs, params)
    world = lm @ _rotation(attrs.yaw_deg, attrs.pitch_deg).T
    return world[:, :2]


_GRIDS: dict = {}


def _pixel_grid(h: int, w: int):
    key = (h, w)
    if key not in _GRIDS:
        ys = 1.0 - (np.arange(h) + 0.5) * 2.0 / h
        xs = -1.0 + (np.arange(w) + 0.5) * 2.0 / w
        gx, gy = np.meshgrid(xs, ys)
        _GRIDS[key] = (gx.ravel(), gy.ravel())
    return _GRIDS[key]


def render(identity: IdentitySpec, attrs: AttributeVector, params: RenderParams = RenderParams(),
           *, shape_offset=(0.0, 0.0, 0.0), noise_seed=None, variant: int = 0) -> Observation:
    """Ray-cast the posed head orthographically and Phong-shade each pixel.

    Shading is ``k_a*a + k_d*a*lam*max(0, n.l) + k_s*lam*max(0, r.v)**alpha``
    with ``a`` the local albedo (identity albedo darkened around facial
    landmarks). Background pixels are 0. If ``noise_seed`` is given and
    ``params.noise_sigma > 0``, Gaussian sensor noise keyed on that seed is
    added before clamping, with standard deviation ``params.noise_level(albedo)``.
    """
    axes, lm = head_geometry(identity, attrs, params, shape_offset)
    rot = _rotation(attrs.yaw_deg, attrs.pitch_deg)
    gx, gy = _pixel_grid(params.height, params.width)
    n_px = gx.size

    # Rays travel along -z from z=+4; transform into the head frame.
    origin = np.column_stack([gx, gy, np.full(n_px, 4.0)]) @ rot
    direction = np.array([0.0, 0.0, -1.0]) @ rot
    inv_a2 = 1.0 / axes ** 2
    qa = np.sum(direction ** 2 * inv_a2)
    qb = 2.0 * (origin * direction) @ inv_a2
    qc = (origin ** 2) @ inv_a2 - 1.0
    disc = qb ** 2 - 4.0 * qa * qc
    hit = disc > 0.0
    t = (-qb - np.sqrt(np.where(hit, disc, 0.0))) / (2.0 * qa)
    p = origin + t[:, None] * direction

    normal_h = p * inv_a2
    normal_h /= np.linalg.norm(normal_h, axis=1, keepdims=True)
    normal = normal_h @ rot.T

    d2 = np.sum((p[:, None, :] - lm[None, :, :]) ** 2, axis=2)
    darken = np.exp(-d2 / (2.0 * params.feature_radius ** 2)) @ _FEATURE_STRENGTH
    albedo = identity.albedo * np.clip(1.0 - darken, 0.05, 1.0)

    light = LIGHT_DIRECTIONS[attrs.light_dir]
    lam = attrs.light_intensity
    ndl = normal @ light
    refl = 2.0 * ndl[:, None] * normal - light
    rdv = np.clip(refl[:, 2], 0.0, None)
    spec = np.where(ndl > 0.0, rdv ** params.shininess, 0.0)
    shade = (params.k_a * albedo + params.k_d * albedo * lam * np.clip(ndl, 0.0, None)
             + params.k_s * lam * spec)
    img = np.where(hit, shade, 0.0)

    if noise_seed is not None and params.noise_sigma > 0:
        noise_rng = np.random.default_rng(noise_seed)
        img = img + params.noise_level(identity.albedo) * noise_rng.standard_normal(n_px)
    img = np.clip(img, 0.0, 1.0).reshape(params.height, params.width)
    return Observation(img, identity.identity_id, identity.group, attrs, variant)


def face_mask(identity: IdentitySpec, attrs: AttributeVector, params: RenderParams = RenderParams()):
    """Boolean image of pixels whose ray hits the head."""
    axes, _ = head_geometry(identity, attrs, params)
    rot = _rotation(attrs.yaw_deg, attrs.pitch_deg)
    gx, gy = _pixel_grid(params.height, params.width)
    origin = np.column_stack([gx, gy, np.full(gx.size, 4.0)]) @ rot
    direction = np.array([0.0, 0.0, -1.0]) @ rot
    inv_a2 = 1.0 / axes ** 2
    qa = np.sum(direction ** 2 * inv_a2)
    qb = 2.0 * (origin * direction) @ inv_a2
    qc = (origin ** 2) @ inv_a2 - 1.0
    return (qb ** 2 - 4.0 * qa * qc > 0.0).reshape(params.height, params.width)


# --------------------------------------------------------------------------
# Cohorts

DEFAULT_PLAN = (
    ("pose_yaw", -30.0), ("pose_yaw", -15.0), ("pose_yaw", 15.0), ("pose_yaw", 30.0),
    ("pose_pitch", 15.0), ("light_dir", "left"), ("light_dir", "right"), ("light_dir", "top"),
    ("light_intensity", 0.3), ("expression", 3),
)


@dataclass(frozen=True)
class CohortSpec:
    identities_per_group: int = 20
    variants_per_identity: int = 10
    intervention_plan: tuple = DEFAULT_PLAN
    seed: int = 0
    identity_dim: int = 16
    base: AttributeVector = NEUTRAL

    def __post_init__(self):
        if self.identities_per_group < 1:
            raise ConfigurationError("identities_per_group must be >= 1")
        if self.variants_per_identity < 1:
            raise ConfigurationError("variants_per_identity must be >= 1")
        if not self.intervention_plan and self.variants_per_identity > 1:
            raise ConfigurationError("empty intervention plan with variants_per_identity > 1")
        for factor, value in self.intervention_plan:
            intervene(self.base, factor, value)

    @property
    def total(self) -> int:
        return N_GROUPS * self.identities_per_group * self.variants_per_identity

    def variant_attributes(self, v: int) -> AttributeVector:
        if not self.intervention_plan:
            return self.base
        factor, value = self.intervention_plan[v % len(self.intervention_plan)]
        return intervene(self.base, factor, value)

    def to_dict(self) -> dict:
        return {
            "identities_per_group": self.identities_per_group,
            "variants_per_identity": self.variants_per_identity,
            "intervention_plan": [[f, v] for f, v in self.intervention_plan],
            "seed": self.seed,
            "identity_dim": self.identity_dim,
            "base": self.base.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        if "intervention_plan" in d:
            d["intervention_plan"] = tuple((f, v) for f, v in d["intervention_plan"])
        if "base" in d:
            d["base"] = AttributeVector(**d["base"])
        return cls(**d)


def identity_rng(seed: int, identity_id: int, stream: int = 0) -> np.random.Generator:
    """Independent sub-stream for one identity; order of generation is irrelevant."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, stream, identity_id])


def noise_key(seed: int, identity_id: int, variant: int, stream: int = 1) -> list[int]:
    return [int(seed) & 0xFFFFFFFFFFFFFFFF, stream, identity_id, variant]


def cohort_identities(spec: CohortSpec, registry: Sequence[DemographicGroup] | None = None,
                      id_offset: int = 0) -> list[IdentitySpec]:
    registry = list(registry or default_registry())
    check_registry(registry)
    out = []
    for g, group in enumerate(registry):
        for k in range(spec.identities_per_group):
            iid = id_offset + g * spec.identities_per_group + k
            out.append(sample_identity(group, identity_rng(spec.seed, iid), identity_id=iid,
                                       dim=spec.identity_dim))
    return out


def generate_cohort(spec: CohortSpec, params: RenderParams = RenderParams(),
                    registry: Sequence[DemographicGroup] | None = None, *,
                    id_offset: int = 0, attribute_editor=None) -> list[Observation]:
    """Render every identity under every planned variant.

    ``attribute_editor``, if given, maps ``(identity, variant, target_attrs)``
    to the attribute vector actually rendered (used to route interventions
    through the diffusion editor).
    """
    registry = list(registry or default_registry())
    identities = cohort_identities(spec, registry, id_offset)
    offsets = {g.group_id: g.shape_offset for g in registry}
    obs = []
    for ident in identities:
        for v in range(spec.variants_per_identity):
            attrs = spec.variant_attributes(v)
            if attribute_editor is not None:
                attrs = attribute_editor(ident, v, attrs)
            obs.append(render(ident, attrs, params, shape_offset=offsets[ident.group],
                              noise_seed=noise_key(spec.seed, ident.identity_id, v), variant=v))
    return obs


# --------------------------------------------------------------------------
# Directory serialization

_FNAME = re.compile(r"g(\d{2,})_id(\d{4,})_v(\d{2,})\.f32$")


def observation_filename(obs: Observation) -> str:
    return f"g{obs.group_id:02d}_id{obs.identity_id:04d}_v{obs.variant:02d}.f32"


def save_cohort(path, observations: Iterable[Observation], spec: CohortSpec,
                params: RenderParams = RenderParams(),
                registry: Sequence[DemographicGroup] | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per observation.

    A partially written directory is removed if anything fails.
    """
    path = Path(path)
    registry = list(registry or default_registry())
    existed = path.exists()
    try:
        path.mkdir(parents=True, exist_ok=True)
        records = []
        for o in observations:
            name = observation_filename(o)
            if np.shape(o.pixels) != (params.height, params.width):
                raise ValueError(f"{name}: pixel grid {np.shape(o.pixels)} does not match "
                                 f"{params.height}x{params.width}")
            (path / name).write_bytes(np.ascontiguousarray(o.pixels, dtype="<f4").tobytes())
            records.append({"file": name, "identity_id": o.identity_id, "group_id": o.group_id,
                            "variant": o.variant, "attributes": o.attributes.to_dict()})
        manifest = {
            "format": "facefair-cohort/1",
            "spec": spec.to_dict(),
            "seed": spec.seed,
            "render": asdict(params),
            "registry": [asdict(g) for g in registry],
            "observations": records,
        }
        if extra:
            manifest.update(extra)
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except BaseException:
        if not existed:
            shutil.rmtree(path, ignore_errors=True)
        raise
    return path


def load_cohort(path) -> tuple[list[Observation], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    h, w = manifest["render"]["height"], manifest["render"]["width"]
    obs = []
    for rec in manifest["observations"]:
        m = _FNAME.match(rec["file"])
        if m is None:
            raise ValueError(f"bad observation file name {rec['file']!r}")
        raw = np.frombuffer((path / rec["file"]).read_bytes(), dtype="<f4")
        if raw.size != h * w:
            raise ValueError(f"{rec['file']}: expected {h * w} values, found {raw.size}")
        obs.append(Observation(raw.reshape(h, w).astype(np.float64), rec["identity_id"],
                               rec["group_id"], AttributeVector(**rec["attributes"]), rec["variant"]))
    return obs, manifest


def registry_from_manifest(manifest: dict) -> list[DemographicGroup]:
    return [DemographicGroup(g["group_id"], g["name"], g["albedo_mean"], g["albedo_spread"],
                             tuple(g["shape_offset"])) for g in manifest["registry"]]


def stack_pixels(observations: Sequence[Observation]) -> np.ndarray:
    return np.stack([o.pixels.ravel() for o in observations]) if observations else np.zeros((0, 0))


def listdir_observations(path) -> list[str]:
    return sorted(f for f in os.listdir(path) if _FNAME.match(f))
