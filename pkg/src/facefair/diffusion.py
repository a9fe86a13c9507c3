"""DDPM noise schedules, forward noising, ancestral sampling and masked edits.

The denoiser is analytic: data under condition ``c`` is Gaussian
``N(m_c, Sigma)``, so ``E[x0 | x_t, c]`` has a closed form and the predicted
noise follows from the forward equation. The unconditional branch used by
classifier-free guidance is the exact posterior of the uniform mixture over
conditions.

Edits act on :class:`FaceState` vectors (renderer parameters), not pixels.
Frozen coordinates are copied through untouched.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

from .cohort import (EXPRESSION_LEVELS, INTENSITY_RANGE, LIGHT_DIRECTIONS, PITCH_RANGE, YAW_RANGE,
                     AttributeVector)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    timesteps: np.ndarray | None = None  # original step indices kept by respacing
    # Respaced schedules carry the kept alpha_bar values verbatim, so they are
    # reproduced bit-exactly rather than re-multiplied from the new betas.
    abar_values: np.ndarray | None = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("beta must be a nonempty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(1, beta.size + 1))
        if self.abar_values is None:
            object.__setattr__(self, "abar_values", np.cumprod(1.0 - beta))
        else:
            ab = np.asarray(self.abar_values, dtype=float)
            if ab.shape != beta.shape or not np.allclose(ab, np.cumprod(1.0 - beta), rtol=1e-9, atol=0):
                raise ScheduleError("alpha_bar values disagree with the betas")
            object.__setattr__(self, "abar_values", ab)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.abar_values

    def abar(self, t: int) -> float:
        """``alpha_bar`` at 1-based step ``t``; ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [1, {self.T}]")


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def subsample_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Keep ``steps`` evenly spaced steps (always including T) and respace betas.

    ``alpha_bar`` at the kept steps is preserved: each new beta is one minus
    the ratio of consecutive kept ``alpha_bar`` values.
    """
    if not 1 <= steps <= sched.T:
        raise ScheduleError(f"steps must lie in [1, {sched.T}], got {steps}")
    if steps == sched.T:
        return NoiseSchedule(sched.beta.copy(), np.asarray(sched.timesteps).copy(),
                             sched.alpha_bar.copy())
    k = np.arange(1, steps + 1)
    idx = (k * sched.T) // steps
    abar = sched.alpha_bar[idx - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    beta = 1.0 - abar / prev
    return NoiseSchedule(beta, np.asarray(sched.timesteps)[idx - 1], abar)


def forward_noise(x0, t: int, sched: NoiseSchedule, eps) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    sched.check_step(t)
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, sched: NoiseSchedule, eps_hat) -> np.ndarray:
    ab = sched.abar(t)
    return (np.asarray(x_t) - math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(ab)


@dataclass
class GaussianConditionModel:
    """Per-condition Gaussian data model; ``cov`` is a variance vector or SPD matrix."""

    means: Mapping[Hashable, np.ndarray]
    cov: np.ndarray | float = 1.0
    dim: int = field(init=False)

    def __post_init__(self):
        if not self.means:
            raise ValueError("model needs at least one condition")
        self.means = {c: np.asarray(m, dtype=float) for c, m in self.means.items()}
        dims = {m.shape for m in self.means.values()}
        if len(dims) != 1:
            raise ValueError("all condition means must share one shape")
        self.dim = next(iter(dims))[0]
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(self.dim, float(cov))
        if cov.ndim == 1:
            if cov.shape != (self.dim,) or np.any(cov < 0):
                raise ValueError("diagonal covariance must be nonnegative with one entry per coordinate")
        elif cov.ndim == 2:
            if cov.shape != (self.dim, self.dim) or not np.allclose(cov, cov.T):
                raise ValueError("covariance matrix must be symmetric and match the dimension")
            np.linalg.cholesky(cov)
        self.cov = cov

    @property
    def diagonal(self) -> bool:
        return self.cov.ndim == 1

    def mean(self, c) -> np.ndarray:
        try:
            return self.means[c]
        except KeyError:
            raise KeyError(f"unknown condition {c!r}; known: {sorted(map(str, self.means))}") from None

    def posterior_mean(self, x_t, t: int, c, sched: NoiseSchedule) -> np.ndarray:
        """``E[x0 | x_t, c]``; ``c=None`` means the uniform mixture over conditions."""
        if c is None:
            return self._mixture_posterior_mean(x_t, t, sched)
        m = self.mean(c)
        ab = sched.abar(t)
        x_t = np.asarray(x_t, dtype=float)
        if self.diagonal:
            s2 = self.cov
            return (math.sqrt(ab) * s2 * x_t + (1.0 - ab) * m) / (ab * s2 + 1.0 - ab)
        A = ab * self.cov + (1.0 - ab) * np.eye(self.dim)
        resid = x_t - math.sqrt(ab) * m
        gain = math.sqrt(ab) * self.cov
        return m + np.linalg.solve(A, resid.T).T @ gain.T

    def marginal_logpdf(self, x_t, t: int, c, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.abar(t)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        resid = x_t - math.sqrt(ab) * self.mean(c)
        if self.diagonal:
            var = ab * self.cov + 1.0 - ab
            return -0.5 * np.sum(resid ** 2 / var + np.log(2 * np.pi * var), axis=1)
        A = ab * self.cov + (1.0 - ab) * np.eye(self.dim)
        _, logdet = np.linalg.slogdet(2 * np.pi * A)
        return -0.5 * (np.sum(resid * np.linalg.solve(A, resid.T).T, axis=1) + logdet)

    def _mixture_posterior_mean(self, x_t, t, sched):
        x_t = np.asarray(x_t, dtype=float)
        labels = list(self.means)
        logp = np.stack([self.marginal_logpdf(x_t, t, c, sched) for c in labels])
        logp -= logp.max(axis=0)
        resp = np.exp(logp)
        resp /= resp.sum(axis=0)
        means = np.stack([np.atleast_2d(self.posterior_mean(x_t, t, c, sched)) for c in labels])
        out = np.einsum("kn,knd->nd", resp, means)
        return out[0] if x_t.ndim == 1 else out


def analytic_eps(x_t, t: int, c, sched: NoiseSchedule, model: GaussianConditionModel) -> np.ndarray:
    """Noise implied by the exact posterior mean of ``x0``."""
    sched.check_step(t)
    ab = sched.abar(t)
    x0_hat = model.posterior_mean(x_t, t, c, sched)
    return (np.asarray(x_t, dtype=float) - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.w) or self.w < 0:
            raise ValueError("guidance weight must be finite and >= 0")


def cfg_combine(eps_cond, eps_uncond, g: GuidanceConfig) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if g.w == 0:
        return eps_cond
    return (1.0 + g.w) * eps_cond - g.w * eps_uncond


def guided_eps(x_t, t, c, sched, model, g: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    eps_c = analytic_eps(x_t, t, c, sched, model)
    if g.w == 0:
        return eps_c
    return cfg_combine(eps_c, analytic_eps(x_t, t, None, sched, model), g)


def reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, rng: np.random.Generator | None) -> np.ndarray:
    """One ancestral step with posterior variance ``beta_t (1-abar_{t-1}) / (1-abar_t)``.

    No noise is added at ``t == 1``; ``rng=None`` also disables it.
    """
    sched.check_step(t)
    beta = sched.beta[t - 1]
    ab, ab_prev = sched.abar(t), sched.abar(t - 1)
    x_t = np.asarray(x_t, dtype=float)
    mean = (x_t - beta / math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(1.0 - beta)
    if t == 1 or rng is None:
        return mean
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + math.sqrt(var) * rng.standard_normal(x_t.shape)


def sample(n: int, c, sched: NoiseSchedule, model: GaussianConditionModel, rng: np.random.Generator,
           g: GuidanceConfig = GuidanceConfig()) -> np.ndarray:
    """Run ``n`` independent reverse chains from ``N(0, I)`` under condition ``c``."""
    x = rng.standard_normal((n, model.dim))
    for t in range(sched.T, 0, -1):
        x = reverse_step(x, t, guided_eps(x, t, c, sched, model, g), sched, rng)
    return x


# --------------------------------------------------------------------------
# Face states


@dataclass
class FaceState:
    identity_coords: np.ndarray
    attribute_coords: np.ndarray
    mask: np.ndarray  # True marks a frozen coordinate

    def __post_init__(self):
        self.identity_coords = np.asarray(self.identity_coords, dtype=float)
        self.attribute_coords = np.asarray(self.attribute_coords, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.identity_coords.size + self.attribute_coords.size,):
            raise ValueError("mask length must equal identity + attribute coordinate count")
        if not self.mask[: self.identity_coords.size].all():
            raise ValueError("identity coordinates must be frozen")

    @property
    def attribute_mask(self) -> np.ndarray:
        return self.mask[self.identity_coords.size:]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.identity_coords, self.attribute_coords])


_LIGHTS = tuple(LIGHT_DIRECTIONS)
# attribute coordinate layout
ATTR_SLICES = {
    "pose_yaw": slice(0, 1),
    "pose_pitch": slice(1, 2),
    "light_dir": slice(2, 6),
    "light_intensity": slice(6, 7),
    "expression": slice(7, 8),
}
ATTR_DIM = 8


def attribute_coords(a: AttributeVector) -> np.ndarray:
    v = np.zeros(ATTR_DIM)
    v[0] = a.yaw_deg / YAW_RANGE[1]
    v[1] = a.pitch_deg / PITCH_RANGE[1]
    v[2 + _LIGHTS.index(a.light_dir)] = 1.0
    mid = sum(INTENSITY_RANGE) / 2
    v[6] = (a.light_intensity - mid) / (INTENSITY_RANGE[1] - mid)
    v[7] = a.expression_level / EXPRESSION_LEVELS[-1]
    return v


def decode_attributes(v) -> AttributeVector:
    """Snap attribute coordinates back to the nearest legal attribute vector."""
    v = np.asarray(v, dtype=float)
    mid = sum(INTENSITY_RANGE) / 2
    yaw = float(np.clip(v[0] * YAW_RANGE[1], *YAW_RANGE))
    pitch = float(np.clip(v[1] * PITCH_RANGE[1], *PITCH_RANGE))
    light = _LIGHTS[int(np.argmax(v[2:6]))]
    lam = float(np.clip(mid + v[6] * (INTENSITY_RANGE[1] - mid), *INTENSITY_RANGE))
    expr = int(np.clip(np.rint(v[7] * EXPRESSION_LEVELS[-1]), 0, EXPRESSION_LEVELS[-1]))
    return AttributeVector(yaw, pitch, light, lam, expr)


def face_state(identity_latent, attrs: AttributeVector, free_factor: str | None = None) -> FaceState:
    """State with the identity frozen and every attribute slot frozen except ``free_factor``."""
    ident = np.asarray(identity_latent, dtype=float)
    attr_mask = np.ones(ATTR_DIM, dtype=bool)
    if free_factor is not None:
        attr_mask[ATTR_SLICES[free_factor]] = False
    return FaceState(ident, attribute_coords(attrs), np.concatenate([np.ones(ident.size, bool), attr_mask]))


def edit_attribute(state: FaceState, t_edit: int, new_c, sched: NoiseSchedule,
                   model: GaussianConditionModel, g: GuidanceConfig, rng: np.random.Generator) -> FaceState:
    """Noise the free attribute coordinates to ``t_edit`` and denoise them under ``new_c``.

    Frozen coordinates are held at their forward-noised values during the
    chain and restored exactly at the end.
    """
    model.mean(new_c)
    if model.dim != state.attribute_coords.size:
        raise ValueError("condition model dimension must match the attribute coordinates")
    if not 0 <= t_edit <= sched.T:
        raise ScheduleError(f"t_edit must lie in [0, {sched.T}]")
    free = ~state.attribute_mask
    if t_edit == 0 or not free.any():
        return FaceState(state.identity_coords.copy(), state.attribute_coords.copy(), state.mask.copy())

    x0 = state.attribute_coords
    x = forward_noise(x0, t_edit, sched, rng.standard_normal(x0.shape))
    for t in range(t_edit, 0, -1):
        eps = guided_eps(x, t, new_c, sched, model, g)
        x_new = reverse_step(x, t, eps, sched, rng)
        if t > 1:
            known = forward_noise(x0, t - 1, sched, rng.standard_normal(x0.shape))
        else:
            known = x0
        x = np.where(free, x_new, known)
    out = x0.copy()
    out[free] = x[free]
    return FaceState(state.identity_coords.copy(), out, state.mask.copy())


def attribute_condition_model(variance: float = 0.01) -> GaussianConditionModel:
    """One condition per discretized factor level, centred on that level's coordinates.

    Labels are ``(factor, level)`` tuples, e.g. ``("light_dir", "left")``.
    """
    from .cohort import NEUTRAL, intervene

    means = {}
    for yaw in (-30.0, -15.0, 0.0, 15.0, 30.0):
        means[("pose_yaw", yaw)] = attribute_coords(intervene(NEUTRAL, "pose_yaw", yaw))
    for pitch in (-30.0, -15.0, 0.0, 15.0, 30.0):
        means[("pose_pitch", pitch)] = attribute_coords(intervene(NEUTRAL, "pose_pitch", pitch))
    for d in _LIGHTS:
        means[("light_dir", d)] = attribute_coords(intervene(NEUTRAL, "light_dir", d))
    for lam in (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8):
        means[("light_intensity", lam)] = attribute_coords(intervene(NEUTRAL, "light_intensity", lam))
    for e in EXPRESSION_LEVELS:
        means[("expression", e)] = attribute_coords(intervene(NEUTRAL, "expression", e))
    return GaussianConditionModel(means, variance)


# --------------------------------------------------------------------------
# CSV


def schedule_to_csv(sched: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha", "alpha_bar"])
        for t, b, a, ab in zip(sched.timesteps, sched.beta, sched.alpha, sched.alpha_bar):
            w.writerow([int(t), repr(float(b)), repr(float(a)), repr(float(ab))])


def schedule_from_csv(path) -> NoiseSchedule:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return NoiseSchedule(np.array([float(r["beta"]) for r in rows]),
                         np.array([int(r["t"]) for r in rows]),
                         np.array([float(r["alpha_bar"]) for r in rows]))
