"""Inference-time coupling of the diffusion policy with the risk map.

Diffusion iterates live in normalized action space; every safety test and
projection is done in meters (robot frame) through the checkpoint's
normalizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion.model import DenoiserParams, ddpm_step, posterior_mean
from .diffusion.schedule import NoiseSchedule
from .risk import Pose, RiskSurrogate, SafeSet, is_safe, is_safe_batch

SNAP_TOLERANCE = 1e-9  # meters; below this a shrunk sequence is set to the stationary one


class ProjectionError(RuntimeError):
    """The stationary action is unsafe, so no projection can succeed."""


@dataclass(frozen=True)
class Unguided:
    name = "none"


@dataclass(frozen=True)
class Classifier:
    eta: float = 1.0
    name = "classifier"

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


@dataclass(frozen=True)
class Projection:
    t1: int = 10
    t2: int = 30
    beta_mix: float = 0.5
    max_rejections: int = 20
    max_projections: int = 50
    name = "projection"

    @classmethod
    def for_schedule(cls, T: int, **kw) -> "Projection":
        kw.setdefault("t2", int(round(0.6 * T)))
        kw.setdefault("t1", int(round(0.2 * T)))
        return cls(**kw)

    def validate(self, T: int) -> None:
        if not 0 <= self.t1 <= self.t2 <= T:
            raise ValueError(f"need 0 <= t1 <= t2 <= T, got t1={self.t1} t2={self.t2} T={T}")
        if not 0 < self.beta_mix < 1:
            raise ValueError("beta_mix must lie in (0, 1)")
        if self.max_rejections < 1 or self.max_projections < 1:
            raise ValueError("iteration caps must be >= 1")


@dataclass(frozen=True)
class Filter:
    """Unguided sampling followed by truncation at the first unsafe waypoint."""

    name = "filter"


GuidanceMode = Unguided | Classifier | Projection | Filter


@dataclass
class ProjectionInfo:
    branch: str = "none"  # none | rejection | previous | small-action
    rejections: int = 0
    projections: int = 0
    shrinks: int = 0


# --- classifier-style guidance -------------------------------------------------


def risk_gradient(params: DenoiserParams, surrogate: RiskSurrogate, u_norm, pose: Pose) -> np.ndarray:
    """Gradient of ``c_risk`` w.r.t. normalized waypoints, for one or a batch of sequences."""
    u_norm = np.asarray(u_norm, dtype=float)
    batch = u_norm.reshape(-1, params.n_waypoints, 2)
    meters = params.to_meters(batch)
    out = np.empty_like(batch)
    for i, u in enumerate(meters):
        _, g = surrogate.value_and_grad(u, pose)
        out[i] = g * params.meter_scale
    return out.reshape(u_norm.shape)


def classifier_step(u_t, t, params: DenoiserParams, ctx, surrogate: RiskSurrogate, eta: float,
                    schedule: NoiseSchedule, rng, pose: Pose):
    """DDPM step with the noise prediction replaced by ``eps_theta + eta * grad c_risk``."""
    eps = params.predict(u_t, t, ctx)
    eps = eps + eta * risk_gradient(params, surrogate, u_t, pose)
    return ddpm_step(u_t, t, params, ctx, schedule, rng, eps_hat=eps)


# --- projection guidance ----------------------------------------------------------


def shrink_to_safe(u, safe_set: SafeSet, pose: Pose, beta_mix: float, info: ProjectionInfo | None = None):
    """Scale waypoints toward the stationary action until the sequence is safe.

    Returns the first safe iterate of ``u <- (1 - beta_mix) * u``; once
    every waypoint is within ``SNAP_TOLERANCE`` of the pose the sequence is
    set to exactly zero (the robot stays put).
    """
    u = np.array(u, dtype=float).reshape(-1, 2)
    chain = [u]
    while len(u) and np.max(np.hypot(u[:, 0], u[:, 1])) >= SNAP_TOLERANCE:
        u = (1.0 - beta_mix) * u
        chain.append(u)
    k = int(_first_safe_rows(safe_set, np.stack(chain)[None], pose)[0])
    if k < 0:
        if not safe_set.pose_safe(pose):
            raise ProjectionError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is itself unsafe")
        k, out = len(chain), np.zeros_like(u)
    else:
        out = chain[k]
    if info is not None:
        info.shrinks += k
    return out


def _first_safe_rows(safe_set: SafeSet, stacks, pose: Pose):
    """For candidates ``(A, K, N, 2)`` return the first safe index per row, -1 if none."""
    A, K = stacks.shape[:2]
    ok = is_safe_batch(safe_set, stacks.reshape((A * K,) + stacks.shape[2:]), pose).reshape(A, K)
    return np.where(ok.any(axis=1), ok.argmax(axis=1), -1)


def project_batch(mean, sigma, w, u_t_m, t, mode: Projection, safe_set: SafeSet, pose: Pose,
                  params: DenoiserParams, rngs):
    """Apply the rejection -> previous -> small-action ladder to each ``mean[b] + sigma * w[b]``.

    ``rngs[b]`` supplies element ``b``'s rejection redraws (all
    ``max_rejections`` are drawn up front; the first safe one is kept).
    Returns ``(u_norm, u_meters, infos)``; every row of ``u_meters`` is safe.
    """
    u_norm = mean + sigma * w
    u_m = params.to_meters(u_norm)
    infos = [ProjectionInfo() for _ in range(len(u_norm))]
    todo = np.flatnonzero(~is_safe_batch(safe_set, u_m, pose))
    if not len(todo):
        return u_norm, u_m, infos

    if t > mode.t2:
        redraws = np.stack([mean[b] + sigma * rngs[b].standard_normal((mode.max_rejections,) + mean.shape[1:])
                            for b in todo])
        redraws_m = params.to_meters(redraws)
        first = _first_safe_rows(safe_set, redraws_m, pose)
        for row, b in enumerate(todo):
            infos[b].branch = "rejection"
            k = first[row]
            if k >= 0:
                infos[b].rejections = k + 1
                u_norm[b], u_m[b] = redraws[row, k], redraws_m[row, k]
            else:
                infos[b].rejections = mode.max_rejections
                u_m[b] = redraws_m[row, -1]
        todo = todo[first < 0]

    if t > mode.t1 and len(todo):
        b_mix = mode.beta_mix
        cur, target = u_m[todo], u_t_m[todo]
        chain = []
        for _ in range(mode.max_projections):
            cur = (1.0 - b_mix) * cur + b_mix * target
            chain.append(cur)
        chain = np.stack(chain, axis=1)
        first = _first_safe_rows(safe_set, chain, pose)
        for row, b in enumerate(todo):
            infos[b].branch = "previous"
            k = first[row]
            if k >= 0:
                infos[b].projections = k + 1
                u_m[b] = chain[row, k]
            else:
                infos[b].projections = mode.max_projections
                u_m[b] = chain[row, -1]
            u_norm[b] = params.from_meters(u_m[b])
        todo = todo[first < 0]

    for b in todo:
        infos[b].branch = "small-action"
        u_m[b] = shrink_to_safe(u_m[b], safe_set, pose, mode.beta_mix, infos[b])
        u_norm[b] = params.from_meters(u_m[b])
    return u_norm, u_m, infos


def project_candidate(mean, sigma, w, u_t_m, t, mode: Projection, safe_set: SafeSet, pose: Pose,
                      params: DenoiserParams, rng):
    """Single-sequence ``project_batch``; returns ``(u_norm, u_meters, info)``."""
    u_norm, u_m, infos = project_batch(np.asarray(mean, dtype=float)[None], sigma, np.asarray(w)[None],
                                       np.asarray(u_t_m, dtype=float)[None], t, mode, safe_set, pose,
                                       params, [rng])
    return u_norm[0], u_m[0], infos[0]


def projection_step(u_t, t, params: DenoiserParams, ctx, safe_set: SafeSet, mode: Projection,
                    schedule: NoiseSchedule, rng, pose: Pose):
    """One projected reverse step for a single sequence; returns ``(u_prev, info)``.

    ``u_prev`` is normalized; ``info`` records which branch fired.
    """
    t = schedule.check_t(t, lo=1)
    u_t = np.asarray(u_t, dtype=float)
    eps = params.predict(u_t, t, ctx)
    mean = posterior_mean(u_t, t, eps, schedule)
    w = rng.standard_normal(u_t.shape)
    u_norm, _, info = project_candidate(mean, schedule.sigma[t], w, params.to_meters(u_t), t, mode,
                                        safe_set, pose, params, rng)
    return u_norm, info


# --- post-hoc filter --------------------------------------------------------------------


def safety_filter(u, safe_set: SafeSet, pose: Pose) -> np.ndarray:
    """Longest prefix of ``u`` whose waypoints and connecting segments are all safe."""
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    for k in range(1, len(u) + 1):
        if not is_safe(safe_set, u[:k], pose):
            return u[:k - 1].copy()
    return u.copy()
