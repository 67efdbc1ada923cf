"""Batched reverse diffusion with pluggable risk guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import guidance as G
from ..risk import Pose, RiskSurrogate, SafeSet, is_safe_batch
from .model import DenoiserParams, posterior_mean
from .schedule import NoiseSchedule


@dataclass
class RiskGuide:
    """What guided sampling needs from System 2: the safe set, its surrogate, the pose."""

    safe_set: SafeSet
    surrogate: RiskSurrogate
    pose: Pose


def _streams(rng, batch):
    if isinstance(rng, np.random.Generator):
        return rng.spawn(batch)
    return [np.random.default_rng(s) for s in np.random.SeedSequence(rng).spawn(batch)]


def sample(params: DenoiserParams, ctx, schedule: NoiseSchedule, guidance=None, rng=0, batch: int = 1,
           guide: RiskGuide | None = None, stats: list | None = None) -> list[np.ndarray]:
    """Run the reverse chain ``T -> 1`` for ``batch`` independent sequences.

    Each element draws from its own generator spawned from ``rng``. Returns
    robot-frame waypoints in meters, one ``(N_u, 2)`` array per element
    (shorter for ``Filter``). ``stats``, if given, collects one
    ``ProjectionInfo`` per (step, element) in projection mode. In that
    mode an unsafe initial draw is first shrunk toward the stationary action.
    """
    guidance = guidance or G.Unguided()
    if not isinstance(guidance, G.Unguided) and guide is None:
        raise ValueError(f"{type(guidance).__name__} guidance needs a RiskGuide")
    if isinstance(guidance, G.Projection):
        guidance.validate(schedule.T)
        if not guide.safe_set.pose_safe(guide.pose):
            raise G.ProjectionError("projection guidance requires a safe current pose")

    gens = _streams(rng, batch)
    shape = (params.n_waypoints, 2)
    u = np.stack([g.standard_normal(shape) for g in gens])
    u_m = params.to_meters(u)
    if isinstance(guidance, G.Projection):
        # the ladder interpolates toward the current iterate, so the chain starts inside the safe set
        for b in np.flatnonzero(~is_safe_batch(guide.safe_set, u_m, guide.pose)):
            u_m[b] = G.shrink_to_safe(u_m[b], guide.safe_set, guide.pose, guidance.beta_mix)
            u[b] = params.from_meters(u_m[b])
    for t in range(schedule.T, 0, -1):
        eps = params.predict(u, t, ctx)
        if isinstance(guidance, G.Classifier):
            eps = eps + guidance.eta * G.risk_gradient(params, guide.surrogate, u, guide.pose)
        mean = posterior_mean(u, t, eps, schedule)
        w = np.stack([g.standard_normal(shape) for g in gens])
        sigma = schedule.sigma[t]
        if isinstance(guidance, G.Projection):
            nxt, nxt_m, infos = G.project_batch(mean, sigma, w, u_m, t, guidance, guide.safe_set,
                                                guide.pose, params, gens)
            if stats is not None:
                stats.extend(infos)
            u, u_m = nxt, nxt_m
        else:
            u = mean + sigma * w
            u_m = None

    if isinstance(guidance, G.Projection):
        return [x.copy() for x in u_m]
    out = [x for x in params.to_meters(u)]
    if isinstance(guidance, G.Filter):
        out = [G.safety_filter(x, guide.safe_set, guide.pose) for x in out]
    return out
