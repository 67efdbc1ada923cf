"""Stochastic traversability cost, CVaR risk maps and the safe set.

The traversability cost is a stand-in for a full physics-based estimator:
over a circular robot footprint it fits a plane to one elevation
realization and penalizes the plane's slope and the largest height jump
between 4-adjacent cells::

    cost = slope_weight * slope / slope_critical + step_weight * step / step_critical

Map uncertainty enters through Monte-Carlo realizations of the per-cell
Gaussian belief; per cell, the cost samples are reduced with CVaR_alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .terrain import ElevationBelief, GridSpec, grid_cells_within, read_grid, write_grid

LOG2 = math.log(2.0)


class Pose(NamedTuple):
    x: float
    y: float
    theta: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class CostParams:
    slope_weight: float = 1.0
    step_weight: float = 1.0
    slope_critical: float = math.radians(30.0)
    step_critical: float = 0.2
    footprint_radius: float = 0.2

    def __post_init__(self):
        if self.slope_weight < 0 or self.step_weight < 0:
            raise ValueError("cost weights must be >= 0")
        if self.slope_critical <= 0 or self.step_critical <= 0 or self.footprint_radius <= 0:
            raise ValueError("critical values and footprint radius must be > 0")


@dataclass(frozen=True)
class RiskConfig:
    alpha: float = 0.9
    gamma: float = 0.8
    mc_samples: int = 32

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.mc_samples < 1:
            raise ValueError(f"mc_samples must be >= 1, got {self.mc_samples}")


# --- cost -----------------------------------------------------------------


class _Footprint:
    """Precomputed plane-fit weights and adjacent-cell pairs for one footprint."""

    def __init__(self, params: CostParams, resolution: float):
        if params.footprint_radius < resolution:
            raise ValueError("footprint radius must cover at least one neighbouring cell")
        self.offsets = grid_cells_within(params.footprint_radius, resolution)
        self.pad = int(np.abs(self.offsets).max())
        design = np.column_stack([self.offsets * resolution, np.ones(len(self.offsets))])
        self.fit = np.linalg.pinv(design)  # rows: d/dx, d/dy, intercept
        inside = {tuple(o) for o in self.offsets.tolist()}
        pairs = []
        for ox, oy in self.offsets.tolist():
            for ex, ey in ((1, 0), (0, 1)):
                if (ox + ex, oy + ey) in inside:
                    pairs.append((ox, oy, ox + ex, oy + ey))
        self.pairs = pairs


def _footprint(params: CostParams, resolution: float) -> _Footprint:
    key = (params, resolution)
    fp = _FOOTPRINTS.get(key)
    if fp is None:
        fp = _FOOTPRINTS[key] = _Footprint(params, resolution)
    return fp


_FOOTPRINTS: dict = {}


def _cost_from_padded(hp: np.ndarray, out_h: int, out_w: int, params: CostParams, fp: _Footprint) -> np.ndarray:
    """Cost at every output cell of an edge-padded elevation array ``(..., H+2p, W+2p)``."""
    p = fp.pad

    def shifted(dx, dy):
        return hp[..., p + dy:p + dy + out_h, p + dx:p + dx + out_w]

    gx = np.zeros(hp.shape[:-2] + (out_h, out_w))
    gy = np.zeros_like(gx)
    for k, (dx, dy) in enumerate(fp.offsets.tolist()):
        s = shifted(dx, dy)
        gx += fp.fit[0, k] * s
        gy += fp.fit[1, k] * s
    slope = np.arctan(np.hypot(gx, gy))

    step = np.zeros_like(gx)
    for ax, ay, bx, by in fp.pairs:
        np.maximum(step, np.abs(shifted(bx, by) - shifted(ax, ay)), out=step)

    cost = params.slope_weight * slope / params.slope_critical + params.step_weight * step / params.step_critical
    return np.maximum(cost, 0.0)


def cost_field(elevation: np.ndarray, params: CostParams, resolution: float) -> np.ndarray:
    """Traversability cost of one (or a stack of) elevation realizations, per cell."""
    elevation = np.asarray(elevation, dtype=float)
    fp = _footprint(params, resolution)
    pad = [(0, 0)] * (elevation.ndim - 2) + [(fp.pad, fp.pad), (fp.pad, fp.pad)]
    hp = np.pad(elevation, pad, mode="edge")
    return _cost_from_padded(hp, elevation.shape[-2], elevation.shape[-1], params, fp)


def cost_sample(belief: ElevationBelief, params: CostParams, cell, rng) -> float:
    """Draw one map realization around ``cell`` = (ix, iy) and return its cost."""
    spec = belief.spec
    ix, iy = int(cell[0]), int(cell[1])
    if not (0 <= ix < spec.width and 0 <= iy < spec.height):
        raise IndexError(f"cell {(ix, iy)} outside {spec.width}x{spec.height} grid")
    fp = _footprint(params, spec.resolution)
    p = fp.pad
    y0, y1 = max(iy - p, 0), min(iy + p, spec.height - 1)
    x0, x1 = max(ix - p, 0), min(ix + p, spec.width - 1)
    mean = belief.mean[y0:y1 + 1, x0:x1 + 1].astype(float)
    std = belief.std[y0:y1 + 1, x0:x1 + 1].astype(float)
    realization = mean + std * rng.standard_normal(mean.shape)
    # edge replication, matching cost_field at the map border
    ys = np.clip(np.arange(iy - p, iy + p + 1), 0, spec.height - 1) - y0
    xs = np.clip(np.arange(ix - p, ix + p + 1), 0, spec.width - 1) - x0
    hp = realization[np.ix_(ys, xs)]
    return float(_cost_from_padded(hp, 1, 1, params, fp)[0, 0])


# --- CVaR -------------------------------------------------------------------


def cvar(samples, alpha: float, axis=None):
    """Empirical CVaR_alpha: the mean of the worst ``(1 - alpha)`` fraction.

    The boundary sample of the tail gets fractional weight, which makes this
    exactly the minimum of ``z + E[(R - z)_+] / (1 - alpha)`` over z for the
    empirical distribution. ``alpha == 1`` returns the maximum.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    x = np.asarray(samples, dtype=float)
    if axis is None:
        x = x.ravel()
        axis = 0
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cvar of an empty sample set")
    if alpha == 1:
        return x.max(axis=-1)
    tail = (1.0 - alpha) * n
    w = np.clip(tail - np.arange(n), 0.0, 1.0) / tail  # weights on descending order
    desc = -np.sort(-x, axis=-1)
    return desc @ w


# --- risk map / safe set ----------------------------------------------------


@dataclass(frozen=True)
class RiskMap:
    spec: GridSpec
    rho: np.ndarray
    config: RiskConfig

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float32)
        if rho.shape != self.spec.shape:
            raise ValueError(f"rho shape {rho.shape} does not match grid {self.spec.shape}")
        if not np.all(np.isfinite(rho)) or np.any(rho < 0):
            raise ValueError("rho must be finite and non-negative")
        rho.flags.writeable = False
        object.__setattr__(self, "rho", rho)


def build_risk_map(belief: ElevationBelief, params: CostParams, config: RiskConfig, seed: int = 0,
                   chunk: int = 16) -> RiskMap:
    """Monte-Carlo CVaR of the traversability cost at every cell.

    Each of the ``mc_samples`` draws is a full-map realization, so
    neighbouring cells see a consistent terrain sample.
    """
    rng = np.random.default_rng(seed)
    spec = belief.spec
    mean = belief.mean.astype(float)
    std = belief.std.astype(float)
    costs = np.empty((config.mc_samples,) + spec.shape)
    for start in range(0, config.mc_samples, chunk):
        k = min(chunk, config.mc_samples - start)
        realizations = mean + std * rng.standard_normal((k,) + spec.shape)
        costs[start:start + k] = cost_field(realizations, params, spec.resolution)
    rho = cvar(costs, config.alpha, axis=0)
    return RiskMap(spec, rho.astype(np.float32), config)


def save_risk_map(risk_map: RiskMap, path) -> None:
    cfg = risk_map.config
    write_grid(path, risk_map.spec, [risk_map.rho],
               extra={"alpha": cfg.alpha, "gamma": cfg.gamma, "mc_samples": cfg.mc_samples})


def load_risk_map(path) -> RiskMap:
    spec, chans, extra = read_grid(path)
    if len(chans) != 1:
        raise ValueError(f"{path}: risk map needs 1 channel, found {len(chans)}")
    defaults = RiskConfig()
    cfg = RiskConfig(
        alpha=extra.get("alpha", defaults.alpha),
        gamma=extra.get("gamma", defaults.gamma),
        mc_samples=int(extra.get("mc_samples", defaults.mc_samples)),
    )
    return RiskMap(spec, chans[0], cfg)


class SafeSet:
    """Cells with ``rho <= gamma``."""

    def __init__(self, risk_map: RiskMap, gamma: float | None = None):
        self.risk_map = risk_map
        self.gamma = risk_map.config.gamma if gamma is None else float(gamma)

    @property
    def spec(self) -> GridSpec:
        return self.risk_map.spec

    @cached_property
    def mask(self) -> np.ndarray:
        m = self.risk_map.rho <= self.gamma
        m.flags.writeable = False
        return m

    def points_safe(self, points) -> np.ndarray:
        """Per-point safety of world points ``(M, 2)``; off-grid points are unsafe."""
        cells = self.spec.world_to_cell(points)
        ok = self.spec.in_bounds(cells)
        out = np.zeros(ok.shape, dtype=bool)
        out[ok] = self.mask[cells[ok, 1], cells[ok, 0]]
        return out

    def pose_safe(self, pose: Pose) -> bool:
        return bool(self.points_safe(np.array([[pose.x, pose.y]]))[0])


def to_world(u, pose: Pose) -> np.ndarray:
    """Robot-frame waypoints ``(..., N, 2)`` to world coordinates."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 2)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    x, y = u[..., 0], u[..., 1]
    return np.stack([pose.x + (c * x - s * y), pose.y + (s * x + c * y)], axis=-1)


def checked_points_batch(U, pose: Pose, resolution: float):
    """Checked points for a batch of sequences ``(K, N, 2)``.

    Returns ``(points, valid)`` with shapes ``(K, 1 + N*n_max, 2)`` and
    ``(K, 1 + N*n_max)``; segment ``i`` of sequence ``k`` contributes the
    points ``a + (j/n)(b - a)`` for ``j = 1..n`` with
    ``n = max(1, ceil(|b - a| / (0.5 * resolution)))``.
    """
    U = np.asarray(U, dtype=float)
    K, N = U.shape[0], U.shape[1]
    origin = np.broadcast_to(np.array([pose.x, pose.y], dtype=float), (K, 1, 2))
    if N == 0:
        return origin.copy(), np.ones((K, 1), dtype=bool)
    path = np.concatenate([origin, to_world(U, pose)], axis=1)
    a, b = path[:, :-1], path[:, 1:]
    d = b - a
    length = np.hypot(d[..., 0], d[..., 1])
    n = np.maximum(1, np.ceil(length / (0.5 * resolution))).astype(np.int64)
    j = np.arange(1, int(n.max()) + 1)
    frac = j / n[..., None]
    pts = a[..., None, :] + frac[..., None] * d[..., None, :]
    valid = j <= n[..., None]
    pts = np.concatenate([origin, pts.reshape(K, -1, 2)], axis=1)
    valid = np.concatenate([np.ones((K, 1), dtype=bool), valid.reshape(K, -1)], axis=1)
    return pts, valid


def checked_points(u, pose: Pose, resolution: float) -> np.ndarray:
    """World points tested by the safety check.

    The pose itself, then along each segment (starting at the pose) points
    spaced at most ``0.5 * resolution`` apart, ending on each waypoint.
    """
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    pts, valid = checked_points_batch(u[None], pose, resolution)
    return pts[0][valid[0]]


def is_safe_batch(safe_set: SafeSet, U, pose: Pose) -> np.ndarray:
    """``is_safe`` for each sequence of a batch ``(K, N, 2)``.

    Waypoints are tested first; segment points are generated only for the
    sequences whose waypoints all pass.
    """
    U = np.asarray(U, dtype=float)
    K, N = U.shape[0], U.shape[1]
    if not safe_set.pose_safe(pose):
        return np.zeros(K, dtype=bool)
    if N == 0:
        return np.ones(K, dtype=bool)
    W = to_world(U, pose)
    ok = safe_set.points_safe(W.reshape(-1, 2)).reshape(K, N).all(axis=1)
    live = np.flatnonzero(ok)
    if not len(live):
        return ok
    path = np.concatenate([np.broadcast_to([pose.x, pose.y], (len(live), 1, 2)), W[live]], axis=1)
    a = path[:, :-1].reshape(-1, 2)
    d = path[:, 1:].reshape(-1, 2) - a
    n = np.maximum(1, np.ceil(np.hypot(d[:, 0], d[:, 1]) / (0.5 * safe_set.spec.resolution))).astype(np.int64)
    seg = np.repeat(np.arange(len(n)), n)
    start = np.cumsum(n) - n
    j = np.arange(len(seg)) - start[seg] + 1
    pts = a[seg] + (j / n[seg])[:, None] * d[seg]
    bad = ~safe_set.points_safe(pts)
    seq_bad = np.zeros(len(live), dtype=bool)
    np.logical_or.at(seq_bad, seg[bad] // N, True)
    ok[live] = ~seq_bad
    return ok


def is_safe(safe_set: SafeSet, u, pose: Pose) -> bool:
    u = np.asarray(u, dtype=float).reshape(-1, 2)
    return bool(is_safe_batch(safe_set, u[None], pose)[0])


def hard_margin(safe_set: SafeSet, u, pose: Pose) -> float:
    """Largest ``rho(cell) - gamma`` over checked points; ``inf`` if any leaves the grid."""
    spec = safe_set.spec
    cells = spec.world_to_cell(checked_points(u, pose, spec.resolution))
    if not np.all(spec.in_bounds(cells)):
        return math.inf
    rho = safe_set.risk_map.rho[cells[:, 1], cells[:, 0]].astype(float)
    return float(rho.max() - safe_set.gamma)


# --- differentiable surrogate ----------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RiskSurrogate:
    """Smooth ``c_risk(u)`` with ``c_risk <= 0`` iff every checked point has risk <= gamma.

    Per point, ``s = margin * softplus((rho_interp - gamma) / margin) - margin*log 2``
    where ``rho_interp`` bilinearly interpolates cell-centre risk values; the
    points are combined with a mean-normalized log-sum-exp of width
    ``margin``. Off-grid risk is a constant above both ``gamma`` and the map
    maximum. Each segment is sampled at a fixed ``segment_samples`` points so
    the value is differentiable in the waypoints.
    """

    def __init__(self, risk_map: RiskMap, margin: float = 0.1, gamma: float | None = None,
                 segment_samples: int = 4):
        if margin <= 0:
            raise ValueError("margin must be > 0")
        self.risk_map = risk_map
        self.margin = float(margin)
        self.gamma = risk_map.config.gamma if gamma is None else float(gamma)
        self.segment_samples = int(segment_samples)
        rho = risk_map.rho.astype(float)
        self.outside = max(float(rho.max()), self.gamma) + 1.0
        self._padded = np.pad(rho, 1, constant_values=self.outside)

    def interp(self, points):
        """Bilinear risk and its gradient (per meter) at world points ``(M, 2)``."""
        spec = self.risk_map.spec
        pts = np.asarray(points, dtype=float)
        g = (pts - np.asarray(spec.origin)) / spec.resolution - 0.5 + 1.0  # padded cell-centre coords
        hi = np.array([spec.width + 1, spec.height + 1], dtype=float)
        clamped = (g < 0) | (g > hi)
        g = np.clip(g, 0.0, hi)
        i0 = np.minimum(np.floor(g).astype(np.int64), hi.astype(np.int64) - 1)
        f = g - i0
        P = self._padded
        x0, y0 = i0[:, 0], i0[:, 1]
        v00 = P[y0, x0]
        v10 = P[y0, x0 + 1]
        v01 = P[y0 + 1, x0]
        v11 = P[y0 + 1, x0 + 1]
        fx, fy = f[:, 0], f[:, 1]
        val = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11
        dgx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
        dgy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
        grad = np.stack([dgx, dgy], axis=-1) / spec.resolution
        grad[clamped] = 0.0
        return val, grad

    def _robot_frame_points(self, u):
        """Points along the robot-frame polyline and their waypoint weights."""
        n = len(u)
        m = self.segment_samples
        s = np.arange(1, m + 1) / m
        prev = np.vstack([np.zeros((1, 2)), u[:-1]]) if n else np.zeros((0, 2))
        q = (1 - s)[None, :, None] * prev[:, None, :] + s[None, :, None] * u[:, None, :]
        return np.vstack([np.zeros((1, 2)), q.reshape(-1, 2)]), s

    def __call__(self, u, pose: Pose):
        return self.value_and_grad(u, pose)

    def value_and_grad(self, u, pose: Pose):
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        n = len(u)
        q, s = self._robot_frame_points(u)
        R = pose.rotation()
        pts = pose.position + q @ R.T
        rho, drho = self.interp(pts)
        d = self.margin
        z = (rho - self.gamma) / d
        sp = d * _softplus(z) - d * LOG2
        a = sp / d
        amax = a.max()
        e = np.exp(a - amax)
        value = d * (amax + math.log(e.mean()))
        weights = e / e.sum()
        dpt = (weights * _sigmoid(z))[:, None] * drho  # d value / d world point
        dq = dpt @ R  # back to robot frame
        grad = np.zeros((n, 2))
        if n:
            dq_seg = dq[1:].reshape(n, self.segment_samples, 2)
            grad += np.einsum("k,nkc->nc", s, dq_seg)
            grad[:-1] += np.einsum("k,nkc->nc", 1 - s, dq_seg[1:])
        return float(value), grad


def c_risk(surrogate: RiskSurrogate, u, pose: Pose):
    return surrogate.value_and_grad(u, pose)
