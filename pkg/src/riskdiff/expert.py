"""Safe demonstrations for training the diffusion policy.

A uniform-cost grid planner finds shortest 8-connected paths through the
safe set; paths are resampled at 0.2 m and cut into sliding windows of
robot-frame waypoints.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffusion.data import CONTEXT_DIM, N_WAYPOINTS, Dataset, build_context
from .risk import CostParams, Pose, RiskConfig, RiskMap, build_risk_map
from .terrain import TerrainRecipe, generate_terrain, random_hazard

log = logging.getLogger(__name__)

TRAINING_HAZARDS = ("ramp", "step", "rock-field")
WAYPOINT_SPACING = 0.2
EPISODE_MAGIC = b"RDEPIS"
EPISODE_VERSION = 1

_MOVES = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]


class NoPath(RuntimeError):
    pass


# --- planning --------------------------------------------------------------------


def _segment_clear(a, b, mask, spec) -> bool:
    """True if every cell the segment passes through is in ``mask``.

    Checks one point inside each traversed cell (between consecutive grid
    line crossings) plus the half-resolution points used by ``is_safe``.
    """
    d = b - a
    length = float(np.hypot(*d))
    n = max(1, int(math.ceil(length / (0.5 * spec.resolution))))
    ts = [np.arange(n + 1) / n]
    for axis in range(2):
        if abs(d[axis]) > 1e-12:
            lo, hi = sorted((a[axis], b[axis]))
            o = spec.origin[axis]
            k = np.arange(math.floor((lo - o) / spec.resolution), math.ceil((hi - o) / spec.resolution) + 1)
            t = (o + k * spec.resolution - a[axis]) / d[axis]
            ts.append(t[(t > 0) & (t < 1)])
    t = np.unique(np.concatenate(ts))
    t = np.concatenate([t, 0.5 * (t[:-1] + t[1:])])
    cells = spec.world_to_cell(a + t[:, None] * d)
    if not np.all(spec.in_bounds(cells)):
        return False
    return bool(np.all(mask[cells[:, 1], cells[:, 0]]))


def grid_search(passable: np.ndarray, start_cell, goal_cell, penalty: np.ndarray | None = None):
    """Dijkstra over 8-connected cells; returns (cost, cells) or raises NoPath.

    Steps cost 1 (straight) or sqrt(2) (diagonal), plus ``penalty`` of the
    entered cell. Diagonals may not cut a blocked corner. Ties break on
    (cost, then cell (ix, iy)).
    """
    H, W = passable.shape
    sx, sy = start_cell
    gx, gy = goal_cell
    if not (passable[sy, sx] and passable[gy, gx]):
        raise NoPath("start or goal cell is not passable")
    dist = np.full((H, W), np.inf)
    parent = {}
    dist[sy, sx] = 0.0
    heap = [(0.0, sx, sy)]
    done = np.zeros((H, W), dtype=bool)
    while heap:
        d, x, y = heapq.heappop(heap)
        if done[y, x]:
            continue
        done[y, x] = True
        if (x, y) == (gx, gy):
            break
        for dx, dy in _MOVES:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < W and 0 <= ny < H) or not passable[ny, nx] or done[ny, nx]:
                continue
            if dx and dy and not (passable[y, nx] and passable[ny, x]):
                continue
            step = math.sqrt(2.0) if dx and dy else 1.0
            if penalty is not None:
                step += penalty[ny, nx]
            nd = d + step
            if nd < dist[ny, nx]:
                dist[ny, nx] = nd
                parent[(nx, ny)] = (x, y)
                heapq.heappush(heap, (nd, nx, ny))
    if not np.isfinite(dist[gy, gx]):
        raise NoPath(f"goal cell {goal_cell} unreachable from {start_cell}")
    cells = [(gx, gy)]
    while cells[-1] != (sx, sy):
        cells.append(parent[cells[-1]])
    return float(dist[gy, gx]), cells[::-1]


def plan_path(risk_map: RiskMap, gamma: float, start, goal, clearance: float = 0.0,
              clearance_penalty: float = 2.0) -> np.ndarray:
    """Shortest safe polyline from ``start`` to ``goal`` (world meters), shape (M, 2).

    Cells with ``rho > gamma`` are impassable. With ``clearance > 0``, safe
    cells within that distance of an unsafe cell cost extra to enter and
    shortcut segments must avoid them. Redundant vertices are removed
    greedily, re-checking each shortcut against the safe set.
    """
    spec = risk_map.spec
    safe = risk_map.rho <= gamma
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    sc = tuple(int(v) for v in spec.world_to_cell(start))
    gc = tuple(int(v) for v in spec.world_to_cell(goal))
    for name, c in (("start", sc), ("goal", gc)):
        if not spec.in_bounds(np.array(c)) or not safe[c[1], c[0]]:
            raise NoPath(f"{name} {c} is not a safe cell")
    if sc == gc:
        return start[None, :].copy()

    penalty = None
    clear = safe
    if clearance > 0:
        r = int(math.ceil(clearance / spec.resolution))
        near = ndimage.binary_dilation(~safe, structure=np.ones((2 * r + 1, 2 * r + 1), bool))
        clear = safe & ~near
        penalty = np.where(near, clearance_penalty, 0.0)
    _, cells = grid_search(safe, sc, gc, penalty)

    pts = spec.cell_center(np.array([c[0] for c in cells]), np.array([c[1] for c in cells]))
    pts[0], pts[-1] = start, goal
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _segment_clear(pts[i], pts[j], clear, spec):
            j -= 1
        out.append(pts[j])
        i = j
    return np.array(out)


def resample_waypoints(polyline, spacing: float = WAYPOINT_SPACING,
                       angle_threshold: float = math.radians(30.0)) -> np.ndarray:
    """Arc-length resampling with extra samples at sharp heading changes.

    Consecutive outputs are at most ``spacing`` apart; every vertex whose
    heading change exceeds ``angle_threshold`` is emitted as a sample.
    """
    pts = np.asarray(polyline, dtype=float).reshape(-1, 2)
    keep = np.concatenate([[True], np.any(np.abs(np.diff(pts, axis=0)) > 1e-12, axis=1)])
    pts = pts[keep]
    if len(pts) == 1:
        return pts.copy()
    seg = np.diff(pts, axis=0)
    heading = np.arctan2(seg[:, 1], seg[:, 0])
    turn = np.abs((np.diff(heading) + np.pi) % (2 * np.pi) - np.pi)
    breaks = [0] + [i + 1 for i in np.flatnonzero(turn > angle_threshold)] + [len(pts) - 1]

    out = [pts[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        run = pts[a:b + 1]
        lengths = np.hypot(*np.diff(run, axis=0).T)
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        total = cum[-1]
        s = np.arange(1, int(math.floor(total / spacing)) + 2) * spacing
        s = s[s < total - 1e-9]
        for si in s:
            k = min(int(np.searchsorted(cum, si, side="right")) - 1, len(run) - 2)
            f = (si - cum[k]) / lengths[k]
            out.append(run[k] + f * (run[k + 1] - run[k]))
        out.append(run[-1])
    return np.array(out)


# --- episodes and datasets -----------------------------------------------------------


@dataclass
class DemoEpisode:
    """One planned demonstration and its per-waypoint contexts.

    ``contexts[b]`` is the conditioning vector at base pose
    ``(waypoints[b], headings[b])``.
    """

    recipe_index: int
    start: np.ndarray
    goal: np.ndarray
    path: np.ndarray
    waypoints: np.ndarray
    headings: np.ndarray
    contexts: np.ndarray


def path_headings(waypoints) -> np.ndarray:
    pts = np.asarray(waypoints, dtype=float)
    n = len(pts)
    h = np.zeros(n)
    last = 0.0
    for i in range(n):
        j = i + 1
        if j < n and np.hypot(*(pts[j] - pts[i])) > 1e-12:
            last = math.atan2(pts[j, 1] - pts[i, 1], pts[j, 0] - pts[i, 0])
        h[i] = last
    # a stationary prefix inherits the first real heading
    moving = [i for i in range(n - 1) if np.hypot(*(pts[i + 1] - pts[i])) > 1e-12]
    if moving:
        h[:moving[0]] = h[moving[0]]
    return h


def make_episode(recipe_index: int, risk_map: RiskMap, start, goal, path) -> DemoEpisode:
    waypoints = resample_waypoints(path)
    headings = path_headings(waypoints)
    goal = np.asarray(goal, dtype=float)
    contexts = np.stack([build_context(risk_map, Pose(p[0], p[1], h), goal) for p, h in zip(waypoints, headings)])
    return DemoEpisode(recipe_index, np.asarray(start, float), goal, np.asarray(path, float), waypoints,
                       headings, contexts)


def episode_windows(episode: DemoEpisode, n_waypoints: int = N_WAYPOINTS, stride: int = 1):
    """Training pairs from one episode: base indices ``0, stride, ...`` up to ``L - N_u``.

    Waypoints past the path end repeat the final point (the robot stops at
    the goal).
    """
    pts = episode.waypoints
    L = len(pts)
    if L < n_waypoints:
        return np.zeros((0, episode.contexts.shape[1])), np.zeros((0, n_waypoints, 2))
    padded = np.vstack([pts, np.repeat(pts[-1:], n_waypoints, axis=0)])
    ctxs, acts = [], []
    for b in range(0, L - n_waypoints + 1, stride):
        pose = Pose(pts[b, 0], pts[b, 1], episode.headings[b])
        rel = (padded[b + 1:b + 1 + n_waypoints] - pose.position) @ pose.rotation()
        ctxs.append(episode.contexts[b])
        acts.append(rel)
    return np.array(ctxs), np.array(acts)


def make_dataset(episodes, n_waypoints: int = N_WAYPOINTS, stride: int = 1) -> Dataset:
    if not episodes:
        raise ValueError("no episodes")
    ctxs, acts = [], []
    skipped = 0
    for ep in episodes:
        c, a = episode_windows(ep, n_waypoints, stride)
        if len(a) == 0:
            skipped += 1
            continue
        ctxs.append(c)
        acts.append(a)
    if skipped:
        log.warning("skipped %d episode(s) shorter than %d waypoints", skipped, n_waypoints)
    if not acts:
        raise ValueError("every episode is shorter than N_u")
    return Dataset.from_pairs(np.concatenate(ctxs), np.concatenate(acts))


# --- generation ----------------------------------------------------------------------


def training_recipes(n: int, seed: int, kinds=TRAINING_HAZARDS, hazards_per_map=(2, 4),
                     size: int = 64, resolution: float = 0.1) -> list[TerrainRecipe]:
    """Random maps containing only the given hazard kinds."""
    rng = np.random.default_rng(seed)
    recipes = []
    for i in range(n):
        spec = TerrainRecipe(width=size, height=size, resolution=resolution).spec
        k = int(rng.integers(hazards_per_map[0], hazards_per_map[1] + 1))
        hz = tuple(random_hazard(rng, str(rng.choice(kinds)), spec, margin=0.2) for _ in range(k))
        recipes.append(TerrainRecipe(width=size, height=size, resolution=resolution,
                                     seed=int(rng.integers(2**31)), hazards=hz))
    return recipes


def random_safe_point(rng, risk_map: RiskMap, gamma: float, margin: float, clear: np.ndarray | None = None):
    spec = risk_map.spec
    xmin, xmax, ymin, ymax = spec.extent
    mask = risk_map.rho <= gamma if clear is None else clear
    for _ in range(1000):
        p = np.array([rng.uniform(xmin + margin, xmax - margin), rng.uniform(ymin + margin, ymax - margin)])
        c = spec.world_to_cell(p)
        if mask[c[1], c[0]]:
            return p
    raise RuntimeError("could not find a safe point")


def generate_demos(recipes, n_episodes: int, seed: int, cost_params: CostParams | None = None,
                   risk_config: RiskConfig | None = None, clearance: float = 0.15,
                   min_distance: float = 2.0, margin: float = 0.6) -> list[DemoEpisode]:
    """Plan ``n_episodes`` safe demonstrations, cycling over ``recipes``."""
    cost_params = cost_params or CostParams()
    risk_config = risk_config or RiskConfig()
    gamma = risk_config.gamma
    maps = {}
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(n_episodes):
        idx = i % len(recipes)
        if idx not in maps:
            recipe = recipes[idx]
            maps[idx] = build_risk_map(generate_terrain(recipe), cost_params, risk_config, seed=recipe.seed)
        rm = maps[idx]
        r = int(math.ceil(clearance / rm.spec.resolution))
        clear = (rm.rho <= gamma) & ~ndimage.binary_dilation(rm.rho > gamma, np.ones((2 * r + 1,) * 2, bool))
        for _ in range(100):
            start = random_safe_point(rng, rm, gamma, margin, clear)
            goal = random_safe_point(rng, rm, gamma, margin, clear)
            if np.hypot(*(goal - start)) < min_distance:
                continue
            try:
                path = plan_path(rm, gamma, start, goal, clearance=clearance)
            except NoPath:
                continue
            episodes.append(make_episode(idx, rm, start, goal, path))
            break
        else:
            raise RuntimeError(f"no feasible demonstration on recipe {idx}")
    return episodes


# --- dataset directory ---------------------------------------------------------------


def save_episode(ep: DemoEpisode, path) -> None:
    """Binary: magic | u32 version | u32 header length | JSON header | float64 arrays."""
    header = {
        "recipe_index": ep.recipe_index,
        "start": ep.start.tolist(),
        "goal": ep.goal.tolist(),
        "n_path": len(ep.path),
        "n_points": len(ep.waypoints),
        "context_dim": ep.contexts.shape[1],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(EPISODE_MAGIC)
        fh.write(struct.pack("<2I", EPISODE_VERSION, len(hb)))
        fh.write(hb)
        for arr in (ep.path, ep.waypoints, ep.headings, ep.contexts):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_episode(path) -> DemoEpisode:
    data = Path(path).read_bytes()
    if not data.startswith(EPISODE_MAGIC):
        raise ValueError(f"{path}: not an episode file")
    off = len(EPISODE_MAGIC)
    version, hlen = struct.unpack_from("<2I", data, off)
    if version != EPISODE_VERSION:
        raise ValueError(f"{path}: unsupported episode version {version}")
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    n_path, n, c = header["n_path"], header["n_points"], header["context_dim"]
    sizes = [(n_path, 2), (n, 2), (n,), (n, c)]
    need = sum(int(np.prod(s)) for s in sizes) * 8
    if len(data) - off != need:
        raise ValueError(f"{path}: payload is {len(data) - off} bytes, expected {need}")
    arrays = []
    for shape in sizes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy())
        off += count * 8
    return DemoEpisode(header["recipe_index"], np.array(header["start"]), np.array(header["goal"]), *arrays)


def save_dataset_dir(episodes, out_dir, n_waypoints: int = N_WAYPOINTS, stride: int = 1,
                     extra: dict | None = None) -> Dataset:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.ep"
        save_episode(ep, out / name)
        files.append(name)
    ds = make_dataset(episodes, n_waypoints, stride)
    stats = {
        "schema_version": 1,
        "n_waypoints": n_waypoints,
        "stride": stride,
        "context_dim": CONTEXT_DIM,
        "episodes": files,
        "pairs": len(ds),
        "action_mean": ds.action_norm.mean.tolist(),
        "action_scale": ds.action_norm.scale.tolist(),
        "context_mean": ds.context_norm.mean.tolist(),
        "context_scale": ds.context_norm.scale.tolist(),
    }
    stats.update(extra or {})
    (out / "dataset.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return ds


def load_dataset_dir(data_dir) -> Dataset:
    d = Path(data_dir)
    meta = json.loads((d / "dataset.json").read_text())
    episodes = [load_episode(d / f) for f in meta["episodes"]]
    return make_dataset(episodes, meta["n_waypoints"], meta["stride"])
