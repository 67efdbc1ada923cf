"""Closed-loop episodes and Goal Success / Safety Failure metrics."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import guidance as G
from .diffusion.data import build_context
from .diffusion.model import DenoiserParams
from .diffusion.sampler import RiskGuide, sample
from .diffusion.schedule import NoiseSchedule
from .expert import NoPath, TRAINING_HAZARDS, plan_path
from .risk import (
    CostParams,
    Pose,
    RiskConfig,
    RiskMap,
    RiskSurrogate,
    SafeSet,
    build_risk_map,
    checked_points,
    is_safe,
    to_world,
)
from .terrain import Hazard, TerrainRecipe, generate_terrain, random_hazard


class Outcome(str, Enum):
    GOAL = "GoalSuccess"
    SAFETY = "SafetyFailure"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class EpisodeConfig:
    recipe: TerrainRecipe
    start: Pose
    goal: tuple[float, float]
    goal_tolerance: float = 0.3
    max_cycles: int = 20
    replan_horizon: int = 4
    seed: int = 0
    candidates: int = 8
    perception_exclude: tuple[str, ...] = ("pit",)

    def validate(self, n_waypoints: int) -> None:
        if self.goal_tolerance <= 0:
            raise ValueError("goal_tolerance must be > 0")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")
        if not 1 <= self.replan_horizon <= n_waypoints:
            raise ValueError(f"replan_horizon must lie in [1, {n_waypoints}]")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe.to_dict(),
            "start": list(self.start),
            "goal": list(self.goal),
            "goal_tolerance": self.goal_tolerance,
            "max_cycles": self.max_cycles,
            "replan_horizon": self.replan_horizon,
            "seed": self.seed,
            "candidates": self.candidates,
            "perception_exclude": list(self.perception_exclude),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        d["recipe"] = TerrainRecipe.from_dict(d["recipe"])
        d["start"] = Pose(*d["start"])
        d["goal"] = tuple(d["goal"])
        if "perception_exclude" in d:
            d["perception_exclude"] = tuple(d["perception_exclude"])
        return cls(**d)


@dataclass(frozen=True)
class Method:
    name: str
    guidance: object

    @property
    def risk_aware(self) -> bool:
        return not isinstance(self.guidance, G.Unguided)


def standard_methods(T: int, eta: float = 5.0, **projection_kw) -> dict[str, Method]:
    return {
        "vanilla": Method("vanilla", G.Unguided()),
        "classifier": Method("classifier", G.Classifier(eta)),
        "filter": Method("filter", G.Filter()),
        "projection": Method("projection", G.Projection.for_schedule(T, **projection_kw)),
    }


@dataclass
class EpisodeMaps:
    """Ground-truth risk (System 2, safety accounting) and the policy's perception."""

    truth: RiskMap
    perception: RiskMap
    safe_set: SafeSet
    surrogate: RiskSurrogate


def episode_maps(config: EpisodeConfig, risk_config: RiskConfig, cost_params: CostParams | None = None,
                 margin: float = 0.1) -> EpisodeMaps:
    cost_params = cost_params or CostParams()
    seed = config.recipe.seed
    truth = build_risk_map(generate_terrain(config.recipe), cost_params, risk_config, seed=seed)
    if config.perception_exclude and any(h.kind in config.perception_exclude for h in config.recipe.hazards):
        seen = config.recipe.without(config.perception_exclude)
        perception = build_risk_map(generate_terrain(seen), cost_params, risk_config, seed=seed)
    else:
        perception = truth
    return EpisodeMaps(truth, perception, SafeSet(truth), RiskSurrogate(truth, margin=margin))


@dataclass
class EpisodeResult:
    outcome: Outcome
    poses: np.ndarray  # (K, 3) executed (x, y, theta), start included
    actions: list = field(default_factory=list)  # chosen robot-frame sequence per cycle
    cycles: int = 0
    path_length: float = 0.0


def select_candidate(candidates, pose: Pose, goal, safe_set: SafeSet | None):
    """Index of the candidate whose last waypoint is nearest the goal.

    With a safe set, safe candidates are preferred when any exist.
    """
    goal = np.asarray(goal, dtype=float)

    def end(u):
        return to_world(u, pose)[-1] if len(u) else pose.position

    dists = np.array([np.hypot(*(end(u) - goal)) for u in candidates])
    if safe_set is not None:
        safe = np.array([is_safe(safe_set, u, pose) for u in candidates])
        if safe.any():
            dists = np.where(safe, dists, np.inf)
    return int(np.argmin(dists))


def run_episode(config: EpisodeConfig, params: DenoiserParams, method: Method, risk_config: RiskConfig,
                schedule: NoiseSchedule | None = None, cost_params: CostParams | None = None,
                maps: EpisodeMaps | None = None) -> EpisodeResult:
    """Replan-and-execute loop with an ideal waypoint tracker.

    The robot moves through exactly the points the safety check samples
    (spacing <= half a cell), so execution is judged on the same points
    the guidance certified.
    """
    schedule = schedule or NoiseSchedule.linear(params.T)
    config.validate(params.n_waypoints)
    maps = maps or episode_maps(config, risk_config, cost_params)
    safe_set = maps.safe_set
    goal = np.asarray(config.goal, dtype=float)
    pose = Pose(*config.start)
    if not safe_set.pose_safe(pose):
        raise ValueError(f"start pose ({pose.x}, {pose.y}) is not safe")
    poses = [tuple(pose)]
    actions = []
    length = 0.0
    res = safe_set.spec.resolution

    def done(outcome, cycles):
        return EpisodeResult(outcome, np.array(poses), actions, cycles, length)

    if np.hypot(*(pose.position - goal)) <= config.goal_tolerance:
        return done(Outcome.GOAL, 0)

    for cycle in range(1, config.max_cycles + 1):
        ctx = build_context(maps.perception, pose, goal)
        guide = RiskGuide(safe_set, maps.surrogate, pose)
        rng = np.random.default_rng([config.seed, cycle])
        cands = sample(params, ctx, schedule, method.guidance, rng, config.candidates, guide=guide)
        chosen = cands[select_candidate(cands, pose, goal, safe_set if method.risk_aware else None)]
        actions.append(chosen)
        execute = chosen[:config.replan_horizon]
        pts = checked_points(execute, pose, res)[1:]
        heading = pose.theta
        prev = pose.position
        for p in pts:
            step = float(np.hypot(*(p - prev)))
            if step > 1e-12:
                heading = math.atan2(p[1] - prev[1], p[0] - prev[0])
            length += step
            prev = p
            poses.append((float(p[0]), float(p[1]), heading))
            if not safe_set.points_safe(p[None, :])[0]:
                return done(Outcome.SAFETY, cycle)
            if np.hypot(*(p - goal)) <= config.goal_tolerance:
                return done(Outcome.GOAL, cycle)
        pose = Pose(float(prev[0]), float(prev[1]), heading)
    return done(Outcome.TIMEOUT, config.max_cycles)


def recheck_safety(result: EpisodeResult, safe_set: SafeSet) -> bool:
    """True iff some logged pose lies in an unsafe (or off-grid) cell."""
    return not bool(np.all(safe_set.points_safe(result.poses[:, :2])))


# --- suites ---------------------------------------------------------------------------


def ood_suite(count: int, seed: int, size: int = 64, resolution: float = 0.1, pits=(1, 2),
              extra_hazards=(0, 2), **episode_kw) -> list[EpisodeConfig]:
    """Episodes crossing the map with pits (unseen in training) on the direct route.

    Every episode has a safe start and goal and a safe route between them
    under the true risk map.
    """
    rng = np.random.default_rng(seed)
    risk_config = episode_kw.pop("risk_config", RiskConfig())
    cost_params = episode_kw.pop("cost_params", CostParams())
    base = TerrainRecipe(width=size, height=size, resolution=resolution)
    spec = base.spec
    xmin, xmax, ymin, ymax = spec.extent
    suite = []
    while len(suite) < count:
        start = np.array([xmin + 0.8, rng.uniform(ymin + 1.5, ymax - 1.5)])
        goal = np.array([xmax - 0.8, rng.uniform(ymin + 1.5, ymax - 1.5)])
        direction = (goal - start) / np.hypot(*(goal - start))
        normal = np.array([-direction[1], direction[0]])
        n_pits = int(rng.integers(pits[0], pits[1] + 1))
        fracs = np.sort(rng.uniform(0.3, 0.7, size=n_pits)) if n_pits > 1 else rng.uniform(0.4, 0.6, size=1)
        hazards = []
        for f in fracs:
            c = start + f * (goal - start) + rng.normal(0.0, 0.1) * normal
            r = float(rng.uniform(0.45, 0.7))
            hazards.append(Hazard("pit", float(c[0]), float(c[1]), r, 0.4))
        for _ in range(int(rng.integers(extra_hazards[0], extra_hazards[1] + 1))):
            h = random_hazard(rng, str(rng.choice(TRAINING_HAZARDS)), spec, margin=0.2)
            if min(np.hypot(h.x - start[0], h.y - start[1]), np.hypot(h.x - goal[0], h.y - goal[1])) > h.size + 0.8:
                hazards.append(h)
        recipe = TerrainRecipe(width=size, height=size, resolution=resolution,
                               seed=int(rng.integers(2**31)), hazards=tuple(hazards))
        try:
            recipe.validate()
        except ValueError:
            continue
        theta = math.atan2(direction[1], direction[0])
        cfg = EpisodeConfig(recipe, Pose(float(start[0]), float(start[1]), theta),
                            (float(goal[0]), float(goal[1])), seed=int(rng.integers(2**31)), **episode_kw)
        maps = episode_maps(cfg, risk_config, cost_params)
        try:
            plan_path(maps.truth, risk_config.gamma, start, goal)
        except NoPath:
            continue
        suite.append(cfg)
    return suite


# --- evaluation -------------------------------------------------------------------------


@dataclass
class MethodMetrics:
    method: str
    episodes: int
    goal_success: float  # percent
    safety_failure: float
    timeout: float


@dataclass
class MetricsReport:
    methods: list[MethodMetrics]
    rows: list[dict]

    def by_method(self) -> dict[str, MethodMetrics]:
        return {m.method: m for m in self.methods}

    def table(self) -> str:
        lines = [f"{'method':<12} {'episodes':>8} {'GS %':>8} {'SF %':>8} {'timeout %':>10}"]
        for m in self.methods:
            lines.append(f"{m.method:<12} {m.episodes:>8d} {m.goal_success:>8.2f} {m.safety_failure:>8.2f} "
                         f"{m.timeout:>10.2f}")
        return "\n".join(lines)

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "method", "outcome", "cycles", "path_length"])
        for r in self.rows:
            w.writerow([r["episode"], r["method"], r["outcome"], r["cycles"], f"{r['path_length']:.6f}"])
        return buf.getvalue()

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "episodes", "goal_success_pct", "safety_failure_pct", "timeout_pct"])
        for m in self.methods:
            w.writerow([m.method, m.episodes, f"{m.goal_success:.4f}", f"{m.safety_failure:.4f}",
                        f"{m.timeout:.4f}"])
        return buf.getvalue()


def summarize(rows, method_names) -> MetricsReport:
    out = []
    for name in method_names:
        mine = [r for r in rows if r["method"] == name]
        n = len(mine)

        def pct(outcome):
            return 100.0 * sum(r["outcome"] == outcome.value for r in mine) / n if n else 0.0

        out.append(MethodMetrics(name, n, pct(Outcome.GOAL), pct(Outcome.SAFETY), pct(Outcome.TIMEOUT)))
    return MetricsReport(out, rows)


def _run_one(args):
    index, config, params, methods, risk_config, schedule, cost_params = args
    maps = episode_maps(config, risk_config, cost_params)
    rows = []
    for m in methods:
        res = run_episode(config, params, m, risk_config, schedule, cost_params, maps=maps)
        rows.append({"episode": index, "method": m.name, "outcome": res.outcome.value,
                     "cycles": res.cycles, "path_length": res.path_length})
    return rows


def evaluate(methods, suite, params: DenoiserParams, risk_config: RiskConfig,
             schedule: NoiseSchedule | None = None, cost_params: CostParams | None = None,
             workers: int = 1) -> MetricsReport:
    """Run every (method, episode) pair; episodes keep their own seeds across methods."""
    if not suite:
        raise ValueError("empty evaluation suite")
    schedule = schedule or NoiseSchedule.linear(params.T)
    methods = list(methods)
    jobs = [(i, cfg, params, methods, risk_config, schedule, cost_params) for i, cfg in enumerate(suite)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_one, jobs))
    else:
        chunks = [_run_one(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    return summarize(rows, [m.name for m in methods])
