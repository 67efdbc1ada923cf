import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import box_map, risk_map
from riskdiff.diffusion.data import N_WAYPOINTS
from riskdiff.expert import (
    DemoEpisode,
    NoPath,
    episode_windows,
    generate_demos,
    grid_search,
    load_dataset_dir,
    load_episode,
    make_dataset,
    plan_path,
    resample_waypoints,
    save_dataset_dir,
    save_episode,
    training_recipes,
)
from riskdiff.risk import CostParams, Pose, RiskConfig, SafeSet, build_risk_map, is_safe
from riskdiff.terrain import generate_terrain


def relaxation_costs(passable, start):
    """Shortest 8-connected costs by repeated whole-grid relaxation (Bellman-Ford style)."""
    H, W = passable.shape
    dist = np.full((H + 2, W + 2), np.inf)
    ok = np.zeros((H + 2, W + 2), dtype=bool)
    ok[1:-1, 1:-1] = passable
    dist[start[1] + 1, start[0] + 1] = 0.0
    while True:
        new = dist.copy()
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == dy == 0:
                    continue
                src = np.roll(np.roll(dist, dy, axis=0), dx, axis=1)  # value from cell (x - dx, y - dy)
                step = math.sqrt(2.0) if dx and dy else 1.0
                allowed = ok.copy()
                if dx and dy:  # no corner cutting: both orthogonal neighbours must be open
                    allowed &= np.roll(ok, dx, axis=1) & np.roll(ok, dy, axis=0)
                cand = np.where(allowed, src + step, np.inf)
                new = np.minimum(new, cand)
        new[~ok] = np.inf
        if np.array_equal(new, dist):
            return dist[1:-1, 1:-1]
        dist = new


def test_start_equals_goal_is_single_point():
    path = plan_path(box_map(size=10), 0.8, (0.55, 0.55), (0.52, 0.58))
    assert path.shape == (1, 2)
    assert np.allclose(path[0], [0.55, 0.55])


def test_path_through_wall_gap():
    rho = np.zeros((10, 10))
    rho[:, 5] = 2.0
    rho[7, 5] = 0.0  # the gap
    rm = risk_map(rho, resolution=1.0)
    cost, cells = grid_search(rho <= 0.8, (1, 2), (8, 2))
    assert (5, 7) in cells
    assert cost == pytest.approx(relaxation_costs(rho <= 0.8, (1, 2))[2, 8])
    path = plan_path(rm, 0.8, (1.5, 2.5), (8.5, 2.5))
    ss = SafeSet(rm)
    dense = np.concatenate([a + np.linspace(0, 1, 200)[:, None] * (b - a) for a, b in zip(path[:-1], path[1:])])
    assert ss.points_safe(dense).all()
    cells_hit = {tuple(c) for c in rm.spec.world_to_cell(dense)}
    assert (5, 7) in cells_hit


def test_enclosed_goal_has_no_path():
    rho = np.zeros((12, 12))
    rho[4:9, 4:9] = 2.0
    rho[5:8, 5:8] = 0.0
    with pytest.raises(NoPath):
        plan_path(risk_map(rho, resolution=1.0), 0.8, (1.5, 1.5), (6.5, 6.5))
    with pytest.raises(NoPath):
        plan_path(risk_map(rho, resolution=1.0), 0.8, (4.5, 4.5), (1.5, 1.5))


def test_planner_cost_matches_oracle_on_random_maps():
    rng = np.random.default_rng(0)
    compared = 0
    for _ in range(100):
        passable = rng.uniform(size=(20, 20)) > 0.3
        free = np.argwhere(passable)
        (sy, sx), (gy, gx) = free[rng.choice(len(free), 2, replace=False)]
        oracle = relaxation_costs(passable, (sx, sy))[gy, gx]
        if np.isinf(oracle):
            with pytest.raises(NoPath):
                grid_search(passable, (sx, sy), (gx, gy))
            continue
        cost, cells = grid_search(passable, (sx, sy), (gx, gy))
        assert cost == pytest.approx(oracle, abs=1e-9)
        assert all(passable[y, x] for x, y in cells)
        compared += 1
    assert compared > 50


def test_resample_straight_segment():
    out = resample_waypoints([[0.0, 0.0], [1.0, 0.0]])
    assert len(out) == 6
    assert np.allclose(np.diff(out[:, 0]), 0.2) and np.allclose(out[:, 1], 0.0)


def test_resample_single_point():
    assert np.array_equal(resample_waypoints([[3.0, 4.0]]), [[3.0, 4.0]])


def test_resample_places_sample_at_sharp_corner():
    out = resample_waypoints([[0.0, 0.0], [0.5, 0.0], [0.5, 0.7]], angle_threshold=math.radians(30))
    assert np.any(np.all(np.isclose(out, [0.5, 0.0]), axis=1))
    # a gentle bend gets no extra sample
    gentle = resample_waypoints([[0.0, 0.0], [0.5, 0.0], [1.0, 0.1]], angle_threshold=math.radians(30))
    assert not np.any(np.all(np.isclose(gentle, [0.5, 0.0]), axis=1))


polylines = st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(polylines)
def test_resample_spacing_and_endpoints(pts):
    pts = np.array(pts)
    out = resample_waypoints(pts)
    assert np.array_equal(out[0], pts[0])
    assert np.allclose(out[-1], pts[-1])
    if len(out) > 1:
        assert np.hypot(*np.diff(out, axis=0).T).max() <= 0.2 + 1e-6


def straight_episode(n_points, y=1.0):
    wp = np.column_stack([0.2 * np.arange(n_points), np.full(n_points, y)])
    return DemoEpisode(0, wp[0], wp[-1], wp[[0, -1]], wp, np.zeros(n_points), np.zeros((n_points, 3)))


def test_window_count_arithmetic():
    assert len(episode_windows(straight_episode(N_WAYPOINTS + 1))[1]) == 2
    lengths, stride = [3, 8, 9, 20, 31], 3
    eps = [straight_episode(n) for n in lengths]
    ds = make_dataset(eps, N_WAYPOINTS, stride)
    expected = sum((n - N_WAYPOINTS) // stride + 1 for n in lengths if n >= N_WAYPOINTS)
    assert len(ds) == expected


def test_windows_are_robot_frame_offsets():
    wp = np.array([[0.0, 0.0], [0.0, 0.2], [0.0, 0.4]])
    ep = DemoEpisode(0, wp[0], wp[-1], wp, wp, np.full(3, math.pi / 2), np.zeros((3, 3)))
    _, acts = episode_windows(ep, n_waypoints=2)
    assert np.allclose(acts[0], [[0.2, 0.0], [0.4, 0.0]])


def test_identical_episodes_normalize_to_zero_mean_unit_scale():
    ds = make_dataset([straight_episode(12) for _ in range(4)])
    z = ds.action_norm.normalize(ds.actions.reshape(len(ds), -1))
    flat = ds.actions.reshape(len(ds), -1)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-9)
    assert np.allclose(ds.action_norm.mean, flat.mean(axis=0))
    std = flat.std(axis=0)
    assert np.allclose(ds.action_norm.scale, np.where(std > 1e-6, std, 1.0))
    live = std > 1e-6
    assert np.allclose(z[:, live].std(axis=0), 1.0)


def test_empty_and_short_corpora():
    with pytest.raises(ValueError):
        make_dataset([])
    with pytest.raises(ValueError):
        make_dataset([straight_episode(3)])


@pytest.fixture(scope="module")
def demos():
    recipes = training_recipes(3, seed=4)
    return recipes, generate_demos(recipes, 9, seed=2)


def test_demonstrations_are_safe(demos):
    recipes, episodes = demos
    cfg = RiskConfig()
    maps = [build_risk_map(generate_terrain(r), CostParams(), cfg, seed=r.seed) for r in recipes]
    assert {h.kind for r in recipes for h in r.hazards} <= {"ramp", "step", "rock-field"}
    for ep in episodes:
        ss = SafeSet(maps[ep.recipe_index])
        assert ss.points_safe(ep.waypoints).all()
        ctxs, acts = episode_windows(ep)
        for b, u in enumerate(acts):
            pose = Pose(ep.waypoints[b, 0], ep.waypoints[b, 1], ep.headings[b])
            assert is_safe(ss, u, pose)


def test_episode_and_dataset_files_round_trip(demos, tmp_path):
    _, episodes = demos
    save_episode(episodes[0], tmp_path / "e.ep")
    back = load_episode(tmp_path / "e.ep")
    for name in ("start", "goal", "path", "waypoints", "headings", "contexts"):
        assert np.array_equal(getattr(back, name), getattr(episodes[0], name))
    data = (tmp_path / "e.ep").read_bytes()
    (tmp_path / "cut.ep").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="payload"):
        load_episode(tmp_path / "cut.ep")

    ds = save_dataset_dir(episodes, tmp_path / "ds", stride=2)
    again = load_dataset_dir(tmp_path / "ds")
    assert np.array_equal(ds.actions, again.actions) and np.array_equal(ds.contexts, again.contexts)


def test_generation_is_deterministic(demos):
    recipes, episodes = demos
    again = generate_demos(recipes, 9, seed=2)
    assert all(np.array_equal(a.path, b.path) for a, b in zip(episodes, again))
