import numpy as np
import pytest

from helpers import random_policy
from riskdiff import guidance as G
from riskdiff.diffusion.data import CONTEXT_DIM
from riskdiff.diffusion.schedule import NoiseSchedule
from riskdiff.risk import Pose, RiskConfig, SafeSet
from riskdiff.sim import (
    EpisodeConfig,
    Method,
    Outcome,
    episode_maps,
    evaluate,
    ood_suite,
    recheck_safety,
    run_episode,
    select_candidate,
    standard_methods,
)
from riskdiff.terrain import Hazard, TerrainRecipe

SCHEDULE = NoiseSchedule.linear(10)
RISK = RiskConfig(mc_samples=8)


@pytest.fixture(scope="module")
def params():
    return random_policy(ctx_dim=CONTEXT_DIM, T=10, scale=0.3, seed=5)


@pytest.fixture(scope="module")
def small_suite():
    return ood_suite(3, seed=1, size=40, risk_config=RISK, max_cycles=6, candidates=4)


def methods():
    return list(standard_methods(10, eta=5.0).values())


def test_goal_at_start_succeeds_immediately(params):
    cfg = EpisodeConfig(TerrainRecipe(width=30, height=30), Pose(1.5, 1.5), (1.6, 1.5))
    for m in methods():
        res = run_episode(cfg, params, m, RISK, SCHEDULE)
        assert res.outcome is Outcome.GOAL and res.cycles == 0
    report = evaluate(methods(), [cfg], params, RISK, SCHEDULE)
    assert all(m.goal_success == 100.0 for m in report.methods)


def test_config_validation(params):
    base = EpisodeConfig(TerrainRecipe(width=30, height=30), Pose(1.5, 1.5), (2.5, 1.5))
    for kw in ({"goal_tolerance": 0.0}, {"max_cycles": 0}, {"replan_horizon": 0}, {"replan_horizon": 9},
               {"candidates": 0}):
        bad = EpisodeConfig(**{**base.__dict__, **kw})
        with pytest.raises(ValueError):
            run_episode(bad, params, methods()[0], RISK, SCHEDULE)


def test_unsafe_start_is_a_config_error(params):
    recipe = TerrainRecipe(width=30, height=30, hazards=(Hazard("step", 1.5, 1.5, 0.4, 0.5),))
    maps = episode_maps(EpisodeConfig(recipe, Pose(0.5, 0.5), (2.8, 2.8)), RISK)
    iy, ix = np.argwhere(~maps.safe_set.mask)[0]
    start = Pose(*maps.safe_set.spec.cell_center(ix, iy))
    cfg = EpisodeConfig(recipe, start, (2.8, 2.8))
    with pytest.raises(ValueError, match="not safe"):
        run_episode(cfg, params, methods()[0], RISK, SCHEDULE)


def test_config_dict_round_trip(small_suite):
    for cfg in small_suite:
        assert EpisodeConfig.from_dict(cfg.to_dict()) == cfg


def test_suite_has_pits_and_safe_starts(small_suite):
    for cfg in small_suite:
        assert any(h.kind == "pit" for h in cfg.recipe.hazards)
        maps = episode_maps(cfg, RISK)
        assert maps.safe_set.pose_safe(cfg.start)
        # the policy's perception omits the pits, the truth includes them
        assert np.sum(maps.truth.rho > RISK.gamma) > np.sum(maps.perception.rho > RISK.gamma)


def test_episodes_are_deterministic_and_consistent(params, small_suite):
    for cfg in small_suite:
        maps = episode_maps(cfg, RISK)
        for m in methods():
            a = run_episode(cfg, params, m, RISK, SCHEDULE, maps=maps)
            b = run_episode(cfg, params, m, RISK, SCHEDULE)
            assert a.outcome == b.outcome and np.array_equal(a.poses, b.poses)
            assert (a.outcome is Outcome.SAFETY) == recheck_safety(a, maps.safe_set)
            if m.name == "projection":
                assert a.outcome is not Outcome.SAFETY
            steps = np.hypot(*np.diff(a.poses[:, :2], axis=0).T)
            assert steps.max(initial=0.0) <= 0.5 * maps.safe_set.spec.resolution + 1e-9
            assert a.path_length == pytest.approx(steps.sum())


def test_evaluation_report(params, small_suite):
    first = evaluate(methods(), small_suite, params, RISK, SCHEDULE)
    second = evaluate(methods(), small_suite, params, RISK, SCHEDULE, workers=2)
    assert first.metrics_csv() == second.metrics_csv()
    assert first.episodes_csv() == second.episodes_csv()
    for m in first.methods:
        assert m.episodes == len(small_suite)
        assert m.goal_success + m.safety_failure + m.timeout == pytest.approx(100.0)
    assert first.by_method()["projection"].safety_failure == 0.0
    lines = first.episodes_csv().splitlines()
    assert lines[0] == "episode,method,outcome,cycles,path_length"
    assert len(lines) == 1 + len(small_suite) * 4
    assert "GS %" in first.table()


def test_empty_suite_rejected(params):
    with pytest.raises(ValueError):
        evaluate(methods(), [], params, RISK, SCHEDULE)


def test_select_candidate_prefers_safe():
    from helpers import box_map

    ss = SafeSet(box_map(box=(28, 32, 18, 22)))
    pose = Pose(2.0, 2.0)
    goal = (3.0, 2.0)
    into_block = np.array([[0.5, 0.0], [0.99, 0.0]])
    around = np.array([[0.3, 0.5], [0.9, 0.5]])
    assert select_candidate([into_block, around], pose, goal, None) == 0
    assert select_candidate([into_block, around], pose, goal, ss) == 1
    assert select_candidate([into_block], pose, goal, ss) == 0
    assert select_candidate([np.zeros((0, 2)), around], pose, goal, ss) == 1


def test_method_risk_awareness():
    assert not Method("v", G.Unguided()).risk_aware
    assert all(m.risk_aware for m in methods()[1:])


@pytest.mark.slow
def test_projection_never_fails_on_ood_suite(ood_report):
    report, _ = ood_report
    rows = [r for r in report.rows if r["method"] == "projection"]
    assert len(rows) == 30
    assert all(r["outcome"] != Outcome.SAFETY.value for r in rows)
