import math

import numpy as np
import pytest

from probesim.envs import (
    Patient,
    REGION_DRILL,
    REGION_FREE,
    REGION_UNSAFE,
    SurgeryConfig,
    SurgeryEnv,
    classify_region,
    surgery_metrics,
)
from probesim.geometry import Pose, relative_pose, rotation_of


@pytest.fixture(scope="module")
def patient():
    return Patient.from_phantom("torso", seed=0)


def make_surgery(patient, n=1, render=False, **overrides):
    return SurgeryEnv(patient, SurgeryConfig(**overrides), n, render=render)


def test_region_examples():
    # below the skin plane by more than l
    assert classify_region((0.0, 0.0, -60.0), 50.0, 10.0) == REGION_FREE
    # inside the corridor cylinder
    assert classify_region((1.0, 1.0, -10.0), 50.0, 10.0) == REGION_DRILL
    # lateral of the corridor above the skin plane
    assert classify_region((20.0, 0.0, -10.0), 50.0, 10.0) == REGION_UNSAFE


def test_region_partition_exhaustive():
    rng = np.random.default_rng(0)
    l, d = 50.0, 6.0
    pts = rng.uniform(-80, 80, size=(100_000, 3))
    for p in pts[:: max(1, len(pts) // 100_000)]:
        got = classify_region(p, l, d)
        drill_raw = math.hypot(p[0], p[1]) <= d / 2.0 and -l <= p[2] <= 0.0
        free_raw = p[2] <= -l
        if drill_raw:
            want = REGION_DRILL
        elif free_raw:
            want = REGION_FREE
        else:
            want = REGION_UNSAFE
        assert got == want


def set_drill(env, slot, p_goal_frame, rel_rotation=None):
    rel_rotation = np.eye(3) if rel_rotation is None else rel_rotation
    env.drills[slot] = Pose(
        env.goal.transform(p_goal_frame), env.goal.rotation @ rel_rotation
    )


def test_free_region_reward_branch(patient):
    env = make_surgery(patient)
    env.reset(0)
    set_drill(env, 0, [6.0, 0.0, -60.0])
    # drill frame aligned with goal frame: action coords are goal coords
    res = env.step(np.array([[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]))
    # |p - p_l| drops from sqrt(36+100) to sqrt(25+100)
    expect = 30.0 * (math.sqrt(136.0) - math.sqrt(125.0))
    assert res.reward[0] == pytest.approx(expect, abs=1e-9)
    assert res.cost[0] == 0.0


def test_drill_region_reward_branch(patient):
    env = make_surgery(patient)
    env.reset(0)
    set_drill(env, 0, [0.0, 0.0, -10.0])
    res = env.step(np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]))
    expect = 300.0 * (10.0 - 9.0)
    assert res.reward[0] == pytest.approx(expect, abs=1e-9)
    assert res.cost[0] == 0.0


def test_unsafe_region_zero_reward_and_cost(patient):
    env = make_surgery(patient)
    env.reset(0)
    set_drill(env, 0, [20.0, 0.0, -10.0])
    res = env.step(np.array([[0.0, 0.0, -1.0, 0.0, 0.0, 0.0]]))
    assert res.reward[0] == 0.0
    assert res.cost[0] == 1.0  # still unsafe after a 1 mm move
    assert res.info["region"][0] == REGION_UNSAFE


def test_rotation_term_in_reward(patient):
    env = make_surgery(patient)
    env.reset(0)
    rel_rot = rotation_of([0.0, 0.0, 0.1])
    set_drill(env, 0, [0.0, 0.0, -70.0], rel_rot)
    res = env.step(np.array([[0.0, 0.0, 0.0, 0.0, 0.0, -0.02]]))
    # pure rotation contraction: w5 * (0.1 - 0.08)
    assert res.reward[0] == pytest.approx(5.0 * 0.02, abs=1e-9)


def test_cost_on_post_step_state(patient):
    env = make_surgery(patient)
    env.reset(0)
    # start safely free, step laterally out while above the skin plane
    set_drill(env, 0, [0.0, 0.0, -50.5])
    res = env.step(np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]))
    # moved to z = -49.5 with radial 0 -> inside the corridor: safe
    assert res.cost[0] == 0.0
    set_drill(env, 0, [4.0, 0.0, -50.5])
    res = env.step(np.array([[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]))
    # z = -49.5, radial 4 > d/2: unsafe reached
    assert res.cost[0] == 1.0


def test_observation_shapes_and_constancy(patient):
    env = make_surgery(patient, n=2, render=True)
    obs, _ = env.reset(5)
    assert obs["image"].shape == (2, 5, 50, 37)
    assert obs["pose"].shape == (2, 7)
    quat_norm = np.linalg.norm(obs["pose"][:, 3:], axis=1)
    np.testing.assert_allclose(quat_norm, 1.0, atol=1e-5)
    first = obs["image"].copy()
    res = env.step(np.zeros((2, 6)))
    np.testing.assert_array_equal(res.observation["image"], first)
    env.close()


def test_observed_pose_is_drill_in_probe_frame(patient):
    env = make_surgery(patient, n=1)
    obs, _ = env.reset(2)
    rel = relative_pose(env.probes[0], env.drills[0])
    np.testing.assert_allclose(obs["pose"][0, :3], rel.position, atol=1e-4)
    np.testing.assert_allclose(obs["pose"][0, 3:], rel.quaternion(), atol=1e-6)


def test_metrics_values(patient):
    env = make_surgery(patient)
    env.reset(0)
    set_drill(env, 0, [0.0, 0.0, 0.0])
    insertion, side, rot = surgery_metrics(env._state(0))
    assert insertion < 1e-9 and side < 1e-9 and rot < 1e-9
    set_drill(env, 0, [3.0, 4.0, 12.0])
    insertion, side, rot = surgery_metrics(env._state(0))
    assert insertion == pytest.approx(12.0, abs=1e-9)
    assert side == pytest.approx(5.0, abs=1e-9)


def test_safe_ratio_metric(patient):
    env = make_surgery(patient)
    env.reset(0)
    set_drill(env, 0, [0.0, 0.0, -60.0])
    res = env.step(np.zeros((1, 6)))
    assert res.info["metrics"]["safe_ratio"][0] == 1.0
    set_drill(env, 0, [30.0, 0.0, -10.0])
    res = env.step(np.zeros((1, 6)))
    assert res.info["metrics"]["safe_ratio"][0] == 0.5


def test_init_randomization_in_free_region(patient):
    env = make_surgery(patient, n=50)
    env.reset(3)
    for i in range(50):
        p = env._state(i).position
        assert classify_region(p, 50.0, 6.0) == REGION_FREE
        assert abs(p[0]) <= 15.0 + 1e-9 and abs(p[1]) <= 15.0 + 1e-9
        assert -80.0 - 1e-9 <= p[2] <= -60.0 + 1e-9


def test_probe_jitter_lambda(patient):
    jittered = make_surgery(patient, n=20, probe_jitter_mm=5.0)
    fixed = make_surgery(patient, n=20, probe_jitter_mm=0.0)
    jittered.reset(1)
    fixed.reset(1)
    jxy = np.array([p.position[:2] for p in jittered.probes])
    fxy = np.array([p.position[:2] for p in fixed.probes])
    assert np.ptp(fxy, axis=0).max() < 1e-12
    assert np.ptp(jxy, axis=0).max() > 1.0
    offset = fxy[0] - patient.landmarks["vertebra"].position[:2]
    np.testing.assert_allclose(offset, (30.0, 0.0), atol=1e-9)
    assert np.all(np.abs(jxy - fxy) <= 5.0 + 1e-9)


def test_action_clamps(patient):
    env = make_surgery(patient)
    env.reset(0)
    p_before = env.drills[0].position.copy()
    env.step(np.array([[100.0, 0.0, 0.0, 0.0, 0.0, 0.0]]))
    moved = np.linalg.norm(env.drills[0].position - p_before)
    assert moved == pytest.approx(1.0, abs=1e-9)


def test_trajectory_deterministic(patient):
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, size=(10, 3, 6))

    def run():
        env = make_surgery(patient, n=3)
        env.reset(17)
        rewards, costs = [], []
        for a in actions:
            res = env.step(a)
            rewards.append(res.reward.copy())
            costs.append(res.cost.copy())
        return np.array(rewards), np.array(costs)

    (r1, c1), (r2, c2) = run(), run()
    assert r1.tobytes() == r2.tobytes()
    assert c1.tobytes() == c2.tobytes()
