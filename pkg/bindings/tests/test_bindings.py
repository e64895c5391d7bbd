import json

import numpy as np
import pytest

import probesim_vecenv as vec
from probesim.cli import main as probesim_cli
from probesim.datasets import load_episode
from probesim.envs import ConfigError, Patient, make_env

NAV_FAST = {
    "task": "nav",
    "patient": {"kind": "torso", "seed": 0},
    "params": {"episode_len": 10},
}


def test_nav_space_shapes():
    with vec.make("nav", n_envs=2, render=False) as handle:
        assert handle.observation_space.shape == (200, 150)
        obs, _ = handle.reset(seed=1)
        assert obs.shape == (2, 200, 150)
        assert handle.action_space.shape == (3,)
        assert handle.action_space.high == (2.0, 2.0, 0.05)


def test_recon_space_shapes():
    with vec.make("recon", n_envs=3) as handle:
        assert handle.observation_space.shape == (40, 40, 40)
        obs, _ = handle.reset(seed=2)
        assert obs.shape == (3, 40, 40, 40)
        assert handle.action_space.shape == (4,)


def test_surgery_space_shapes():
    with vec.make("surgery", n_envs=2, render=True) as handle:
        assert handle.observation_space["image"].shape == (5, 50, 37)
        assert handle.observation_space["pose"].shape == (7,)
        obs, _ = handle.reset(seed=3)
        assert obs["image"].shape == (2, 5, 50, 37)
        assert obs["pose"].shape == (2, 7)
        assert handle.action_space.shape == (6,)


def test_invalid_task_errors():
    with pytest.raises(ConfigError):
        vec.make("laparoscopy")
    with pytest.raises(ConfigError):
        vec.make("nav", n_envs=0)


def test_zero_actions_zero_reward():
    with vec.make(NAV_FAST, n_envs=2, render=False) as handle:
        handle.reset(seed=5)
        obs, reward, cost, terminated, truncated, info = handle.step(np.zeros((2, 3)))
        np.testing.assert_array_equal(reward, 0.0)
        np.testing.assert_array_equal(cost, 0.0)
        np.testing.assert_array_equal(info["cost"], cost)


def test_lazy_reset_on_step():
    with vec.make(NAV_FAST, n_envs=1, seed=9, render=False) as handle:
        obs, reward, *_ = handle.step(np.zeros((1, 3)))
        assert obs.shape == (1, 200, 150)


def test_done_flags_rise_at_episode_length():
    with vec.make(NAV_FAST, n_envs=2, render=False) as handle:
        handle.reset(seed=0)
        for t in range(10):
            *_, terminated, truncated, info = handle.step(np.zeros((2, 3)))
            assert not terminated.any()
            assert truncated.all() == (t == 9)
        # a fresh reset starts the next episode
        handle.reset(seed=1)
        *_, truncated, info = handle.step(np.zeros((2, 3)))
        assert not truncated.any()


def test_cross_component_replay_bitwise(tmp_path):
    """10-step scripted sequence through the bindings reproduces a CLI
    rollout's rewards bitwise."""
    config_path = tmp_path / "nav.json"
    config_path.write_text(json.dumps(NAV_FAST))
    out = tmp_path / "ds"
    code = probesim_cli([
        "rollout", "--task", "nav", "--policy", "expert", "--episodes", "1",
        "--seed", "31", "--out", str(out), "--config", str(config_path),
    ])
    assert code == 0
    meta, steps = load_episode(out / "ep_00000")
    assert len(steps) == 10

    with vec.make(NAV_FAST, n_envs=1, render=False) as handle:
        handle.reset(seed=np.array([meta["episode_seed"]], dtype=np.uint64))
        for record in steps:
            action = np.asarray(record["action"], dtype=np.float64)[None]
            _, reward, cost, *_ = handle.step(action)
            assert reward[0] == record["reward"]
            assert cost[0] == record["cost"]


def test_values_match_primary_env():
    patient = Patient.from_phantom("torso", seed=0)
    primary = make_env(NAV_FAST, n_envs=2, render=False, patient=patient)
    with vec.make(NAV_FAST, n_envs=2, render=False) as handle:
        handle.reset(seed=17)
        _, p_info = primary.reset(17)
        rng = np.random.default_rng(0)
        for _ in range(5):
            actions = rng.uniform(-2, 2, size=(2, 3))
            _, b_reward, *_rest, b_info = handle.step(actions)
            p_res = primary.step(actions)
            assert b_reward.tobytes() == p_res.reward.tobytes()
            np.testing.assert_array_equal(b_info["state"], p_res.info["state"])
    primary.close()


def test_render_disabled_keeps_space_contract():
    with vec.make("surgery", n_envs=1, render=False) as handle:
        obs, _ = handle.reset(seed=2)
        assert obs["image"].shape == (1, 5, 50, 37)
        np.testing.assert_array_equal(obs["image"], 0.0)
        assert obs["pose"].shape == (1, 7)
        assert np.any(obs["pose"] != 0.0)


def test_action_shape_validation():
    with vec.make(NAV_FAST, n_envs=2, render=False) as handle:
        handle.reset(seed=1)
        with pytest.raises(ValueError):
            handle.step(np.zeros((2, 4)))
