"""Episode recording and replay for imitation-learning consumers.

Layout (documented in FORMAT.md): one directory per episode holding
meta.json, steps.jsonl, and optionally raw float32 observation tensors
with a shape manifest. A dataset is fully reconstructible from
(config, seed, action log); replay equality is the integrity check.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil

import numpy as np

from . import rng
from .envs import Patient, make_env
from .envs.configs import TaskSetup, load_setup

FORMAT_VERSION = 1


def config_hash(setup: TaskSetup) -> str:
    return hashlib.sha256(setup.canonical_json().encode("utf-8")).hexdigest()


def episode_seed(dataset_seed: int, episode_index: int) -> int:
    return rng.mix64(rng.mix64(dataset_seed, rng.EPISODE_SEED), episode_index)


def _write_observation(directory, step, obs, manifest):
    if obs is None:
        return
    if isinstance(obs, dict):
        for name, arr in obs.items():
            arr = np.asarray(arr)
            manifest["components"][name] = list(arr.shape[1:])
            path = os.path.join(directory, f"obs_{step:06d}.{name}.f32")
            arr[0].astype("<f4").tofile(path)
    else:
        arr = np.asarray(obs)
        manifest["components"]["obs"] = list(arr.shape[1:])
        arr[0].astype("<f4").tofile(os.path.join(directory, f"obs_{step:06d}.f32"))


def record_rollouts(
    setup,
    policy,
    n_episodes: int,
    seed: int,
    out_dir,
    record_observations: bool = True,
    patient: Patient | None = None,
):
    """Roll out `policy` for n_episodes and write one directory each.

    policy(observation, info, env) -> actions (1, action_dim). Episodes are
    seeded from (seed, episode index) and run single-slot so any episode
    replays independently of the batch it was recorded in. Returns the list
    of episode directories. Partially written episodes are removed on
    failure.
    """
    setup = load_setup(setup)
    if patient is None:
        patient = Patient.from_config(setup.patient)
    env = make_env(setup, n_envs=1, render=record_observations, patient=patient)
    os.makedirs(out_dir, exist_ok=True)
    digest = config_hash(setup)
    dirs = []
    try:
        for episode in range(n_episodes):
            ep_dir = os.path.join(out_dir, f"ep_{episode:05d}")
            try:
                dirs.append(
                    _record_episode(env, setup, policy, episode, seed, ep_dir, digest,
                                    record_observations)
                )
            except BaseException:
                shutil.rmtree(ep_dir, ignore_errors=True)
                raise
    finally:
        env.close()
    return dirs


def _record_episode(env, setup, policy, episode, seed, ep_dir, digest, record_observations):
    os.makedirs(ep_dir, exist_ok=True)
    ep_seed = episode_seed(seed, episode)
    obs, info = env.reset(np.array([ep_seed], dtype=np.uint64))
    manifest = {"dtype": "float32", "order": "C", "components": {}}
    steps = []
    for t in range(env.config.episode_len):
        if record_observations:
            _write_observation(ep_dir, t, obs, manifest)
        actions = np.asarray(policy(obs, info, env), dtype=np.float64)
        result = env.step(actions)
        steps.append(
            {
                "t": t,
                "action": actions[0].tolist(),
                "reward": float(result.reward[0]),
                "cost": float(result.cost[0]),
                "state": result.info["state"][0].tolist(),
            }
        )
        obs, info = result.observation, result.info
        if result.truncated[0]:
            break
    with open(os.path.join(ep_dir, "steps.jsonl"), "w", encoding="utf-8") as f:
        for line in steps:
            f.write(json.dumps(line, sort_keys=True) + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "task": setup.task,
        "config": setup.to_dict(),
        "config_hash": digest,
        "dataset_seed": int(seed),
        "episode_index": episode,
        "episode_seed": int(ep_seed),
        "patient": env.patient.name,
        "steps": len(steps),
        "final_metrics": {
            k: float(v[0]) for k, v in steps_final_metrics(env).items()
        },
    }
    if record_observations:
        with open(os.path.join(ep_dir, "shape.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    with open(os.path.join(ep_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return ep_dir


def steps_final_metrics(env):
    return env._info()["metrics"]


def load_episode(ep_dir):
    with open(os.path.join(ep_dir, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    steps = []
    with open(os.path.join(ep_dir, "steps.jsonl"), "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                steps.append(json.loads(line))
    if len(steps) != meta["steps"]:
        raise ValueError(f"{ep_dir}: step count mismatch")
    return meta, steps


def replay_episode(ep_dir, patient: Patient | None = None):
    """Re-simulate an episode from (config, seed, actions); returns
    (recorded, replayed) reward/cost arrays plus the replayed final
    metrics. Bitwise reward equality is the dataset integrity check."""
    meta, steps = load_episode(ep_dir)
    setup = load_setup(meta["config"])
    if config_hash(setup) != meta["config_hash"]:
        raise ValueError(f"{ep_dir}: config hash mismatch")
    env = make_env(setup, n_envs=1, render=False, patient=patient)
    try:
        env.reset(np.array([meta["episode_seed"]], dtype=np.uint64))
        rec_rewards = np.array([s["reward"] for s in steps])
        rec_costs = np.array([s["cost"] for s in steps])
        rewards = np.empty(len(steps))
        costs = np.empty(len(steps))
        for i, s in enumerate(steps):
            result = env.step(np.asarray(s["action"], dtype=np.float64)[None])
            rewards[i] = result.reward[0]
            costs[i] = result.cost[0]
        metrics = {k: float(v[0]) for k, v in steps_final_metrics(env).items()}
    finally:
        env.close()
    return (rec_rewards, rec_costs), (rewards, costs), metrics


def dataset_stats(root):
    """Aggregate a dataset directory from its files alone. Corrupt
    episodes are listed, not fatal."""
    episodes = sorted(
        d for d in os.listdir(root) if d.startswith("ep_") and
        os.path.isdir(os.path.join(root, d))
    ) if os.path.isdir(root) else []
    stats = {
        "episodes": 0,
        "corrupt": [],
        "total_reward": 0.0,
        "total_steps": 0,
        "mean_final_metrics": {},
    }
    sums = {}
    for name in episodes:
        ep_dir = os.path.join(root, name)
        try:
            meta, steps = load_episode(ep_dir)
            if record_obs_expected(meta, ep_dir):
                _verify_tensors(ep_dir, meta, steps)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            stats["corrupt"].append({"episode": name, "error": str(exc)})
            continue
        stats["episodes"] += 1
        stats["total_steps"] += len(steps)
        stats["total_reward"] += sum(s["reward"] for s in steps)
        for k, v in meta.get("final_metrics", {}).items():
            sums.setdefault(k, []).append(v)
    stats["mean_final_metrics"] = {k: float(np.mean(v)) for k, v in sums.items()}
    return stats


def record_obs_expected(meta, ep_dir):
    return os.path.exists(os.path.join(ep_dir, "shape.json"))


def _verify_tensors(ep_dir, meta, steps):
    with open(os.path.join(ep_dir, "shape.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    for name, shape in manifest["components"].items():
        expected = int(np.prod(shape)) * 4
        suffix = ".f32" if name == "obs" else f".{name}.f32"
        path = os.path.join(ep_dir, f"obs_{0:06d}{suffix}")
        if os.path.getsize(path) != expected:
            raise ValueError(f"{path}: size {os.path.getsize(path)} != manifest {expected}")
