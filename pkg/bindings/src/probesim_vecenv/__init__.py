"""Vectorized-environment bindings over the probesim task simulators.

Follows the prevailing RL vector-env conventions without depending on a
specific framework: `make(task, n_envs, seed)` returns a handle exposing
Box-style space descriptors, `reset(seed) -> (obs, info)`, and
`step(actions) -> (obs, reward, cost, terminated, truncated, info)`.
The cost array is also mirrored into `info["cost"]` so both plain and
constrained trainers consume the same handle unmodified.

Outputs are numerically identical to driving the underlying simulator (or
its CLI) with the same config, seeds, and actions; buffers are fresh
arrays each call (value equality is the contract, not aliasing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from probesim.envs import ConfigError, load_setup, make_env

__all__ = ["SpaceSpec", "VecEnvHandle", "make"]
__version__ = "0.1.0"


@dataclass(frozen=True)
class SpaceSpec:
    """Box-style space descriptor: per-env shape, dtype, and bounds."""

    shape: tuple
    dtype: str
    low: tuple | float
    high: tuple | float

    def contains(self, value) -> bool:
        value = np.asarray(value)
        return value.shape[1:] == self.shape


def _image_space(spec):
    shape = (spec.height, spec.width) if spec.elevation == 1 else (
        spec.elevation,
        spec.height,
        spec.width,
    )
    return SpaceSpec(shape=shape, dtype="float32", low=0.0, high=1.0)


def _spaces(setup):
    params = setup.params
    if setup.task == "nav":
        obs = _image_space(params.image)
        act = SpaceSpec(
            shape=(3,),
            dtype="float64",
            low=(-params.max_step_mm, -params.max_step_mm, -params.max_step_rad),
            high=(params.max_step_mm, params.max_step_mm, params.max_step_rad),
        )
    elif setup.task == "recon":
        obs = SpaceSpec(shape=tuple(params.grid_dims), dtype="float32", low=0.0, high=1.0)
        act = SpaceSpec(
            shape=(4,),
            dtype="float64",
            low=(
                -params.max_step_mm,
                -params.max_step_mm,
                -params.max_step_rad,
                -params.max_step_rad,
            ),
            high=(
                params.max_step_mm,
                params.max_step_mm,
                params.max_step_rad,
                params.max_step_rad,
            ),
        )
    else:  # surgery
        obs = {
            "image": _image_space(params.image),
            "pose": SpaceSpec(shape=(7,), dtype="float32", low=-np.inf, high=np.inf),
        }
        act = SpaceSpec(
            shape=(6,),
            dtype="float64",
            low=(-params.max_step_mm,) * 3 + (-params.max_step_rad,) * 3,
            high=(params.max_step_mm,) * 3 + (params.max_step_rad,) * 3,
        )
    return obs, act


class VecEnvHandle:
    """Batched environment handle. Construction is cheap; the first reset
    happens lazily on `step` when the consumer never called `reset`."""

    def __init__(self, setup, n_envs: int, seed: int, threads: int = 1, render: bool = True):
        self.setup = setup
        self.task = setup.task
        self.num_envs = int(n_envs)
        self.seed = seed
        self.render = bool(render)
        self.observation_space, self.action_space = _spaces(setup)
        self._env = make_env(setup, n_envs=n_envs, threads=threads, render=render)
        self._started = False

    # -- protocol ----------------------------------------------------------

    def reset(self, seed=None):
        """Start fresh episodes. `seed` may be a scalar (slots derive
        independent streams) or one seed per slot; omitted means the seed
        given to make()."""
        if seed is None:
            seed = self.seed
        obs, info = self._env.reset(seed)
        self._started = True
        return self._fill_obs(obs), info

    def step(self, actions):
        if not self._started:
            self.reset()
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs,) + self.action_space.shape:
            raise ValueError(
                f"actions must have shape {(self.num_envs,) + self.action_space.shape}, "
                f"got {actions.shape}"
            )
        result = self._env.step(actions)
        info = dict(result.info)
        info["cost"] = result.cost
        return (
            self._fill_obs(result.observation),
            result.reward,
            result.cost,
            result.terminated,
            result.truncated,
            info,
        )

    def close(self):
        self._env.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- helpers -----------------------------------------------------------

    def _fill_obs(self, obs):
        """Rendering-disabled simulators hand back None images; keep the
        space contract by zero-filling."""
        if isinstance(self.observation_space, dict):
            obs = dict(obs) if obs is not None else {}
            for name, space in self.observation_space.items():
                if obs.get(name) is None:
                    obs[name] = np.zeros((self.num_envs,) + space.shape, dtype=space.dtype)
            return obs
        if obs is None:
            space = self.observation_space
            return np.zeros((self.num_envs,) + space.shape, dtype=space.dtype)
        return obs


def make(task, n_envs: int = 1, seed: int = 0, threads: int = 1, render: bool = True) -> VecEnvHandle:
    """Build a handle from a task name, config dict, or config file path.

    Raises probesim's ConfigError for unknown tasks or malformed configs.
    """
    setup = load_setup(task)
    if n_envs < 1:
        raise ConfigError("n_envs must be >= 1")
    return VecEnvHandle(setup, n_envs, seed, threads=threads, render=render)
