"""Probe navigation task: reach a goal frame on the skin from a random
start, acting through tangential translation and yaw about the normal."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import Pose, relative_pose
from .base import StepResult, TaskEnv
from .configs import NavConfig

RESET_ATTEMPTS = 100


def nav_metrics(rel: Pose):
    """Final-state navigation metrics: 2D position error on the frontal
    plane (mm) and yaw error about the frontal axis (deg)."""
    p = rel.position
    q = rel.angle_axis()
    return float(np.hypot(p[0], p[1])), abs(math.degrees(q[2]))


class NavEnv(TaskEnv):
    task_name = "nav"
    action_dim = 3

    def __init__(self, patient, config: NavConfig, n_envs, us_params=None, threads=1, render=True):
        super().__init__(patient, config, n_envs, us_params, threads, render)
        self.goal = patient.landmark("probe_goal")
        self.xy = np.zeros((n_envs, 2))
        self.yaw = np.zeros(n_envs)
        self.probes = [Pose.identity()] * n_envs

    def _place(self, slot):
        self.probes[slot] = self.skin_pose(
            self.xy[slot, 0], self.xy[slot, 1], self.yaw[slot]
        )

    def _state(self, slot) -> Pose:
        return relative_pose(self.probes[slot], self.goal)

    def _observe(self):
        if not self.render_enabled:
            return None
        frames = self._sim.render_batch(self.probes)
        return frames[:, 0]

    def _info(self):
        states = np.empty((self.n_envs, 6))
        pos_err = np.empty(self.n_envs)
        rot_err = np.empty(self.n_envs)
        positions = np.empty((self.n_envs, 3))
        quats = np.empty((self.n_envs, 4))
        for i in range(self.n_envs):
            rel = self._state(i)
            states[i, :3] = rel.position
            states[i, 3:] = rel.angle_axis()
            pos_err[i], rot_err[i] = nav_metrics(rel)
            positions[i] = self.probes[i].position
            quats[i] = self.probes[i].quaternion()
        return {
            "state": states,
            "metrics": {"position_error_mm": pos_err, "rotation_error_deg": rot_err},
            "probe_position": positions,
            "probe_quaternion": quats,
        }

    def reset(self, seeds):
        self._assign_seeds(seeds)
        cfg = self.config
        gx, gy = self.goal.position[:2]
        half = cfg.init_half_extent_mm
        for i in range(self.n_envs):
            gen = self._reset_stream(i)
            for attempt in range(RESET_ATTEMPTS):
                x = gx + gen.uniform(-half, half)
                y = gy + gen.uniform(-half, half)
                try:
                    self.xy[i] = (x, y)
                    self.yaw[i] = gen.uniform(*cfg.yaw_range_rad)
                    self._place(i)
                    break
                except ValueError:
                    if attempt == RESET_ATTEMPTS - 1:
                        raise RuntimeError(
                            f"slot {i}: no valid skin pose in the init region"
                        )
        return self._observe(), self._info()

    def step(self, actions) -> StepResult:
        actions = self._check_step(actions)
        cfg = self.config
        dxy = np.clip(actions[:, :2], -cfg.max_step_mm, cfg.max_step_mm)
        dyaw = np.clip(actions[:, 2], -cfg.max_step_rad, cfg.max_step_rad)
        reward = np.empty(self.n_envs)
        clamped = np.zeros(self.n_envs, dtype=bool)
        for i in range(self.n_envs):
            before = self._state(i)
            p0 = float(np.linalg.norm(before.position))
            q0 = float(np.linalg.norm(before.angle_axis()))
            x_axis, y_axis, _ = self.probes[i].axes()
            move = dxy[i, 0] * x_axis + dxy[i, 1] * y_axis
            x, y, clamped[i] = self.clamp_to_domain(
                self.xy[i, 0] + move[0], self.xy[i, 1] + move[1]
            )
            self.xy[i] = (x, y)
            self.yaw[i] += dyaw[i]
            self._place(i)
            after = self._state(i)
            p1 = float(np.linalg.norm(after.position))
            q1 = float(np.linalg.norm(after.angle_axis()))
            reward[i] = cfg.w1 * (p0 - p1) + (q0 - q1)
        terminated, truncated = self._advance_clock()
        info = self._info()
        info["domain_clamped"] = clamped
        return StepResult(
            observation=self._observe(),
            reward=reward,
            cost=np.zeros(self.n_envs),
            terminated=terminated,
            truncated=truncated,
            info=info,
        )
