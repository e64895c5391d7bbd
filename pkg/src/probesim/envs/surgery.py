"""Safety-constrained drilling task: move a tracked drill to a planned
goal frame inside the vertebra, staying in the free half-space above the
skin or inside the narrow drilling corridor."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import Pose, relative_pose, rotation_of
from .base import StepResult, TaskEnv
from .configs import SurgeryConfig

REGION_FREE = 0
REGION_DRILL = 1
REGION_UNSAFE = 2


def classify_region(p, l_mm: float, d_mm: float) -> int:
    """Partition of goal-frame positions: the drilling corridor (cylinder
    of diameter d from skin level -l up to the goal plane) takes precedence
    on its boundary, then the free half-space below skin level, else
    unsafe."""
    radial = math.hypot(p[0], p[1])
    if radial <= d_mm / 2.0 and -l_mm <= p[2] <= 0.0:
        return REGION_DRILL
    if p[2] <= -l_mm:
        return REGION_FREE
    return REGION_UNSAFE


def surgery_metrics(rel: Pose, goal_z_axis=None):
    """Final-state drilling metrics: insertion error along the goal z,
    side error across it, and the angle between drill and goal z-axes."""
    p = rel.position
    insertion = abs(float(p[2]))
    side = float(np.hypot(p[0], p[1]))
    z_rel = rel.rotation[:, 2]
    rot_deg = math.degrees(math.acos(min(1.0, max(-1.0, float(z_rel[2])))))
    return insertion, side, rot_deg


class SurgeryEnv(TaskEnv):
    task_name = "surgery"
    action_dim = 6

    def __init__(self, patient, config: SurgeryConfig, n_envs, us_params=None, threads=1,
                 render=True):
        super().__init__(patient, config, n_envs, us_params, threads, render)
        self.goal = patient.landmark("drill_goal")
        self.vertebra = patient.landmark("vertebra")
        self.drills = [Pose.identity()] * n_envs
        self.probes = [Pose.identity()] * n_envs
        self.unsafe_steps = np.zeros(n_envs, dtype=np.int64)
        self._frames = None  # probe is fixed per episode; rendered once

    @property
    def p_l(self):
        """Skin entry point in the goal frame."""
        return np.array([0.0, 0.0, -self.config.skin_to_goal_mm])

    def _state(self, slot) -> Pose:
        return relative_pose(self.goal, self.drills[slot])

    def _observe(self):
        pose = np.empty((self.n_envs, 7), dtype=np.float32)
        for i in range(self.n_envs):
            rel = relative_pose(self.probes[i], self.drills[i])
            pose[i, :3] = rel.position
            pose[i, 3:] = rel.quaternion()
        return {"image": self._frames, "pose": pose}

    def _info(self, regions=None):
        states = np.empty((self.n_envs, 6))
        insertion = np.empty(self.n_envs)
        side = np.empty(self.n_envs)
        rot = np.empty(self.n_envs)
        for i in range(self.n_envs):
            rel = self._state(i)
            states[i, :3] = rel.position
            states[i, 3:] = rel.angle_axis()
            insertion[i], side[i], rot[i] = surgery_metrics(rel)
        steps = max(self.step_count, 1)
        info = {
            "state": states,
            "metrics": {
                "insertion_error_mm": insertion,
                "side_error_mm": side,
                "rotation_error_deg": rot,
                "safe_ratio": 1.0 - self.unsafe_steps / steps,
            },
        }
        if regions is not None:
            info["region"] = regions
        return info

    def reset(self, seeds):
        self._assign_seeds(seeds)
        cfg = self.config
        self.unsafe_steps[:] = 0
        vx, vy = self.vertebra.position[:2]
        for i in range(self.n_envs):
            gen = self._reset_stream(i)
            # ultrasound probe parked beside the vertebra, jittered along
            # the tangential axes to mimic navigation noise
            px = vx + cfg.probe_offset_mm + gen.uniform(-cfg.probe_jitter_mm, cfg.probe_jitter_mm)
            py = vy + gen.uniform(-cfg.probe_jitter_mm, cfg.probe_jitter_mm)
            self.probes[i] = self.skin_pose(px, py, 0.0)
            # drill tip starts in the free region above the skin entry
            local = np.array(
                [
                    gen.uniform(-cfg.init_lateral_mm, cfg.init_lateral_mm),
                    gen.uniform(-cfg.init_lateral_mm, cfg.init_lateral_mm),
                    -cfg.skin_to_goal_mm - gen.uniform(*cfg.init_height_mm),
                ]
            )
            tilt = gen.uniform(-cfg.init_tilt_rad, cfg.init_tilt_rad, 3)
            self.drills[i] = Pose(
                self.goal.transform(local), self.goal.rotation @ rotation_of(tilt)
            )
        if self.render_enabled:
            self._frames = self._sim.render_batch(self.probes)
        return self._observe(), self._info()

    def step(self, actions) -> StepResult:
        actions = self._check_step(actions)
        cfg = self.config
        dp = np.clip(actions[:, :3], -cfg.max_step_mm, cfg.max_step_mm)
        dq = np.clip(actions[:, 3:], -cfg.max_step_rad, cfg.max_step_rad)
        l, d = cfg.skin_to_goal_mm, cfg.drill_diameter_mm
        p_l = self.p_l
        reward = np.empty(self.n_envs)
        cost = np.empty(self.n_envs)
        regions = np.empty(self.n_envs, dtype=np.int64)
        for i in range(self.n_envs):
            before = self._state(i)
            region = classify_region(before.position, l, d)
            drill = self.drills[i]
            self.drills[i] = Pose(
                drill.position + drill.rotation @ dp[i],
                drill.rotation @ rotation_of(dq[i]),
            )
            after = self._state(i)
            if region == REGION_FREE:
                reward[i] = cfg.w4 * (
                    np.linalg.norm(before.position - p_l)
                    - np.linalg.norm(after.position - p_l)
                ) + cfg.w5 * (
                    np.linalg.norm(before.angle_axis()) - np.linalg.norm(after.angle_axis())
                )
            elif region == REGION_DRILL:
                reward[i] = cfg.w6 * (
                    np.linalg.norm(before.position) - np.linalg.norm(after.position)
                ) + cfg.w5 * (
                    np.linalg.norm(before.angle_axis()) - np.linalg.norm(after.angle_axis())
                )
            else:
                reward[i] = 0.0
            new_region = classify_region(after.position, l, d)
            regions[i] = new_region
            cost[i] = 1.0 if new_region == REGION_UNSAFE else 0.0
            if cost[i]:
                self.unsafe_steps[i] += 1
        terminated, truncated = self._advance_clock()
        return StepResult(
            observation=self._observe(),
            reward=reward,
            cost=cost,
            terminated=terminated,
            truncated=truncated,
            info=self._info(regions),
        )
