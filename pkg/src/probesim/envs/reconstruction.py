"""Bone-surface reconstruction task: scan the vertebra's upper surface,
trading coverage against path length and rotation, with a lossy simulated
segmenter feeding the growing point set."""

from __future__ import annotations

import numpy as np

from ..geometry import Pose, relative_pose, rotation_of
from ..phantom import upper_surface_points
from .base import StepResult, TaskEnv
from .configs import ReconConfig

RESET_ATTEMPTS = 100


def voxelize_in_frame(points_world, frame: Pose, dims, res_mm: float):
    """Binary occupancy of world points binned in `frame`, grid centered
    on the frame origin (voxel index = floor(local / res) + dims // 2).
    Grid axes follow (depth z, lateral x, elevation y) of the frame."""
    grid = np.zeros(dims, dtype=np.float32)
    if len(points_world):
        local = (np.asarray(points_world) - frame.position) @ frame.rotation
        idx = np.floor(local / res_mm).astype(int)
        idx += np.asarray(dims)[[1, 2, 0]] // 2
        ok = (
            (idx[:, 0] >= 0)
            & (idx[:, 0] < dims[1])
            & (idx[:, 1] >= 0)
            & (idx[:, 1] < dims[2])
            & (idx[:, 2] >= 0)
            & (idx[:, 2] < dims[0])
        )
        idx = idx[ok]
        grid[idx[:, 2], idx[:, 0], idx[:, 1]] = 1.0
    return grid


class ReconEnv(TaskEnv):
    task_name = "recon"
    action_dim = 4

    def __init__(self, patient, config: ReconConfig, n_envs, us_params=None, threads=1,
                 render=False):
        # the observation is the voxelized reconstruction, not an image;
        # no renderer is needed
        super().__init__(patient, config, n_envs, us_params, threads, render=False)
        self.vertebra = patient.landmark("vertebra")
        self.surface = upper_surface_points(patient.labels)
        if not len(self.surface):
            raise ValueError("patient has no bone upper-surface points")
        # in-plane voxel area: one captured point counts this much surface
        self.point_area_mm2 = float(
            patient.labels.spacing_mm[0] * patient.labels.spacing_mm[1]
        )
        self.xy = np.zeros((n_envs, 2))
        self.yaw = np.zeros(n_envs)
        self.pitch = np.zeros(n_envs)
        self.contact = [Pose.identity()] * n_envs
        self.captured = np.zeros((n_envs, len(self.surface)), dtype=bool)
        self.path_length = np.zeros(n_envs)
        self.total_rotation = np.zeros(n_envs)

    def imaging_frame(self, slot) -> Pose:
        """Contact frame pitched about its y-axis; the plane the simulated
        segmenter sees."""
        c = self.contact[slot]
        return Pose(c.position, c.rotation @ rotation_of([0.0, self.pitch[slot], 0.0]))

    def _place(self, slot):
        self.contact[slot] = self.skin_pose(
            self.xy[slot, 0], self.xy[slot, 1], self.yaw[slot]
        )

    def visible_mask(self, slot):
        """Surface points inside the image rectangle and elevation slab of
        the imaging frame."""
        frame = self.imaging_frame(slot)
        local = (self.surface - frame.position) @ frame.rotation
        spec = self.config.image
        return (
            (np.abs(local[:, 1]) <= self.config.slab_half_mm)
            & (local[:, 2] >= 0.0)
            & (local[:, 2] <= spec.depth_mm)
            & (np.abs(local[:, 0]) <= spec.half_width_mm)
        )

    def _observe(self):
        cfg = self.config
        obs = np.zeros((self.n_envs,) + tuple(cfg.grid_dims), dtype=np.float32)
        for i in range(self.n_envs):
            pts = self.surface[self.captured[i]]
            obs[i] = voxelize_in_frame(pts, self.imaging_frame(i), cfg.grid_dims, cfg.grid_res_mm)
        return obs

    def _info(self):
        states = np.empty((self.n_envs, 6))
        coverage = self.captured.mean(axis=1)
        for i in range(self.n_envs):
            rel = relative_pose(self.vertebra, self.imaging_frame(i))
            states[i, :3] = rel.position
            states[i, 3:] = rel.angle_axis()
        return {
            "state": states,
            "pose_xy_yaw_pitch": np.column_stack([self.xy, self.yaw, self.pitch]),
            "metrics": {
                "coverage_ratio": coverage,
                "total_rotation_rad": self.total_rotation.copy(),
                "path_length_mm": self.path_length.copy(),
            },
        }

    def reset(self, seeds):
        self._assign_seeds(seeds)
        cfg = self.config
        vx, vy = self.vertebra.position[:2]
        self.captured[:] = False
        self.path_length[:] = 0.0
        self.total_rotation[:] = 0.0
        self.pitch[:] = 0.0
        for i in range(self.n_envs):
            gen = self._reset_stream(i)
            for attempt in range(RESET_ATTEMPTS):
                x = vx + gen.uniform(-cfg.init_half_extent_mm, cfg.init_half_extent_mm)
                y = vy + gen.uniform(-cfg.init_half_extent_mm, cfg.init_half_extent_mm)
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
        dang = np.clip(actions[:, 2:], -cfg.max_step_rad, cfg.max_step_rad)
        reward = np.empty(self.n_envs)
        new_counts = np.zeros(self.n_envs, dtype=np.int64)
        for i in range(self.n_envs):
            x_axis, y_axis, _ = self.contact[i].axes()
            move = dxy[i, 0] * x_axis + dxy[i, 1] * y_axis
            x, y, _ = self.clamp_to_domain(
                self.xy[i, 0] + move[0], self.xy[i, 1] + move[1]
            )
            self.xy[i] = (x, y)
            self.yaw[i] += dang[i, 0]
            old_pitch = self.pitch[i]
            self.pitch[i] = float(
                np.clip(old_pitch + dang[i, 1], -cfg.pitch_limit_rad, cfg.pitch_limit_rad)
            )
            dpitch = self.pitch[i] - old_pitch
            self._place(i)

            visible = self.visible_mask(i)
            candidates = np.nonzero(visible)[0]
            if cfg.miss_prob > 0.0 and len(candidates):
                gen = self._step_stream(i)
                keep = gen.random(len(candidates)) >= cfg.miss_prob
                candidates = candidates[keep]
            fresh = candidates[~self.captured[i, candidates]]
            self.captured[i, fresh] = True
            new_counts[i] = len(fresh)

            motion = abs(dxy[i, 0]) + abs(dxy[i, 1])
            rotation = abs(dang[i, 0]) + abs(dpitch)
            self.path_length[i] += motion
            self.total_rotation[i] += rotation
            # marginal gain of the coverage-minus-cost objective
            reward[i] = len(fresh) * self.point_area_mm2 - cfg.w2 * (
                motion + cfg.w3 * rotation
            )
        terminated, truncated = self._advance_clock()
        info = self._info()
        info["new_points"] = new_counts
        return StepResult(
            observation=self._observe(),
            reward=reward,
            cost=np.zeros(self.n_envs),
            terminated=terminated,
            truncated=truncated,
            info=info,
        )
