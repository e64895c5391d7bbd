"""Scripted full-state policies: proportional navigation and drilling
experts, plus the open-loop boustrophedon scan baseline for the
reconstruction task."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import rotation_of
from .envs.configs import NavConfig, ReconConfig, SurgeryConfig
from .envs.surgery import REGION_DRILL, classify_region


@dataclass(frozen=True)
class ExpertParams:
    """Shared controller constants. rho1 is the proportional gain applied
    to the remaining error each step."""

    rho1: float = 0.2
    switch_distance_mm: float = 2.0  # drilling phase switch: distance to the entry point
    align_tol_deg: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.rho1 <= 1.0:
            raise ValueError("rho1 must be in (0, 1]")


def nav_expert(states, config: NavConfig, params: ExpertParams = ExpertParams()):
    """Proportional action toward the goal from the true relative state
    (n, 6): translate by rho1 * (p_x, p_y), yaw by rho1 * q_z, clamped to
    the env limits."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.empty((states.shape[0], 3))
    actions[:, 0] = params.rho1 * states[:, 0]
    actions[:, 1] = params.rho1 * states[:, 1]
    actions[:, 2] = params.rho1 * states[:, 5]
    np.clip(actions[:, :2], -config.max_step_mm, config.max_step_mm, out=actions[:, :2])
    np.clip(actions[:, 2], -config.max_step_rad, config.max_step_rad, out=actions[:, 2])
    return actions


def surgery_expert(states, config: SurgeryConfig, params: ExpertParams = ExpertParams()):
    """Two-phase drilling controller on the true goal-frame state (n, 6):
    servo to the skin entry point first, then descend the corridor axis to
    the goal, holding the drill axis aligned throughout. Actions are
    expressed in the drill frame and clamped to the env limits."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    actions = np.empty((n, 6))
    p_l = np.array([0.0, 0.0, -config.skin_to_goal_mm])
    for i in range(n):
        p = states[i, :3]
        q = states[i, 3:]
        angle_deg = math.degrees(np.linalg.norm(q))
        near_entry = np.linalg.norm(p - p_l) <= params.switch_distance_mm
        aligned = angle_deg <= params.align_tol_deg
        inside = classify_region(p, config.skin_to_goal_mm, config.drill_diameter_mm) == REGION_DRILL
        if inside or (near_entry and aligned):
            target = np.zeros(3)  # the goal itself, straight down the corridor
        else:
            target = p_l
        step_goal_frame = params.rho1 * (target - p)
        # actions live in the drill frame: rotate the goal-frame step there
        r_rel = rotation_of(q)
        actions[i, :3] = r_rel.T @ step_goal_frame
        # contracting the full relative rotation keeps the same axis, so
        # the commanded body-frame rotation is just -rho1 * q
        actions[i, 3:] = -params.rho1 * q
    np.clip(actions[:, :3], -config.max_step_mm, config.max_step_mm, out=actions[:, :3])
    np.clip(actions[:, 3:], -config.max_step_rad, config.max_step_rad, out=actions[:, 3:])
    return actions


def heuristic_recon_plan(config: ReconConfig, start_xy_yaw_pitch,
                         scan_half_extents_mm=(30.0, 30.0),
                         pass_spacing_mm: float = 10.0,
                         pitch_amplitude_rad: float = 0.3,
                         target_yaw_rad: float = math.pi,
                         center_xy=(0.0, 0.0)):
    """Open-loop boustrophedon scan serialized to per-step actions.

    From the given start pose: home to the scan rectangle corner and the
    working yaw, then run transverse passes (along x) separated by
    pass_spacing in y, toggling the pitch sign at each pass end. The plan
    is truncated to the episode length; a zero-extent rectangle yields an
    empty plan.
    """
    ex, ey = scan_half_extents_mm
    if ex <= 0.0 or ey <= 0.0:
        return np.zeros((0, 4))
    x0, y0, yaw0, pitch0 = (float(v) for v in start_xy_yaw_pitch)
    cx, cy = center_xy
    actions = []

    def translate(dx_total, dy_total):
        steps = int(math.ceil(max(abs(dx_total), abs(dy_total)) / config.max_step_mm))
        for k in range(steps):
            frac_hi = (k + 1) / steps
            frac_lo = k / steps
            actions.append(
                [dx_total * (frac_hi - frac_lo), dy_total * (frac_hi - frac_lo), 0.0, 0.0]
            )

    def rotate(dyaw_total, dpitch_total):
        steps = int(
            math.ceil(max(abs(dyaw_total), abs(dpitch_total)) / config.max_step_rad)
        )
        for k in range(steps):
            actions.append([0.0, 0.0, dyaw_total / steps, dpitch_total / steps])

    # home: align yaw, then move to the first pass corner. The plan is in
    # probe-frame steps; at the working yaw (pi) the probe x-axis is the
    # patient -x axis and the probe y-axis stays along patient +y.
    rotate(target_yaw_rad - yaw0, -pitch0)

    def to_probe(dx_patient, dy_patient):
        return -dx_patient, dy_patient

    corner = (cx - ex, cy - ey)
    translate(*to_probe(corner[0] - x0, corner[1] - y0))
    n_passes = int(math.floor(2 * ey / pass_spacing_mm)) + 1
    pitch = pitch_amplitude_rad
    direction = 1.0
    rotate(0.0, pitch)
    for p in range(n_passes):
        translate(*to_probe(direction * 2 * ex, 0.0))
        if p < n_passes - 1:
            translate(*to_probe(0.0, pass_spacing_mm))
            rotate(0.0, -2.0 * pitch)
            pitch = -pitch
        direction = -direction
    plan = np.asarray(actions, dtype=np.float64)
    return plan[: config.episode_len]


def plan_path_length_mm(plan) -> float:
    """Analytic check value: total commanded |dx| + |dy| of a plan."""
    if not len(plan):
        return 0.0
    return float(np.abs(plan[:, :2]).sum())
