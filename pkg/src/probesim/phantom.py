"""Procedural CT/label phantoms standing in for real patient volumes.

Two kinds are provided: a flat two-layer `slab` for calibration-style
tests, and a `torso` with an ellipsoidal layered body, a vertebra-like
bone (body cylinder plus posterior process), and planning landmarks
(vertebra frame, probe goal on the skin, drill goal inside the bone, skin
entry point).
"""

from __future__ import annotations

import math

import numpy as np

from . import rng
from .geometry import Pose, rotation_with_z_axis, unit
from .volume import Volume

AIR = 0
SKIN = 1
FAT = 2
MUSCLE = 3
BONE = 4
BONE_CORE = 5

TISSUE_NAMES = {
    AIR: "air",
    SKIN: "skin",
    FAT: "fat",
    MUSCLE: "muscle",
    BONE: "cortical bone",
    BONE_CORE: "trabecular bone",
}

# CT intensity (mean, std) per tissue, HU-like units
TISSUE_CT = {
    AIR: (-1000.0, 0.0),
    SKIN: (30.0, 10.0),
    FAT: (-90.0, 15.0),
    MUSCLE: (45.0, 12.0),
    BONE: (1200.0, 150.0),
    BONE_CORE: (300.0, 80.0),
}

VOXEL_MM = 2.0
GOAL_YAW = 2.5  # rad, canonical probe yaw of the navigation goal

# torso geometry (mm)
TORSO_SEMI_AXES = (150.0, 200.0, 100.0)
VERTEBRA_CENTER = (0.0, 0.0, 35.0)
VERTEBRA_RADIUS = 20.0
VERTEBRA_HALF_LEN = 15.0
CORE_RADIUS = 16.0
CORE_HALF_LEN = 11.0
PROCESS_HALF_XY = 5.0
PROCESS_Z = (50.0, 80.0)
DRILL_ENTRY_XY = (15.0, 10.0)
SKIN_TO_GOAL_MM = 50.0

SLAB_TOP_MM = 100.0
SLAB_FAT_THICKNESS_MM = 20.0


def _ct_from_labels(labels, seed):
    gen = rng.stream(seed, rng.PHANTOM_CT)
    ct = np.full(labels.shape, TISSUE_CT[AIR][0], dtype=np.float32)
    for tissue in (SKIN, FAT, MUSCLE, BONE, BONE_CORE):
        mask = labels == tissue
        n = int(mask.sum())
        if n == 0:
            continue
        mean, std = TISSUE_CT[tissue]
        ct[mask] = np.float32(mean) + np.float32(std) * gen.standard_normal(n).astype(
            np.float32
        )
    np.clip(ct, -1000.0, 3000.0, out=ct)
    return ct


def _grid(origin, dims):
    xs = origin[0] + VOXEL_MM * np.arange(dims[0])
    ys = origin[1] + VOXEL_MM * np.arange(dims[1])
    zs = origin[2] + VOXEL_MM * np.arange(dims[2])
    return (
        xs[:, None, None],
        ys[None, :, None],
        zs[None, None, :],
    )


def _slab(seed):
    origin = (-60.0, -60.0, 0.0)
    dims = (61, 61, 61)
    _, _, z = _grid(origin, dims)
    labels = np.full(dims, AIR, dtype=np.uint8)
    labels[...] = np.where(
        z > SLAB_TOP_MM,
        AIR,
        np.where(z > SLAB_TOP_MM - SLAB_FAT_THICKNESS_MM, FAT, MUSCLE),
    )
    landmarks = {
        "probe_goal": Pose(
            (0.0, 0.0, SLAB_TOP_MM), rotation_with_z_axis((0.0, 0.0, -1.0), GOAL_YAW)
        ),
    }
    return labels, origin, landmarks


def _torso(seed):
    origin = (-160.0, -210.0, -110.0)
    dims = (161, 211, 111)
    x, y, z = _grid(origin, dims)
    a, b, c = TORSO_SEMI_AXES
    rho2 = (x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2

    labels = np.full(dims, AIR, dtype=np.uint8)
    labels[rho2 <= 1.0] = MUSCLE
    labels[(rho2 <= 0.97**2) ^ (rho2 <= 1.0)] = SKIN
    labels[(rho2 <= 0.97**2) & (rho2 > 0.90**2)] = FAT

    vx, vy, vz = VERTEBRA_CENTER
    rad2 = (x - vx) ** 2 + (z - vz) ** 2
    in_body = (rad2 <= VERTEBRA_RADIUS**2) & (np.abs(y - vy) <= VERTEBRA_HALF_LEN)
    in_process = (
        (np.abs(x - vx) <= PROCESS_HALF_XY)
        & (np.abs(y - vy) <= PROCESS_HALF_XY)
        & (z >= PROCESS_Z[0])
        & (z <= PROCESS_Z[1])
    )
    in_core = (rad2 <= CORE_RADIUS**2) & (np.abs(y - vy) <= CORE_HALF_LEN)
    labels[in_body | in_process] = BONE
    labels[in_body & in_core] = BONE_CORE

    # landmarks: vertebra frame, navigation probe goal on the skin apex,
    # drill goal 50 mm along the entry ray, skin entry point
    ex, ey = DRILL_ENTRY_XY
    ez = c * math.sqrt(1.0 - (ex / a) ** 2 - (ey / b) ** 2)
    entry = np.array([ex, ey, ez])
    direction = unit(np.array(VERTEBRA_CENTER) - entry)
    goal_pos = entry + SKIN_TO_GOAL_MM * direction
    goal_rot = rotation_with_z_axis(direction, 0.0)

    landmarks = {
        "vertebra": Pose(VERTEBRA_CENTER, np.eye(3)),
        "probe_goal": Pose((0.0, 0.0, c), rotation_with_z_axis((0.0, 0.0, -1.0), GOAL_YAW)),
        "drill_goal": Pose(goal_pos, goal_rot),
        "skin_entry": Pose(entry, goal_rot),
    }
    return labels, origin, landmarks


def generate_phantom(kind: str, seed: int):
    """Deterministic (ct, labels, landmarks) for `kind` in {slab, torso}."""
    if kind == "slab":
        labels, origin, landmarks = _slab(seed)
    elif kind == "torso":
        labels, origin, landmarks = _torso(seed)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    ct_data = _ct_from_labels(labels, seed)
    spacing = (VOXEL_MM,) * 3
    ct = Volume(ct_data, spacing, origin, kind="ct")
    lab = Volume(labels, spacing, origin, kind="label")
    return ct, lab, landmarks


def analytic_vertebra_volume_mm3():
    """Closed-form solid volume of the torso vertebra (cylinder + process
    box minus their overlap), used as an oracle for voxel counts."""
    r = VERTEBRA_RADIUS
    cyl = math.pi * r**2 * (2.0 * VERTEBRA_HALF_LEN)
    box = (2 * PROCESS_HALF_XY) ** 2 * (PROCESS_Z[1] - PROCESS_Z[0])
    vz = VERTEBRA_CENTER[2]

    def chord(zv):
        u = zv - vz
        if abs(u) >= r:
            return 0.0
        return min(2.0 * math.sqrt(r**2 - u**2), 2 * PROCESS_HALF_XY)

    z0, z1 = PROCESS_Z[0], min(PROCESS_Z[1], vz + r)
    n = 4096
    zs = np.linspace(z0, z1, n)
    overlap = (2 * PROCESS_HALF_XY) * np.trapezoid([chord(zv) for zv in zs], zs)
    return cyl + box - overlap


def upper_surface_points(labels: Volume, bone_labels=(BONE, BONE_CORE)):
    """World centers of bone voxels whose +z neighbor is not bone: the
    dorsally visible bone surface the reconstruction task must cover."""
    mask = np.isin(labels.data, np.asarray(bone_labels))
    upper = mask.copy()
    upper[:, :, :-1] &= ~mask[:, :, 1:]
    idx = np.argwhere(upper)
    return labels.origin_mm + idx * labels.spacing_mm
