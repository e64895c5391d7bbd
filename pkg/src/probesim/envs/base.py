"""Shared environment machinery: patient bundles, the batched step/reset
skeleton, and skin-constrained probe placement."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .. import rng
from ..acoustics import AcousticTable, NoiseFields, UsParams, UsSimulator
from ..geometry import Pose, rotation_with_z_axis
from ..phantom import generate_phantom
from ..volume import (
    SkinSurface,
    Volume,
    extract_skin_surface,
    load_landmarks,
    load_volume,
    save_landmarks,
    save_volume,
)
from .configs import ConfigError


@dataclass
class Patient:
    """Everything simulation needs about one subject: volumes, skin
    surface, planning landmarks, acoustic parameters, and the fixed noise
    fields. Immutable after construction; shared read-only by all env
    slots."""

    ct: Volume
    labels: Volume
    skin: SkinSurface
    landmarks: dict
    table: AcousticTable
    noise: NoiseFields
    name: str

    @staticmethod
    def from_phantom(kind: str, seed: int, table: AcousticTable | None = None) -> "Patient":
        ct, labels, landmarks = generate_phantom(kind, seed)
        return Patient(
            ct=ct,
            labels=labels,
            skin=extract_skin_surface(labels),
            landmarks=landmarks,
            table=table or AcousticTable.default(),
            noise=NoiseFields.for_volume(ct, seed),
            name=f"{kind}:{seed}",
        )

    @staticmethod
    def load(directory, table: AcousticTable | None = None, noise_seed: int = 0) -> "Patient":
        ct = load_volume(os.path.join(directory, "ct.svol"))
        labels = load_volume(os.path.join(directory, "labels.svol"))
        landmarks = load_landmarks(os.path.join(directory, "landmarks.json"))
        table_path = os.path.join(directory, "acoustic_table.json")
        if table is None:
            table = (
                AcousticTable.from_json(table_path)
                if os.path.exists(table_path)
                else AcousticTable.default()
            )
        return Patient(
            ct=ct,
            labels=labels,
            skin=extract_skin_surface(labels),
            landmarks=landmarks,
            table=table,
            noise=NoiseFields.for_volume(ct, noise_seed),
            name=str(directory),
        )

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        save_volume(self.ct, os.path.join(directory, "ct.svol"))
        save_volume(self.labels, os.path.join(directory, "labels.svol"))
        save_landmarks(os.path.join(directory, "landmarks.json"), self.landmarks)
        self.table.to_json(os.path.join(directory, "acoustic_table.json"))

    @staticmethod
    def from_config(spec: dict, table: AcousticTable | None = None) -> "Patient":
        if "path" in spec:
            return Patient.load(spec["path"], table=table, noise_seed=int(spec.get("seed", 0)))
        return Patient.from_phantom(spec["kind"], int(spec.get("seed", 0)), table=table)

    def landmark(self, name: str) -> Pose:
        try:
            return self.landmarks[name]
        except KeyError:
            raise ConfigError(
                f"patient {self.name!r} has no {name!r} landmark "
                f"(available: {sorted(self.landmarks)})"
            ) from None


@dataclass
class StepResult:
    """One batched transition. observation is task-shaped (or None with
    rendering disabled); cost is nonzero only for the surgery task."""

    observation: object
    reward: np.ndarray
    cost: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    info: dict


class TaskEnv:
    """Batched fixed-length episode skeleton.

    Every random decision draws from a counter-based stream keyed by the
    slot's episode seed, so trajectories depend only on (seed, actions),
    never on batch size, slot index, or thread scheduling. Episodes run to
    the configured length; `terminated` never rises (there is no success
    cutoff), `truncated` rises at the final step and stepping past it is an
    error.
    """

    task_name = ""
    action_dim = 0

    def __init__(self, patient: Patient, config, n_envs: int, us_params: UsParams = None,
                 threads: int = 1, render: bool = True):
        if n_envs < 1:
            raise ConfigError("n_envs must be >= 1")
        self.patient = patient
        self.config = config
        self.n_envs = int(n_envs)
        self.us_params = us_params or UsParams()
        self.threads = int(threads)
        self.render_enabled = bool(render)
        self.env_seeds = np.zeros(self.n_envs, dtype=np.uint64)
        self.step_count = 0
        self._needs_reset = True
        self._sim = None
        if self.render_enabled:
            self._sim = UsSimulator(
                patient.ct,
                patient.labels,
                patient.table,
                patient.noise,
                self.us_params,
                config.image,
                threads=self.threads,
            )

    def _assign_seeds(self, seeds):
        if np.isscalar(seeds):
            self.env_seeds = np.array(
                [rng.mix64(int(seeds), i) for i in range(self.n_envs)], dtype=np.uint64
            )
        else:
            seeds = np.asarray(seeds, dtype=np.uint64)
            if seeds.shape != (self.n_envs,):
                raise ValueError(f"need {self.n_envs} seeds, got shape {seeds.shape}")
            self.env_seeds = seeds.copy()
        self.step_count = 0
        self._needs_reset = False

    def _reset_stream(self, slot: int):
        return rng.stream(int(self.env_seeds[slot]), rng.ENV_RESET)

    def _step_stream(self, slot: int):
        return rng.stream(int(self.env_seeds[slot]), rng.ENV_STEP, substream=self.step_count)

    def _check_step(self, actions):
        if self._needs_reset:
            raise RuntimeError("episode over (or never started): call reset first")
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, self.action_dim):
            raise ValueError(
                f"actions must have shape ({self.n_envs}, {self.action_dim}), got {actions.shape}"
            )
        return actions

    def _advance_clock(self):
        self.step_count += 1
        truncated = self.step_count >= self.config.episode_len
        if truncated:
            self._needs_reset = True
        flags = np.full(self.n_envs, truncated)
        return np.zeros(self.n_envs, dtype=bool), flags

    def skin_pose(self, x: float, y: float, yaw: float) -> Pose:
        """Probe contact frame at (x, y): origin on the heightfield, z-axis
        into the body along the inverted outward normal, yawed about it."""
        z, normal = self.patient.skin.sample(x, y)
        return Pose(
            np.array([x, y, z]), rotation_with_z_axis(-normal, yaw)
        )

    def clamp_to_domain(self, x, y):
        hx, hy = self.config.domain_half_extents_mm
        cx = min(max(x, -hx), hx)
        cy = min(max(y, -hy), hy)
        return cx, cy, (cx != x or cy != y)

    def close(self):
        if self._sim is not None:
            self._sim.close()
