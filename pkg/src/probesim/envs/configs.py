"""Task configurations and their JSON schema.

A task config file is a JSON object:

    {
      "task": "nav" | "recon" | "surgery",
      "patient": {"kind": "torso", "seed": 0}     # or {"path": "DIR"}
      "params": { ... per-task fields below ... },   # optional overrides
      "us": { ... UsParams fields ... }              # optional overrides
    }

Unknown keys anywhere raise ConfigError; every field has the documented
default, so {} is a valid params block.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..acoustics import UsParams
from ..volume import SliceSpec


class ConfigError(ValueError):
    pass


NAV_IMAGE = dict(height=200, width=150, res_x=0.5, res_z=0.5)
SURGERY_IMAGE = dict(height=50, width=37, res_x=2.0, res_z=2.0, elevation=5, res_e=10.0)


@dataclass(frozen=True)
class NavConfig:
    """Probe navigation toward a goal frame on the skin."""

    image: SliceSpec = field(default_factory=lambda: SliceSpec(**NAV_IMAGE))
    init_half_extent_mm: float = 65.0  # 130 x 130 region about the goal
    yaw_range_rad: tuple = (1.5, 3.5)
    w1: float = 0.045
    episode_len: int = 300
    max_step_mm: float = 2.0
    max_step_rad: float = 0.05
    domain_half_extents_mm: tuple = (100.0, 135.0)

    def __post_init__(self):
        if self.init_half_extent_mm <= 0 or self.w1 <= 0:
            raise ConfigError("init extent and w1 must be positive")


@dataclass(frozen=True)
class ReconConfig:
    """Bone-surface reconstruction by scanning with yaw and pitch."""

    image: SliceSpec = field(default_factory=lambda: SliceSpec(**NAV_IMAGE))
    grid_dims: tuple = (40, 40, 40)
    grid_res_mm: float = 3.0
    slab_half_mm: float = 1.5
    miss_prob: float = 0.2
    w2: float = 0.01
    w3: float = 1.0
    init_half_extent_mm: float = 15.0  # 30 x 30 region about the vertebra
    yaw_range_rad: tuple = (1.5, 3.5)
    episode_len: int = 300
    max_step_mm: float = 2.0
    max_step_rad: float = 0.05
    pitch_limit_rad: float = 0.6
    domain_half_extents_mm: tuple = (100.0, 135.0)

    def __post_init__(self):
        if not 0.0 <= self.miss_prob < 1.0:
            raise ConfigError("miss_prob must be in [0, 1)")
        if any(d < 1 for d in self.grid_dims):
            raise ConfigError("grid dims must be >= 1")


@dataclass(frozen=True)
class SurgeryConfig:
    """Safety-constrained drilling toward a goal frame in the bone."""

    image: SliceSpec = field(default_factory=lambda: SliceSpec(**SURGERY_IMAGE))
    skin_to_goal_mm: float = 50.0  # l: goal depth below the skin entry
    drill_diameter_mm: float = 6.0  # d: safe corridor diameter
    probe_offset_mm: float = 30.0
    probe_jitter_mm: float = 5.0  # lambda: tangential randomization
    w4: float = 30.0
    w5: float = 5.0
    w6: float = 300.0
    episode_len: int = 600
    max_step_mm: float = 1.0
    max_step_rad: float = 0.02
    init_lateral_mm: float = 15.0
    init_height_mm: tuple = (10.0, 30.0)
    init_tilt_rad: float = 0.2

    def __post_init__(self):
        if self.drill_diameter_mm <= 0 or self.skin_to_goal_mm <= 0:
            raise ConfigError("drill diameter and skin-to-goal distance must be positive")
        if self.probe_jitter_mm < 0:
            raise ConfigError("probe jitter must be >= 0")


TASK_CONFIGS = {"nav": NavConfig, "recon": ReconConfig, "surgery": SurgeryConfig}


def _build(cls, data, context):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{context}: unknown key {key!r}")
        if key == "image":
            value = SliceSpec(**value) if isinstance(value, dict) else value
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


@dataclass(frozen=True)
class TaskSetup:
    """Fully resolved task description: which task, which patient, with
    which parameters."""

    task: str
    patient: dict
    params: object
    us: UsParams

    def to_dict(self):
        params = dataclasses.asdict(self.params)
        params["image"] = dataclasses.asdict(self.params.image)
        return {
            "task": self.task,
            "patient": dict(self.patient),
            "params": params,
            "us": dataclasses.asdict(self.us),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def load_setup(source) -> TaskSetup:
    """Build a TaskSetup from a task name, dict, JSON path, or TaskSetup."""
    if isinstance(source, TaskSetup):
        return source
    if isinstance(source, str) and source in TASK_CONFIGS:
        data = {"task": source}
    elif isinstance(source, dict):
        data = source
    else:
        try:
            with open(source, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - {"task", "patient", "params", "us"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    task = data.get("task")
    if task not in TASK_CONFIGS:
        raise ConfigError(f"task must be one of {sorted(TASK_CONFIGS)}, got {task!r}")
    patient = data.get("patient", {"kind": "torso", "seed": 0})
    if not isinstance(patient, dict) or not ({"kind", "path"} & set(patient)):
        raise ConfigError("patient must carry 'kind' (+'seed') or 'path'")
    params = _build(TASK_CONFIGS[task], data.get("params", {}), f"{task} params")
    us = _build(UsParams, data.get("us", {}), "us params")
    return TaskSetup(task=task, patient=dict(patient), params=params, us=us)
