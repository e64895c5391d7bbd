"""Batched task environments and their configuration."""

from .base import Patient, StepResult, TaskEnv
from .configs import (
    ConfigError,
    NavConfig,
    ReconConfig,
    SurgeryConfig,
    TaskSetup,
    load_setup,
)
from .navigation import NavEnv, nav_metrics
from .reconstruction import ReconEnv, voxelize_in_frame
from .surgery import (
    REGION_DRILL,
    REGION_FREE,
    REGION_UNSAFE,
    SurgeryEnv,
    classify_region,
    surgery_metrics,
)

TASK_ENVS = {"nav": NavEnv, "recon": ReconEnv, "surgery": SurgeryEnv}


def make_env(config, n_envs=1, threads=1, render=True, patient=None):
    """Build a task environment from a task name, config dict, or config
    file path. `render=False` skips image formation (rewards, states, and
    metrics are unchanged); pass a Patient to reuse one across envs."""
    setup = load_setup(config)
    if patient is None:
        patient = Patient.from_config(setup.patient)
    cls = TASK_ENVS[setup.task]
    return cls(
        patient, setup.params, n_envs, us_params=setup.us, threads=threads, render=render
    )


__all__ = [
    "ConfigError",
    "NavConfig",
    "NavEnv",
    "Patient",
    "ReconConfig",
    "ReconEnv",
    "REGION_DRILL",
    "REGION_FREE",
    "REGION_UNSAFE",
    "StepResult",
    "SurgeryConfig",
    "SurgeryEnv",
    "TaskEnv",
    "TaskSetup",
    "TASK_ENVS",
    "classify_region",
    "load_setup",
    "make_env",
    "nav_metrics",
    "surgery_metrics",
    "voxelize_in_frame",
]
