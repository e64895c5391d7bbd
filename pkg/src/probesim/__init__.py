"""Batched, deterministic ultrasound-guided task simulation.

Physics-based ultrasound image formation from CT/label volumes plus three
benchmark task environments (probe navigation, bone-surface reconstruction,
safety-constrained drilling) with scripted experts, dataset recording, and
a CLI.
"""

from .acoustics import (
    AcousticTable,
    NoiseFields,
    TissueAcoustics,
    UsFrame,
    UsParams,
    UsSimulator,
    simulate_us,
)
from .envs import (
    NavConfig,
    NavEnv,
    Patient,
    ReconConfig,
    ReconEnv,
    StepResult,
    SurgeryConfig,
    SurgeryEnv,
    TaskSetup,
    load_setup,
    make_env,
)
from .geometry import Pose, angle_axis_of, relative_pose, rotation_of
from .phantom import generate_phantom
from .volume import (
    PlaneSlices,
    SkinSurface,
    SliceSpec,
    Volume,
    extract_plane_slices,
    extract_skin_surface,
    load_volume,
    save_volume,
)

__version__ = "0.1.0"
