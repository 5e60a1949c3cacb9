"""Volumetric-primitive human bodies: skinning, rendering, fitting and diffusion sampling."""

import os

# the bundled TBB is too old for numba; OpenMP is the working parallel backend here
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"

from .body import (  # noqa: E402
    Pose,
    PrimitiveFrames,
    RiggedMesh,
    base_scales,
    init_primitive_frames,
    lbs_pose,
    load_rigged_mesh,
    make_toy_body,
    pose_primitives,
)
from .camera import Camera, generate_rays  # noqa: E402
from .primitives import PrimitiveSet  # noqa: E402
from .render import MarchConfig, RenderOutput, render, render_sequence, sample_field  # noqa: E402

__all__ = [
    "Camera",
    "MarchConfig",
    "Pose",
    "PrimitiveFrames",
    "PrimitiveSet",
    "RenderOutput",
    "RiggedMesh",
    "base_scales",
    "generate_rays",
    "init_primitive_frames",
    "lbs_pose",
    "load_rigged_mesh",
    "make_toy_body",
    "pose_primitives",
    "render",
    "render_sequence",
    "sample_field",
]
