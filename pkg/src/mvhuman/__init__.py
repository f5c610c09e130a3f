"""Multi-view human image generation with pose-guided diffusion and refinement."""

__version__ = "0.1.0"

from .body import BodyMesh, BodyParams, SimpleBody, build_body
from .camera import CameraPose, RelativeViewpoint, relative_viewpoint
from .render import GuidanceBundle, render_guidance
from .schedule import DiffusionSchedule
from .sampling import DualLatent, cfg_combine, ddim_sample
from .refine import RefinementConfig, iterative_refine, refine_body

__all__ = [
    "BodyMesh", "BodyParams", "SimpleBody", "build_body",
    "CameraPose", "RelativeViewpoint", "relative_viewpoint",
    "GuidanceBundle", "render_guidance",
    "DiffusionSchedule", "DualLatent", "cfg_combine", "ddim_sample",
    "RefinementConfig", "iterative_refine", "refine_body",
]
