"""Weak-perspective orbit cameras and relative viewpoints.

All cameras look at the origin (the subject center). A camera is given by
spherical elevation/azimuth in degrees, an orbit radius in canonical units,
and a weak-perspective scale in pixels per canonical unit. Projection
ignores depth: x_pix = scale * x_cam + center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


def wrap_degrees(delta: float) -> float:
    """Wrap an angle difference into (-180, 180]."""
    return 180.0 - ((180.0 - delta) % 360.0)


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera state.

    Attributes:
        elevation: degrees above the horizontal plane.
        azimuth: degrees in [0, 360); 0 is the frontal view on +z.
        radius: orbit distance in canonical units.
        scale: weak-perspective scale in pixels per canonical unit.
    """

    elevation: float
    azimuth: float
    radius: float
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    def world_to_cam(self) -> np.ndarray:
        """Rotation taking world points into the camera frame.

        In the camera frame the camera sits at (0, 0, radius) looking down -z,
        so larger z means closer to the camera.
        """
        return _rot_x(self.elevation) @ _rot_y(-self.azimuth)

    def cam_to_world(self) -> np.ndarray:
        return self.world_to_cam().T

    def to_dict(self) -> dict:
        return {"elevation": self.elevation, "azimuth": self.azimuth,
                "radius": self.radius, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["elevation"], d["azimuth"], d["radius"], d["scale"])


@dataclass(frozen=True)
class RelativeViewpoint:
    """Viewpoint of a target camera expressed relative to a reference camera."""

    delta_elevation: float
    delta_azimuth: float
    delta_radius: float
    rotation: np.ndarray  # (3, 3) relative cam-to-world rotation

    def flat_rotation(self) -> np.ndarray:
        return self.rotation.reshape(9).astype(np.float64)


def relative_viewpoint(ref: CameraPose, target: CameraPose) -> RelativeViewpoint:
    """Deltas (target - ref, azimuth wrapped) and the relative rotation.

    Under the orbit protocol (equal elevation and radius) the rotation is a
    pure rotation about the vertical axis by the azimuth delta.
    """
    d_elev = target.elevation - ref.elevation
    d_azim = wrap_degrees(target.azimuth - ref.azimuth)
    d_rad = target.radius - ref.radius
    rotation = target.cam_to_world() @ ref.world_to_cam()
    return RelativeViewpoint(d_elev, d_azim, d_rad, rotation)


def fit_scale(body_height: float, resolution: int, fill: float = 0.9) -> float:
    """Weak-perspective scale making the rest body span `fill` of the image height."""
    return fill * resolution / body_height


def orbit_cameras(n_views: int, elevation: float, radius: float, scale: float) -> list[CameraPose]:
    """N cameras at evenly spaced azimuths over [0, 360), shared elevation."""
    return [CameraPose(elevation, 360.0 * i / n_views, radius, scale)
            for i in range(n_views)]


def project_points(points: torch.Tensor, cam: CameraPose, resolution: int) -> torch.Tensor:
    """Weak-perspective projection of (N, 3) world points to (N, 2) pixels.

    Pixel coordinates follow image convention: x right, y down, origin at the
    top-left corner; pixel centers at integer + 0.5.
    """
    W = torch.as_tensor(cam.world_to_cam(), dtype=points.dtype)
    p_cam = points @ W.T
    half = resolution / 2.0
    x = cam.scale * p_cam[:, 0] + half
    y = half - cam.scale * p_cam[:, 1]
    return torch.stack([x, y], dim=-1)


def camera_depth(points: torch.Tensor, cam: CameraPose) -> torch.Tensor:
    """Distance-like depth along the view axis; smaller is closer."""
    W = torch.as_tensor(cam.world_to_cam(), dtype=points.dtype)
    return cam.radius - (points @ W.T)[:, 2]
