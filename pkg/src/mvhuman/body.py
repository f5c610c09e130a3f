"""Parametric articulated body: a kinematic tree of ellipsoid parts.

The body is a stand-in for a full statistical human model: a tree of
tessellated ellipsoid parts driven by per-joint axis-angle pose, a shape
vector that scales part girths, and a pass-through expression vector.
Everything downstream only needs what this module provides: a watertight
per-part mesh with per-vertex normals and part labels, 3D joints, and
differentiability of all vertex data with respect to pose and shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import yaml

from .errors import ConfigError, ParameterShapeError

# Local frame convention: y up, x right, z toward the frontal camera.
VERTICAL_AXIS = np.array([0.0, 1.0, 0.0])


@dataclass
class BodyParams:
    """Pose/shape/expression parameters of the articulated body.

    Attributes:
        pose: (J, 3) per-joint axis-angle rotations in radians.
        shape: (S,) girth scale coefficients, unitless.
        expression: (E,) carried but never used by the simplified body.
    """

    pose: torch.Tensor
    shape: torch.Tensor
    expression: torch.Tensor = field(default_factory=lambda: torch.zeros(0))

    def __post_init__(self):
        if not torch.is_tensor(self.pose):
            self.pose = torch.as_tensor(self.pose, dtype=torch.float32)
        if not torch.is_tensor(self.shape):
            self.shape = torch.as_tensor(self.shape, dtype=self.pose.dtype)
        if not torch.is_tensor(self.expression):
            self.expression = torch.as_tensor(self.expression, dtype=self.pose.dtype)

    def detach(self) -> "BodyParams":
        return BodyParams(self.pose.detach().clone(), self.shape.detach().clone(),
                          self.expression.detach().clone())

    def to(self, dtype: torch.dtype) -> "BodyParams":
        return BodyParams(self.pose.to(dtype), self.shape.to(dtype), self.expression.to(dtype))

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.detach().cpu().numpy().tolist(),
            "shape": self.shape.detach().cpu().numpy().tolist(),
            "expression": self.expression.detach().cpu().numpy().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(torch.tensor(d["pose"], dtype=torch.float32),
                   torch.tensor(d["shape"], dtype=torch.float32),
                   torch.tensor(d.get("expression", []), dtype=torch.float32))


@dataclass
class BodyMesh:
    """Posed body mesh with per-vertex attributes.

    vertices/normals keep the autograd graph of the params that built them;
    faces and labels are static integer data.
    """

    vertices: torch.Tensor        # (V, 3)
    faces: torch.Tensor           # (F, 3) long
    vertex_normals: torch.Tensor  # (V, 3) unit length
    vertex_parts: torch.Tensor    # (V,) long, labels in [1, P]
    face_parts: torch.Tensor      # (F,) long
    joints: torch.Tensor          # (J, 3)


@dataclass(frozen=True)
class PartSpec:
    """One ellipsoid part of the body definition."""

    name: str
    parent: int                   # parent joint index, -1 for the root
    offset: tuple[float, float, float]   # joint position in parent joint frame
    axis: tuple[float, float, float]     # bone direction in the joint frame
    length: float                 # joint-to-tip distance along axis
    radius: float                 # cross-section radius at rest
    cap: float                    # extra half-length of the ellipsoid beyond length/2
    label: int                    # segmentation label (>= 1)
    shape_bindings: tuple[int, ...]      # shape coefficients scaling this part's girth


class ParametricBodyProvider(Protocol):
    """Contract for swappable body backends (e.g. a licensed statistical model).

    Any provider mapping parameters to a mesh + joints + part labels can be
    dropped in behind this interface without touching render or refinement
    code.
    """

    @property
    def num_joints(self) -> int: ...

    @property
    def num_shape(self) -> int: ...

    @property
    def num_parts(self) -> int: ...

    @property
    def rest_height(self) -> float: ...

    def build_mesh(self, params: BodyParams) -> BodyMesh: ...


# Girth-scale sensitivity per unit shape coefficient.
SHAPE_GAIN = 0.1

# Default humanoid: 10 parts / 10 joints, ~1.8 canonical units tall,
# pelvis (root joint) at the origin, T-pose rest with arms along +-x.
DEFAULT_BODY_DEFINITION = {
    "name": "simple-humanoid",
    "num_shape": 4,
    "parts": [
        {"name": "torso", "parent": -1, "offset": [0.0, 0.0, 0.0],
         "axis": [0.0, 1.0, 0.0], "length": 0.55, "radius": 0.165, "cap": 0.06,
         "label": 1, "shape_bindings": [0, 1]},
        {"name": "head", "parent": 0, "offset": [0.0, 0.60, 0.0],
         "axis": [0.0, 1.0, 0.0], "length": 0.24, "radius": 0.105, "cap": 0.03,
         "label": 2, "shape_bindings": [0, 1]},
        {"name": "l_upper_arm", "parent": 0, "offset": [0.20, 0.50, 0.0],
         "axis": [1.0, 0.0, 0.0], "length": 0.30, "radius": 0.055, "cap": 0.02,
         "label": 3, "shape_bindings": [0, 2]},
        {"name": "l_lower_arm", "parent": 2, "offset": [0.30, 0.0, 0.0],
         "axis": [1.0, 0.0, 0.0], "length": 0.28, "radius": 0.045, "cap": 0.02,
         "label": 4, "shape_bindings": [0, 2]},
        {"name": "r_upper_arm", "parent": 0, "offset": [-0.20, 0.50, 0.0],
         "axis": [-1.0, 0.0, 0.0], "length": 0.30, "radius": 0.055, "cap": 0.02,
         "label": 5, "shape_bindings": [0, 2]},
        {"name": "r_lower_arm", "parent": 4, "offset": [-0.30, 0.0, 0.0],
         "axis": [-1.0, 0.0, 0.0], "length": 0.28, "radius": 0.045, "cap": 0.02,
         "label": 6, "shape_bindings": [0, 2]},
        {"name": "l_upper_leg", "parent": 0, "offset": [0.10, -0.05, 0.0],
         "axis": [0.0, -1.0, 0.0], "length": 0.42, "radius": 0.075, "cap": 0.03,
         "label": 7, "shape_bindings": [0, 3]},
        {"name": "l_lower_leg", "parent": 6, "offset": [0.0, -0.42, 0.0],
         "axis": [0.0, -1.0, 0.0], "length": 0.42, "radius": 0.06, "cap": 0.03,
         "label": 8, "shape_bindings": [0, 3]},
        {"name": "r_upper_leg", "parent": 0, "offset": [-0.10, -0.05, 0.0],
         "axis": [0.0, -1.0, 0.0], "length": 0.42, "radius": 0.075, "cap": 0.03,
         "label": 9, "shape_bindings": [0, 3]},
        {"name": "r_lower_leg", "parent": 8, "offset": [0.0, -0.42, 0.0],
         "axis": [0.0, -1.0, 0.0], "length": 0.42, "radius": 0.06, "cap": 0.03,
         "label": 10, "shape_bindings": [0, 3]},
    ],
}


def axis_angle_to_matrix(v: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, (..., 3) axis-angle -> (..., 3, 3) rotation.

    Uses the sinc form R = I + a(theta) K + b(theta) K^2 with K built from
    the unnormalized vector and Taylor fallbacks near zero, so gradients are
    correct at the rest pose.
    """
    theta_sq = (v * v).sum(-1)
    small = theta_sq < 1e-8
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    vx, vy, vz = v.unbind(-1)
    zero = torch.zeros_like(vx)
    K = torch.stack([
        torch.stack([zero, -vz, vy], -1),
        torch.stack([vz, zero, -vx], -1),
        torch.stack([-vy, vx, zero], -1),
    ], -2)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def _unit_sphere_template(stacks: int, sectors: int) -> tuple[np.ndarray, np.ndarray]:
    """Watertight UV-sphere template: (V, 3) unit vertices, (F, 3) faces."""
    verts = [np.array([0.0, 1.0, 0.0]), np.array([0.0, -1.0, 0.0])]
    for i in range(1, stacks):
        phi = np.pi * i / stacks                      # polar angle from +y
        for j in range(sectors):
            theta = 2.0 * np.pi * j / sectors
            verts.append(np.array([
                np.sin(phi) * np.cos(theta),
                np.cos(phi),
                np.sin(phi) * np.sin(theta),
            ]))
    verts = np.stack(verts)

    def ring(i, j):
        return 2 + (i - 1) * sectors + (j % sectors)

    faces = []
    for j in range(sectors):  # top / bottom caps
        faces.append([0, ring(1, j), ring(1, j + 1)])
        faces.append([1, ring(stacks - 1, j + 1), ring(stacks - 1, j)])
    for i in range(1, stacks - 1):
        for j in range(sectors):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    return verts, np.asarray(faces, dtype=np.int64)


def _frame_from_axis(axis: np.ndarray) -> np.ndarray:
    """Rotation whose +y column is `axis`; fixes the part's local frame."""
    y = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(y[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, y)
    x = x / np.linalg.norm(x)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1)


class SimpleBody:
    """Default :class:`ParametricBodyProvider`: ellipsoid parts on a joint tree.

    Args:
        definition: body definition dict (see DEFAULT_BODY_DEFINITION).
        stacks, sectors: tessellation of the per-part sphere template.
    """

    def __init__(self, definition: dict | None = None, stacks: int = 12, sectors: int = 16):
        definition = definition if definition is not None else DEFAULT_BODY_DEFINITION
        self.name = definition.get("name", "body")
        self._num_shape = int(definition["num_shape"])
        self.parts: list[PartSpec] = []
        for i, raw in enumerate(definition["parts"]):
            parent = int(raw["parent"])
            if parent >= i:
                raise ConfigError(f"part {raw['name']}: parent {parent} must precede it")
            bindings = tuple(int(b) for b in raw.get("shape_bindings", ()))
            if any(b < 0 or b >= self._num_shape for b in bindings):
                raise ConfigError(f"part {raw['name']}: shape binding out of range")
            self.parts.append(PartSpec(
                name=raw["name"], parent=parent,
                offset=tuple(float(v) for v in raw["offset"]),
                axis=tuple(float(v) for v in raw["axis"]),
                length=float(raw["length"]), radius=float(raw["radius"]),
                cap=float(raw.get("cap", 0.0)), label=int(raw["label"]),
                shape_bindings=bindings,
            ))
        if len(self.parts) < 4:
            raise ConfigError("body needs at least 4 parts")
        labels = [p.label for p in self.parts]
        if len(set(labels)) != len(labels) or min(labels) < 1:
            raise ConfigError("part labels must be unique and >= 1")

        self.stacks, self.sectors = stacks, sectors
        tpl_v, tpl_f = _unit_sphere_template(stacks, sectors)
        self._tpl_v = torch.from_numpy(tpl_v)
        self._tpl_f = torch.from_numpy(tpl_f)

        self._offsets = np.stack([np.asarray(p.offset) for p in self.parts])
        self._frames = np.stack([_frame_from_axis(np.asarray(p.axis)) for p in self.parts])
        # Binding matrix: girth_scale = 1 + SHAPE_GAIN * B @ shape.
        B = np.zeros((len(self.parts), self._num_shape))
        for i, p in enumerate(self.parts):
            for b in p.shape_bindings:
                B[i, b] = 1.0
        self._bindings = B
        self._rest_height = self._measure_rest_height()

    # ------------------------------------------------------------------
    # Provider surface
    # ------------------------------------------------------------------

    @property
    def num_joints(self) -> int:
        return len(self.parts)

    @property
    def num_shape(self) -> int:
        return self._num_shape

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    @property
    def part_labels(self) -> list[int]:
        return [p.label for p in self.parts]

    @property
    def rest_height(self) -> float:
        return self._rest_height

    def zero_params(self, dtype: torch.dtype = torch.float32) -> BodyParams:
        return BodyParams(torch.zeros(self.num_joints, 3, dtype=dtype),
                          torch.zeros(self.num_shape, dtype=dtype),
                          torch.zeros(0, dtype=dtype))

    def validate(self, params: BodyParams) -> None:
        if params.pose.shape != (self.num_joints, 3):
            raise ParameterShapeError(
                f"pose shape {tuple(params.pose.shape)} != ({self.num_joints}, 3)")
        if params.shape.shape != (self.num_shape,):
            raise ParameterShapeError(
                f"shape shape {tuple(params.shape.shape)} != ({self.num_shape},)")
        for name, t in (("pose", params.pose), ("shape", params.shape),
                        ("expression", params.expression)):
            if t.numel() and not torch.isfinite(t).all():
                raise ParameterShapeError(f"{name} contains non-finite values")

    def joint_transforms(self, params: BodyParams) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward kinematics.

        Returns:
            rotations: (J, 3, 3) world rotation of each joint frame.
            positions: (J, 3) world joint positions.
        """
        self.validate(params)
        dtype = params.pose.dtype
        local_R = axis_angle_to_matrix(params.pose)
        offsets = torch.as_tensor(self._offsets, dtype=dtype)
        rots, pos = [], []
        for i, part in enumerate(self.parts):
            if part.parent < 0:
                R_p = torch.eye(3, dtype=dtype)
                t_p = torch.zeros(3, dtype=dtype)
            else:
                R_p, t_p = rots[part.parent], pos[part.parent]
            t = t_p + R_p @ offsets[i]
            R = R_p @ local_R[i]
            rots.append(R)
            pos.append(t)
        return torch.stack(rots), torch.stack(pos)

    def build_mesh(self, params: BodyParams) -> BodyMesh:
        """Pose the body; deterministic and differentiable w.r.t. params."""
        rots, pos = self.joint_transforms(params)
        dtype = params.pose.dtype
        tpl_v = self._tpl_v.to(dtype)
        frames = torch.as_tensor(self._frames, dtype=dtype)
        girth = 1.0 + SHAPE_GAIN * (
            torch.as_tensor(self._bindings, dtype=dtype) @ params.shape)

        verts, normals, v_parts, f_parts, faces = [], [], [], [], []
        v_base = 0
        for i, part in enumerate(self.parts):
            semi_bone = 0.5 * part.length + part.cap
            semi = torch.stack([part.radius * girth[i],
                                torch.as_tensor(semi_bone, dtype=dtype),
                                part.radius * girth[i]])
            center = torch.tensor([0.0, 0.5 * part.length, 0.0], dtype=dtype)
            v_local = frames[i] @ (tpl_v * semi + center).T          # (3, V)
            n_local = frames[i] @ (tpl_v / semi).T
            R_w = rots[i]
            verts.append((R_w @ v_local).T + pos[i])
            n_world = (R_w @ n_local).T
            normals.append(n_world / torch.linalg.norm(n_world, dim=-1, keepdim=True))
            v_parts.append(torch.full((tpl_v.shape[0],), part.label, dtype=torch.long))
            f_parts.append(torch.full((self._tpl_f.shape[0],), part.label, dtype=torch.long))
            faces.append(self._tpl_f + v_base)
            v_base += tpl_v.shape[0]

        return BodyMesh(
            vertices=torch.cat(verts),
            faces=torch.cat(faces),
            vertex_normals=torch.cat(normals),
            vertex_parts=torch.cat(v_parts),
            face_parts=torch.cat(f_parts),
            joints=pos,
        )

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def part_centers(self, params: BodyParams) -> torch.Tensor:
        """(P, 3) world centers of the part ellipsoids (bone midpoints)."""
        rots, pos = self.joint_transforms(params)
        dtype = params.pose.dtype
        frames = torch.as_tensor(self._frames, dtype=dtype)
        centers = []
        for i, part in enumerate(self.parts):
            c_local = frames[i] @ torch.tensor([0.0, 0.5 * part.length, 0.0], dtype=dtype)
            centers.append(rots[i] @ c_local + pos[i])
        return torch.stack(centers)

    def subtree_joints(self, joint: int) -> list[int]:
        """Joint indices in the kinematic subtree rooted at `joint` (inclusive)."""
        out = [joint]
        for i, part in enumerate(self.parts):
            if part.parent in out and i not in out:
                out.append(i)
        return sorted(out)

    def _measure_rest_height(self) -> float:
        with torch.no_grad():
            mesh = self.build_mesh(self.zero_params(torch.float64))
            ys = mesh.vertices[:, 1]
            return float(ys.max() - ys.min())


def load_body_definition(path: str | Path) -> dict:
    """Read a body definition file (YAML mapping, see DEFAULT_BODY_DEFINITION)."""
    with open(path) as f:
        definition = yaml.safe_load(f)
    if not isinstance(definition, dict) or "parts" not in definition:
        raise ConfigError(f"{path}: not a body definition file")
    return definition


def save_body_definition(definition: dict, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(definition, f, sort_keys=False)


def build_body(params: BodyParams, body: ParametricBodyProvider | None = None) -> BodyMesh:
    """Pose a body provider (default: SimpleBody with the stock definition)."""
    provider = body if body is not None else SimpleBody()
    return provider.build_mesh(params)
