"""Synthetic multi-view dataset: procedural subjects, orbit renders, file IO.

Subjects are seeded draws of body pose/shape plus flat per-part albedo
colors. Each subject is rendered from N evenly spaced azimuths at a shared
random elevation, centered and spanning 90% of the image height on a white
background, plus a jittered frontal reference view. Images are 8-bit PNGs;
every file write is atomic (temp + rename) and bit-reproducible from the
dataset manifest.
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .body import BodyParams, SimpleBody
from .camera import CameraPose, fit_scale, orbit_cameras, project_points, relative_viewpoint
from .errors import EmptyObservationError, ViewSetMismatchError
from .render import (BACKGROUND_NORMAL, GuidanceBundle, rasterize, render_guidance,
                     render_rgb, shade_rgb)

ELEVATION_RANGE = 15.0        # degrees, sampled per subject
REFERENCE_JITTER = 18.0       # degrees of frontal azimuth jitter
ORBIT_RADIUS = 2.7            # canonical units; depth ordering only
HEIGHT_FILL = 0.9             # subject height as a fraction of image height

# Joint rotation limits (radians) for sampled poses, keyed by part name
# prefix; the root stays near frontal so reference views are meaningful.
POSE_LIMITS = {"torso": 0.25, "head": 0.3, "l_upper_arm": 0.5, "r_upper_arm": 0.5,
               "l_lower_arm": 0.5, "r_lower_arm": 0.5, "l_upper_leg": 0.35,
               "r_upper_leg": 0.35, "l_lower_leg": 0.35, "r_lower_leg": 0.35}
SHAPE_LIMIT = 1.2


@dataclass
class SyntheticSubject:
    """Seeded subject: body parameters plus per-part albedo colors."""

    seed: int
    params: BodyParams
    part_colors: dict[int, tuple[float, float, float]]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "params": self.params.to_dict(),
                "part_colors": {str(k): list(v) for k, v in self.part_colors.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSubject":
        colors = {int(k): tuple(v) for k, v in d["part_colors"].items()}
        return cls(d["seed"], BodyParams.from_dict(d["params"]), colors)


def generate_subject(seed: int, body: SimpleBody | None = None) -> SyntheticSubject:
    """Deterministically sample a subject. Seed 0 is the canonical rest pose."""
    body = body or SimpleBody()
    rng = np.random.default_rng(seed)
    pose = np.zeros((body.num_joints, 3))
    shape = np.zeros(body.num_shape)
    if seed != 0:
        for i, part in enumerate(body.parts):
            limit = POSE_LIMITS.get(part.name, 0.4)
            pose[i] = rng.uniform(-limit, limit, size=3)
        shape = rng.uniform(-SHAPE_LIMIT, SHAPE_LIMIT, size=body.num_shape)

    colors = {}
    for part in body.parts:
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.5, 0.9)
        val = rng.uniform(0.45, 0.8)
        colors[part.label] = colorsys.hsv_to_rgb(hue, sat, val)

    params = BodyParams(torch.tensor(pose, dtype=torch.float32),
                        torch.tensor(shape, dtype=torch.float32))
    return SyntheticSubject(seed=seed, params=params, part_colors=colors)


@dataclass
class ViewRecord:
    camera: CameraPose
    rgb: torch.Tensor            # (H, W, 3) in [0, 1]
    bundle: GuidanceBundle


@dataclass
class ViewSet:
    """All renders of one subject: N orbit views plus the reference view."""

    subject: SyntheticSubject
    elevation: float
    views: list[ViewRecord]
    reference: ViewRecord

    @property
    def azimuths(self) -> list[float]:
        return [v.camera.azimuth for v in self.views]


def render_viewset(subject: SyntheticSubject, n_views: int, resolution: int,
                   elevation_seed: int = 0, body: SimpleBody | None = None,
                   reference_jitter: float = REFERENCE_JITTER) -> ViewSet:
    """Render the subject on the N-view orbit protocol.

    The shared elevation and the reference azimuth jitter are drawn from a
    stream keyed by (elevation_seed, subject seed), so datasets regenerate
    bit-identically from their manifest.
    """
    if n_views < 4:
        raise ValueError("orbit protocol needs at least 4 views")
    body = body or SimpleBody()
    rng = np.random.default_rng([elevation_seed, subject.seed])
    elevation = float(rng.uniform(-ELEVATION_RANGE, ELEVATION_RANGE))
    ref_azimuth = float(rng.uniform(-reference_jitter, reference_jitter)) % 360.0

    scale = fit_scale(body.rest_height, resolution, HEIGHT_FILL)
    mesh = body.build_mesh(subject.params)

    def record(cam: CameraPose) -> ViewRecord:
        with torch.no_grad():
            raster = rasterize(mesh, cam, resolution)
            normal_map = (raster.normal_cam + 1.0) / 2.0
            bg = torch.tensor(BACKGROUND_NORMAL, dtype=normal_map.dtype)
            normal_map = torch.where(raster.covered.unsqueeze(-1), normal_map, bg)
            bundle = GuidanceBundle(
                normal_map=normal_map,
                segmentation_map=raster.segmentation,
                silhouette=raster.silhouette,
                joints2d=project_points(mesh.joints, cam, resolution))
            rgb = shade_rgb(raster, cam, subject.part_colors)
        return ViewRecord(camera=cam, rgb=rgb, bundle=bundle)

    views = [record(cam) for cam in orbit_cameras(n_views, elevation, ORBIT_RADIUS, scale)]
    reference = record(CameraPose(elevation, ref_azimuth, ORBIT_RADIUS, scale))
    return ViewSet(subject=subject, elevation=elevation, views=views,
                   reference=reference)


# ---------------------------------------------------------------------------
# Image and latent conversions
# ---------------------------------------------------------------------------


def image_to_uint8(img: torch.Tensor) -> np.ndarray:
    return np.asarray((img.detach().cpu().numpy() * 255.0).round(), dtype=np.uint8)


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def to_latent(img: torch.Tensor) -> torch.Tensor:
    """(H, W, 3) image in [0, 1] -> (3, H, W) latent in [-1, 1]."""
    return img.permute(2, 0, 1) * 2.0 - 1.0

def from_latent(latent: torch.Tensor) -> torch.Tensor:
    """(3, H, W) latent -> (H, W, 3) image clamped to [0, 1]."""
    return ((latent + 1.0) / 2.0).clamp(0.0, 1.0).permute(1, 2, 0)


def seg_to_onehot(seg: torch.Tensor, n_labels: int) -> torch.Tensor:
    """(H, W) labels -> (n_labels, H, W) float one-hot (label 0 = background)."""
    return torch.nn.functional.one_hot(seg.long(), n_labels).permute(2, 0, 1).float()


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


def _atomic_write(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _save_png(path: Path, arr: np.ndarray) -> None:
    _atomic_write(path, lambda tmp: Image.fromarray(arr).save(tmp, format="PNG"))


def _azimuth_tag(azimuth: float) -> str:
    return f"az{azimuth:06.2f}"


def parse_azimuth_tag(name: str) -> float:
    """Inverse of the filename azimuth encoding; raises on foreign names."""
    if not name.startswith("az"):
        raise ValueError(f"{name!r} does not carry an azimuth tag")
    return float(name[2:8])


def save_viewset(viewset: ViewSet, root: Path) -> Path:
    """Write one subject's renders under root/subject_<seed>/."""
    sub_dir = root / f"subject_{viewset.subject.seed:04d}"
    sub_dir.mkdir(parents=True, exist_ok=True)

    def dump(rec: ViewRecord, prefix: str) -> None:
        _save_png(sub_dir / f"{prefix}_rgb.png", image_to_uint8(rec.rgb))
        _save_png(sub_dir / f"{prefix}_normal.png", image_to_uint8(rec.bundle.normal_map))
        _save_png(sub_dir / f"{prefix}_seg.png",
                  rec.bundle.segmentation_map.numpy().astype(np.uint8))
        _save_png(sub_dir / f"{prefix}_sil.png",
                  image_to_uint8(rec.bundle.silhouette))

    meta = {
        "subject": viewset.subject.to_dict(),
        "elevation": viewset.elevation,
        "views": [],
        "reference": {"camera": viewset.reference.camera.to_dict()},
        "format_version": FORMAT_VERSION,
    }
    for rec in viewset.views:
        dump(rec, _azimuth_tag(rec.camera.azimuth))
        meta["views"].append({"camera": rec.camera.to_dict(),
                              "joints2d": rec.bundle.joints2d.tolist()})
    dump(viewset.reference, "reference")
    _atomic_write(sub_dir / "meta.json",
                  lambda tmp: tmp.write_text(json.dumps(meta, indent=1, sort_keys=True)))
    return sub_dir


@dataclass
class LoadedView:
    camera: CameraPose
    rgb: torch.Tensor
    normal: torch.Tensor
    segmentation: torch.Tensor
    silhouette: torch.Tensor


@dataclass
class LoadedSubject:
    subject: SyntheticSubject
    elevation: float
    views: list[LoadedView]
    reference: LoadedView


def load_subject(sub_dir: Path) -> LoadedSubject:
    meta = json.loads((sub_dir / "meta.json").read_text())
    subject = SyntheticSubject.from_dict(meta["subject"])

    def load(prefix: str, camera: CameraPose) -> LoadedView:
        def png(kind: str) -> np.ndarray:
            return np.asarray(Image.open(sub_dir / f"{prefix}_{kind}.png"))
        return LoadedView(
            camera=camera,
            rgb=uint8_to_image(png("rgb")),
            normal=uint8_to_image(png("normal")),
            segmentation=torch.from_numpy(png("seg").astype(np.int64)),
            silhouette=uint8_to_image(png("sil")),
        )

    views = [load(_azimuth_tag(v["camera"]["azimuth"]), CameraPose.from_dict(v["camera"]))
             for v in meta["views"]]
    reference = load("reference", CameraPose.from_dict(meta["reference"]["camera"]))
    return LoadedSubject(subject=subject, elevation=meta["elevation"],
                         views=views, reference=reference)


def write_dataset(root: Path, seeds: list[int], n_views: int, resolution: int,
                  elevation_seed: int = 0, config_hash: str = "",
                  body: SimpleBody | None = None) -> dict:
    """Generate and write a dataset; returns the manifest."""
    body = body or SimpleBody()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        subject = generate_subject(seed, body)
        save_viewset(render_viewset(subject, n_views, resolution,
                                    elevation_seed, body), root)
    manifest = {"seeds": list(seeds), "n_views": n_views, "resolution": resolution,
                "elevation_seed": elevation_seed, "config_hash": config_hash,
                "format_version": FORMAT_VERSION}
    _atomic_write(root / "manifest.json",
                  lambda tmp: tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True)))
    return manifest


def load_dataset(root: Path) -> tuple[dict, list[LoadedSubject]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    subjects = [load_subject(root / f"subject_{seed:04d}") for seed in manifest["seeds"]]
    return manifest, subjects


# ---------------------------------------------------------------------------
# Reference preprocessing
# ---------------------------------------------------------------------------


def preprocess_reference(image: torch.Tensor, resolution: int,
                         mask: torch.Tensor | None = None,
                         fill: float = HEIGHT_FILL,
                         tau_bg: float = 0.05) -> torch.Tensor:
    """Normalize a reference image to the training framing.

    The subject is recentered and rescaled so its silhouette spans
    `fill` of the image height, composited on pure white, and resampled to
    a square of the requested resolution.

    Args:
        image: (H, W, 3) floats in [0, 1].
        mask: optional (H, W) foreground mask; otherwise derived from the
            distance to the white background.

    Raises:
        EmptyObservationError: the foreground mask is empty.
    """
    img = image.detach().cpu().numpy().astype(np.float64)
    if mask is None:
        fg = np.linalg.norm(img - 1.0, axis=-1) / math.sqrt(3.0) > tau_bg
    else:
        fg = mask.detach().cpu().numpy() > 0.5
        img = img * fg[..., None] + (1.0 - fg[..., None])
    if not fg.any():
        raise EmptyObservationError("reference image has no foreground")

    ys, xs = np.nonzero(fg)
    cy, cx = (ys.min() + ys.max() + 1) / 2.0, (xs.min() + xs.max() + 1) / 2.0
    height = ys.max() - ys.min() + 1
    zoom = (fill * resolution) / height

    # Output pixel (r, c) samples input at (r - R/2)/zoom + cy and likewise in x.
    matrix = np.array([1.0 / zoom, 1.0 / zoom])
    offset = np.array([cy - resolution / 2.0 / zoom, cx - resolution / 2.0 / zoom])
    out = np.stack([
        ndimage.affine_transform(img[..., c], matrix, offset=offset,
                                 output_shape=(resolution, resolution),
                                 order=1, mode="constant", cval=1.0)
        for c in range(3)
    ], axis=-1)
    return torch.from_numpy(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Training tensors
# ---------------------------------------------------------------------------


def guidance_tensors(bundle_or_view, n_labels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(seg one-hot, normal map in [-1, 1]) encoder inputs for one view."""
    if isinstance(bundle_or_view, GuidanceBundle):
        seg, normal = bundle_or_view.segmentation_map, bundle_or_view.normal_map
    else:
        seg, normal = bundle_or_view.segmentation, bundle_or_view.normal
    return seg_to_onehot(seg, n_labels), normal.permute(2, 0, 1) * 2.0 - 1.0


def build_training_samples(subjects: list[LoadedSubject], stats,
                           n_labels: int) -> list:
    """Assemble per-subject training tensors (imported late to avoid cycles)."""
    from .training import TrainingSample

    samples = []
    for loaded in subjects:
        seg_list, nrm_list, rgb_list, nlat_list, rot_list = [], [], [], [], []
        for view in loaded.views:
            seg, nrm = guidance_tensors(view, n_labels)
            seg_list.append(seg)
            nrm_list.append(nrm)
            rgb_list.append(to_latent(view.rgb))
            nlat_list.append(stats.normalize(to_latent(view.normal)))
            rel = relative_viewpoint(loaded.reference.camera, view.camera)
            rot_list.append(torch.tensor(rel.rotation, dtype=torch.float32))
        samples.append(TrainingSample(
            rgb_latents=torch.stack(rgb_list),
            normal_latents=torch.stack(nlat_list),
            guidance_seg=torch.stack(seg_list),
            guidance_normal=torch.stack(nrm_list),
            ref_rgb_latent=to_latent(loaded.reference.rgb),
            ref_normal_latent=stats.normalize(to_latent(loaded.reference.normal)),
            rotations=torch.stack(rot_list),
        ))
    return samples


def compute_stats(subjects: list[LoadedSubject]):
    """Normalization statistics over a training set's latents."""
    from .training import NormalizationStats

    rgb = torch.stack([to_latent(v.rgb) for s in subjects for v in s.views])
    normal = torch.stack([to_latent(v.normal) for s in subjects for v in s.views])
    return NormalizationStats.from_latents(normal, rgb)


def match_view_files(dir_a: Path, dir_b: Path, suffix: str = "_rgb.png") -> list[tuple[Path, Path]]:
    """Pair equally named view files from two directories.

    Raises:
        ViewSetMismatchError: the directories cover different views.
    """
    names_a = sorted(p.name for p in Path(dir_a).glob(f"*{suffix}"))
    names_b = sorted(p.name for p in Path(dir_b).glob(f"*{suffix}"))
    if names_a != names_b or not names_a:
        raise ViewSetMismatchError(
            f"view sets differ: {len(names_a)} vs {len(names_b)} files")
    return [(Path(dir_a) / n, Path(dir_b) / n) for n in names_a]
