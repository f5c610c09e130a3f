"""Iterative refinement: alternate multi-view generation and body fitting.

The outer loop generates N views under a rising guidance scale, extracts
normal maps, silhouettes, and 2D keypoints from them, and fits the body's
pose and shape against all views by gradient descent on a weighted L1
loss over (normal, silhouette, keypoint) residuals. Expression parameters
ride along unchanged. The final iteration only generates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import torch

from .body import BodyParams, ParametricBodyProvider
from .camera import CameraPose, project_points
from .errors import (ConfigError, EmptyObservationError, MVHumanError,
                     RefinementError)
from .render import render_guidance

# Foreground threshold: distance from pure white in [0, 1] image range.
TAU_BACKGROUND = 0.05


@dataclass
class RefinementConfig:
    """Schedule and loss weights of the refinement loop."""

    iterations: int = 4
    cfg_scales: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    opt_steps: tuple[int, ...] = (40, 20, 10)
    denoise_steps: tuple[int, ...] = (15, 15, 15, 25)
    lambda_normal: float = 0.5
    lambda_silhouette: float = 1.0
    lambda_joint: float = 50.0
    lr_pose: float = 0.01
    lr_shape: float = 0.005
    early_stop_window: int = 5
    early_stop_delta: float = 1e-5

    def __post_init__(self):
        K = self.iterations
        if len(self.cfg_scales) != K:
            raise ConfigError(f"need {K} cfg scales, got {len(self.cfg_scales)}")
        if any(b < a for a, b in zip(self.cfg_scales, self.cfg_scales[1:])):
            raise ConfigError("cfg scales must be non-decreasing")
        if len(self.opt_steps) != K - 1:
            raise ConfigError(f"need {K - 1} optimization step counts")
        if len(self.denoise_steps) != K:
            raise ConfigError(f"need {K} denoising step counts")
        if any(w < 0 for w in self.cfg_scales):
            raise ConfigError("cfg scales must be >= 0")


@dataclass
class GeneratedObservations:
    """Per-view observables extracted from generated images."""

    normals: torch.Tensor      # (N, H, W, 3) in [0, 1]
    silhouettes: torch.Tensor  # (N, H, W) in [0, 1]
    keypoints: torch.Tensor    # (N, J, 2) pixels; NaN marks undetected points


class KeypointDetector(Protocol):
    """Pluggable 2D keypoint source for generated views.

    `detect` returns per-view pixel keypoints; `body_points` returns the 3D
    anchors on the current body those keypoints correspond to, so the
    keypoint loss compares like with like.
    """

    def detect(self, rgb: torch.Tensor, normal: torch.Tensor,
               silhouettes: torch.Tensor) -> torch.Tensor: ...

    def body_points(self, body: ParametricBodyProvider,
                    params: BodyParams) -> torch.Tensor: ...


class OracleKeypointDetector:
    """Projects the joints of a known ground-truth body (synthetic pipelines)."""

    def __init__(self, body: ParametricBodyProvider, params: BodyParams,
                 cams: Sequence[CameraPose], resolution: int):
        self.body = body
        self.params = params.detach()
        self.cams = list(cams)
        self.resolution = resolution

    def detect(self, rgb, normal, silhouettes) -> torch.Tensor:
        with torch.no_grad():
            mesh = self.body.build_mesh(self.params)
            return torch.stack([project_points(mesh.joints, cam, self.resolution)
                                for cam in self.cams])

    def body_points(self, body, params) -> torch.Tensor:
        _, joints = body.joint_transforms(params)
        return joints


class PartCentroidDetector:
    """Matches pixels to part albedo colors and reports part centroids.

    Shading under the fixed light scales colors without changing chroma, so
    matching runs on chroma direction. Parts hidden in a view come back as
    NaN and are masked out of the keypoint loss.
    """

    def __init__(self, part_colors: dict[int, tuple[float, float, float]]):
        self.labels = sorted(part_colors)
        palette = torch.tensor([part_colors[l] for l in self.labels], dtype=torch.float32)
        self.chroma = palette / palette.norm(dim=1, keepdim=True).clamp(min=1e-6)

    def detect(self, rgb, normal, silhouettes) -> torch.Tensor:
        N, H, W, _ = rgb.shape
        out = torch.full((N, len(self.labels), 2), math.nan)
        ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float32) + 0.5,
                                torch.arange(W, dtype=torch.float32) + 0.5,
                                indexing="ij")
        for i in range(N):
            fg = silhouettes[i] > 0.5
            if not fg.any():
                continue
            px = rgb[i][fg]
            px = px / px.norm(dim=1, keepdim=True).clamp(min=1e-6)
            match = torch.argmax(px @ self.chroma.T, dim=1)
            for p in range(len(self.labels)):
                sel = match == p
                if sel.sum() >= 3:
                    out[i, p, 0] = xs[fg][sel].mean()
                    out[i, p, 1] = ys[fg][sel].mean()
        return out

    def body_points(self, body, params) -> torch.Tensor:
        return body.part_centers(params)


def extract_observations(rgb_images: torch.Tensor, normal_images: torch.Tensor,
                         detector: KeypointDetector,
                         tau_bg: float = TAU_BACKGROUND) -> GeneratedObservations:
    """Turn generated view images into refinement observables.

    Silhouettes are thresholded from the white background of the RGB
    images; normal maps pass through; keypoints come from the detector.

    Raises:
        EmptyObservationError: a view contains no foreground pixels.
    """
    dist = torch.linalg.norm(rgb_images - 1.0, dim=-1) / math.sqrt(3.0)
    sil = (dist > tau_bg).to(rgb_images.dtype)
    for i in range(sil.shape[0]):
        if sil[i].sum() == 0:
            raise EmptyObservationError(f"view {i}: image is entirely background")
    keypoints = detector.detect(rgb_images, normal_images, sil)
    return GeneratedObservations(normals=normal_images, silhouettes=sil,
                                 keypoints=keypoints)


def render_observations(body: ParametricBodyProvider, params: BodyParams,
                        cams: Sequence[CameraPose], resolution: int,
                        detector: KeypointDetector) -> GeneratedObservations:
    """Self-consistent observations rendered directly from body parameters."""
    with torch.no_grad():
        mesh = body.build_mesh(params)
        bundles = [render_guidance(mesh, cam, resolution) for cam in cams]
    normals = torch.stack([b.normal_map for b in bundles])
    sils = torch.stack([b.silhouette for b in bundles])
    keypoints = detector.detect(None, normals, sils)
    return GeneratedObservations(normals=normals, silhouettes=sils, keypoints=keypoints)


def refinement_loss(body: ParametricBodyProvider, pose: torch.Tensor,
                    shape: torch.Tensor, expression: torch.Tensor,
                    obs: GeneratedObservations, cams: Sequence[CameraPose],
                    cfg: RefinementConfig, detector: KeypointDetector,
                    resolution: int) -> tuple[torch.Tensor, list[float]]:
    """Weighted L1 loss over (normal, silhouette, keypoint) residuals, all views.

    Keypoint residuals are measured in image fractions (pixels / resolution)
    so loss weights are resolution-independent.
    """
    params = BodyParams(pose, shape, expression)
    mesh = body.build_mesh(params)
    anchors = detector.body_points(body, params).to(pose.dtype)
    valid = torch.isfinite(obs.keypoints).all(dim=-1)

    total = pose.new_zeros(())
    per_view = []
    for i, cam in enumerate(cams):
        bundle = render_guidance(mesh, cam, resolution)
        l_normal = (bundle.normal_map - obs.normals[i].to(pose.dtype)).abs().mean()
        l_sil = (bundle.silhouette - obs.silhouettes[i].to(pose.dtype)).abs().mean()
        kp = project_points(anchors, cam, resolution)
        if valid[i].any():
            resid = (kp[valid[i]] - obs.keypoints[i][valid[i]].to(pose.dtype)).abs()
            l_joint = resid.mean() / resolution
        else:
            l_joint = pose.new_zeros(())
        view_loss = (cfg.lambda_normal * l_normal + cfg.lambda_silhouette * l_sil
                     + cfg.lambda_joint * l_joint)
        if not torch.isfinite(view_loss):
            raise RefinementError(f"non-finite refinement loss at view {i}", view_index=i)
        total = total + view_loss
        per_view.append(float(view_loss.detach()))
    return total / len(cams), per_view


def refine_body(body: ParametricBodyProvider, params: BodyParams,
                obs: GeneratedObservations, cams: Sequence[CameraPose],
                cfg: RefinementConfig, steps: int, *,
                detector: KeypointDetector, resolution: int) -> tuple[BodyParams, list[float]]:
    """Fit pose and shape to the observations; expression stays frozen.

    Adam with separate pose/shape step sizes; returns the best-loss
    parameters seen. Stops early when the best loss has not improved by
    more than `early_stop_delta` over the trailing window.
    """
    pose = params.pose.detach().clone().requires_grad_(True)
    shape = params.shape.detach().clone().requires_grad_(True)
    expression = params.expression.detach().clone()
    opt = torch.optim.Adam([{"params": [pose], "lr": cfg.lr_pose},
                            {"params": [shape], "lr": cfg.lr_shape}])

    loss0, _ = refinement_loss(body, pose, shape, expression, obs, cams,
                               cfg, detector, resolution)
    best_loss = float(loss0.detach())
    best = (pose.detach().clone(), shape.detach().clone())
    history = [best_loss]

    for step in range(steps):
        opt.zero_grad()
        loss, _ = refinement_loss(body, pose, shape, expression, obs, cams,
                                  cfg, detector, resolution)
        loss.backward()
        opt.step()
        with torch.no_grad():
            cur, _ = refinement_loss(body, pose, shape, expression, obs, cams,
                                     cfg, detector, resolution)
        cur = float(cur)
        if cur < best_loss:
            best_loss = cur
            best = (pose.detach().clone(), shape.detach().clone())
        history.append(best_loss)
        w = cfg.early_stop_window
        if len(history) > w and history[-w - 1] - history[-1] < cfg.early_stop_delta:
            break

    return BodyParams(best[0], best[1], expression), history


class MultiViewGenerator(Protocol):
    """Generates N view images from the current body guidance."""

    def generate(self, params: BodyParams, w: float, steps: int,
                 seed: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (rgb, normal) images, each (N, H, W, 3) in [0, 1]."""
        ...


@dataclass
class RefinementTrace:
    """Structured per-iteration record of one refinement run."""

    records: list[dict] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        self.records.append(dict(kwargs))


def joint_position_error(body: ParametricBodyProvider, params: BodyParams,
                         reference: BodyParams) -> float:
    """Mean 3D joint distance between two parameter sets, canonical units."""
    with torch.no_grad():
        _, j_a = body.joint_transforms(params.to(torch.float64))
        _, j_b = body.joint_transforms(reference.to(torch.float64))
        return float(torch.linalg.norm(j_a - j_b, dim=-1).mean())


def iterative_refine(generator: MultiViewGenerator, body: ParametricBodyProvider,
                     init_params: BodyParams, target_cams: Sequence[CameraPose],
                     cfg: RefinementConfig, *, detector: KeypointDetector,
                     resolution: int, seed: int = 0,
                     gt_params: BodyParams | None = None,
                     ) -> tuple[tuple[torch.Tensor, torch.Tensor], BodyParams, RefinementTrace]:
    """Run the full generate / fit loop.

    Executes exactly K generation passes with the configured guidance
    scales and denoising step counts; each of the first K - 1 passes is
    followed by a body-parameter optimization against the generated views.

    Returns:
        (final (rgb, normal) images, refined parameters, trace).
    """
    params = init_params.detach()
    trace = RefinementTrace()
    K = cfg.iterations
    images = None

    for k in range(1, K + 1):
        w = cfg.cfg_scales[k - 1]
        d_steps = cfg.denoise_steps[k - 1]
        try:
            images = generator.generate(params, w, d_steps, seed + k - 1)
            record = {"iteration": k, "cfg_scale": w, "denoise_steps": d_steps}
            if k < K:
                obs = extract_observations(images[0], images[1], detector)
                o_steps = cfg.opt_steps[k - 1]
                params, history = refine_body(body, params, obs, target_cams, cfg,
                                              o_steps, detector=detector,
                                              resolution=resolution)
                record["opt_steps"] = o_steps
                record["final_loss"] = history[-1]
            if gt_params is not None:
                record["joint_error"] = joint_position_error(body, params, gt_params)
            trace.add(**record)
        except MVHumanError as exc:
            exc.args = (f"refinement iteration {k}: {exc}",) + exc.args[1:]
            raise

    return images, params, trace
