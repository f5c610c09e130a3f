"""Conditioning encoders: camera embeddings, pose guidance, reference features.

Viewpoint identity enters the denoiser in exactly two places: camera
embeddings added to the time embedding, and the per-view pose-guidance
feature added to the noisy latent. Subject identity enters through
reference features cached from a structural copy of the denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .camera import RelativeViewpoint
from .errors import ConfigError, ShapeMismatchError


class CameraEncoder(nn.Module):
    """Two-layer perceptron mapping a flattened 3x3 rotation to an embedding."""

    def __init__(self, d_emb: int):
        super().__init__()
        self.d_emb = d_emb
        self.net = nn.Sequential(
            nn.Linear(9, d_emb),
            nn.SiLU(),
            nn.Linear(d_emb, d_emb),
        )

    def forward(self, rot_flat: torch.Tensor) -> torch.Tensor:
        return self.net(rot_flat)


def embed_camera(rel: RelativeViewpoint, time_emb: torch.Tensor,
                 encoder: CameraEncoder) -> torch.Tensor:
    """Encode a relative viewpoint and add it to the time embedding."""
    if time_emb.shape[-1] != encoder.d_emb:
        raise ShapeMismatchError(
            f"time embedding dim {time_emb.shape[-1]} != {encoder.d_emb}")
    rot = torch.as_tensor(rel.flat_rotation(), dtype=time_emb.dtype)
    return encoder(rot) + time_emb


def validate_stride_schedule(guidance_resolution: int, latent_resolution: int,
                             strides: tuple[int, ...]) -> None:
    factor = 1
    for s in strides:
        if s not in (1, 2):
            raise ConfigError(f"unsupported stride {s}; use 1 or 2")
        factor *= s
    if guidance_resolution != latent_resolution * factor:
        raise ConfigError(
            f"stride schedule {strides} maps {guidance_resolution} to "
            f"{guidance_resolution // factor}, not latent {latent_resolution}")


class PoseGuidanceEncoder(nn.Module):
    """Four-stage convolution encoder from guidance maps to latent-shaped features.

    A dropped guidance signal is represented by a learned null image pushed
    through the same convolutions, keeping the unconditional branch
    in-distribution rather than zeroing the feature.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 guidance_resolution: int, latent_resolution: int,
                 strides: tuple[int, int, int, int] = (2, 2, 2, 1),
                 hidden: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        validate_stride_schedule(guidance_resolution, latent_resolution, strides)
        self.guidance_resolution = guidance_resolution
        self.latent_resolution = latent_resolution
        channels = (in_channels, *hidden, out_channels)
        layers: list[nn.Module] = []
        for i, stride in enumerate(strides):
            layers.append(nn.Conv2d(channels[i], channels[i + 1], 3,
                                    stride=stride, padding=1))
            if i < len(strides) - 1:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        self.null_image = nn.Parameter(torch.zeros(in_channels, guidance_resolution,
                                                   guidance_resolution))
        # Start neutral: guidance initially contributes nothing to the latent.
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, guidance: torch.Tensor | None,
                batch_size: int = 1) -> torch.Tensor:
        """Encode guidance maps, or the learned null image when dropped.

        Args:
            guidance: (B, C_in, Rg, Rg) maps, or None for the null image.
            batch_size: batch to replicate the null image over when dropped.
        """
        if guidance is None:
            guidance = self.null_image.unsqueeze(0).expand(
                batch_size, *self.null_image.shape)
        if guidance.shape[-1] != self.guidance_resolution:
            raise ShapeMismatchError(
                f"guidance resolution {guidance.shape[-1]} != "
                f"{self.guidance_resolution}")
        return self.net(guidance)


@dataclass
class ReferenceFeatureCache:
    """Per-block reference features, extracted once and reused for a whole run.

    One entry per attention-bearing denoiser block, each holding the
    pre-attention feature map of the RGB and normal reference passes.
    Immutable after construction; safe to share across views and steps.
    """

    features: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)

    def block_ids(self) -> set[str]:
        return set(self.features)

    def get(self, block_id: str, branch: str) -> torch.Tensor:
        return self.features[block_id][branch]

    def checksum(self) -> np.ndarray:
        """Order-independent fingerprint used by cache-reuse tests."""
        parts = []
        for block in sorted(self.features):
            for branch in sorted(self.features[block]):
                parts.append(self.features[block][branch].detach().double().sum().item())
        return np.asarray(parts)


def extract_reference_features(ref_model, ref_rgb_latent: torch.Tensor,
                               ref_normal_latent: torch.Tensor) -> ReferenceFeatureCache:
    """Run the reference branch on clean reference latents and cache features.

    The reference model is a structural copy of the denoiser; both branch
    passes run at t = 0 with an identity relative viewpoint and no pose
    guidance, recording each attention block's pre-attention feature map.
    No noise is added to the reference inputs.

    Args:
        ref_model: denoiser-shaped module exposing `reference_forward`.
        ref_rgb_latent: (B, C, R, R) clean reference image latent.
        ref_normal_latent: (B, C, R, R) clean, normalized reference normal latent.
    """
    cache = ReferenceFeatureCache()
    with torch.no_grad() if not ref_model.training else torch.enable_grad():
        rgb_feats = ref_model.reference_forward(ref_rgb_latent, branch="rgb")
        normal_feats = ref_model.reference_forward(ref_normal_latent, branch="normal")
    for block_id in rgb_feats:
        cache.features[block_id] = {"rgb": rgb_feats[block_id],
                                    "normal": normal_feats[block_id]}
    return cache
