"""High-level glue: model construction, checkpoints, and view generation."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .body import SimpleBody, BodyParams, load_body_definition
from .camera import CameraPose, relative_viewpoint
from .checkpoint import (load_state_dict_arrays, read_checkpoint,
                         state_dict_to_arrays, write_checkpoint)
from .conditioning import extract_reference_features
from .config import ExperimentConfig
from .dataset import from_latent, guidance_tensors, to_latent
from .denoiser import DenoiseConditions, DualBranchDenoiser, denoise
from .errors import CheckpointError, ConfigError
from .refine import MultiViewGenerator
from .render import render_guidance
from .sampling import DualLatent, ddim_sample
from .schedule import DiffusionSchedule
from .training import NormalizationStats


def build_body(config: ExperimentConfig) -> SimpleBody:
    definition = None
    if config.data.body_definition is not None:
        definition = load_body_definition(config.data.body_definition)
    return SimpleBody(definition, stacks=config.data.body_stacks,
                      sectors=config.data.body_sectors)


def build_models(config: ExperimentConfig, seed: int = 0
                 ) -> tuple[DualBranchDenoiser, DualBranchDenoiser]:
    """Denoiser plus its reference copy, sharing the same initialization."""
    m = config.model
    offsets = {}
    for block, angles in m.view_selection.items():
        from .attention import resolve_offsets
        offsets[block] = resolve_offsets(angles, m.n_views)
    torch.manual_seed(seed)
    model = DualBranchDenoiser(
        in_channels=m.in_channels, base_channels=m.base_channels,
        channel_mults=tuple(m.channel_mults), attn_levels=tuple(m.attn_levels),
        heads=m.heads, d_emb=m.d_emb, n_views=m.n_views,
        latent_resolution=m.latent_resolution,
        guidance_resolution=m.guidance_resolution,
        guidance_strides=tuple(m.guidance_strides), seg_channels=m.seg_channels,
        view_offsets=offsets)
    ref_model = copy.deepcopy(model)
    return model, ref_model


def build_schedule(config: ExperimentConfig) -> DiffusionSchedule:
    if config.model.schedule != "cosine":
        raise ConfigError(f"unknown schedule {config.model.schedule!r}")
    return DiffusionSchedule.cosine(config.model.T)


def save_model_checkpoint(path: str | Path, model: DualBranchDenoiser,
                          ref_model: DualBranchDenoiser, stats: NormalizationStats,
                          config: ExperimentConfig, *, stage: int,
                          extra: dict | None = None) -> None:
    arrays = {}
    arrays.update(state_dict_to_arrays(model, "model"))
    arrays.update(state_dict_to_arrays(ref_model, "ref_model"))
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "normalization": stats.to_dict(),
        "schedule": {"kind": config.model.schedule, "T": config.model.T},
        "stage": stage,
    }
    manifest.update(extra or {})
    write_checkpoint(path, arrays, manifest)


def load_model_checkpoint(path: str | Path
                          ) -> tuple[DualBranchDenoiser, DualBranchDenoiser,
                                     NormalizationStats, DiffusionSchedule,
                                     ExperimentConfig, dict]:
    arrays, manifest = read_checkpoint(path)
    for key in ("config", "config_hash", "normalization", "schedule"):
        if key not in manifest:
            raise CheckpointError(f"{path}: manifest lacks {key!r}")
    config = ExperimentConfig.from_dict(manifest["config"])
    model, ref_model = build_models(config)
    load_state_dict_arrays(model, arrays, "model")
    load_state_dict_arrays(ref_model, arrays, "ref_model")
    model.eval()
    ref_model.eval()
    stats = NormalizationStats.from_dict(manifest["normalization"])
    schedule = DiffusionSchedule.cosine(manifest["schedule"]["T"])
    return model, ref_model, stats, schedule, config, manifest


@dataclass
class GenerationInputs:
    """Reference conditioning shared by every pass of one generation run."""

    ref_rgb: torch.Tensor       # (H, W, 3) image in [0, 1]
    ref_normal: torch.Tensor    # (H, W, 3) image in [0, 1]
    ref_camera: CameraPose
    target_cams: list[CameraPose]


class ModelGenerator(MultiViewGenerator):
    """Generates view images from a trained model under body guidance.

    Reference features are extracted once and reused across all views,
    denoising steps, and refinement iterations.
    """

    def __init__(self, model: DualBranchDenoiser, ref_model: DualBranchDenoiser,
                 stats: NormalizationStats, schedule: DiffusionSchedule,
                 body: SimpleBody, inputs: GenerationInputs, seg_channels: int):
        self.model = model.eval()
        self.stats = stats
        self.schedule = schedule
        self.body = body
        self.inputs = inputs
        self.seg_channels = seg_channels
        ref_model.eval()
        with torch.no_grad():
            self.ref_cache = extract_reference_features(
                ref_model,
                to_latent(inputs.ref_rgb).unsqueeze(0),
                stats.normalize(to_latent(inputs.ref_normal)).unsqueeze(0))
        rots = [relative_viewpoint(inputs.ref_camera, cam).rotation
                for cam in inputs.target_cams]
        self.rotations = torch.tensor(np.stack(rots), dtype=torch.float32).unsqueeze(0)

    def generate(self, params: BodyParams, w: float, steps: int,
                 seed: int) -> tuple[torch.Tensor, torch.Tensor]:
        n = len(self.inputs.target_cams)
        res = self.model.latent_resolution
        with torch.no_grad():
            mesh = self.body.build_mesh(params.detach())
            seg_list, nrm_list = [], []
            for cam in self.inputs.target_cams:
                bundle = render_guidance(mesh, cam, res)
                seg, nrm = guidance_tensors(bundle, self.seg_channels)
                seg_list.append(seg)
                nrm_list.append(nrm)
            cond = DenoiseConditions(
                ref_cache=self.ref_cache, rotations=self.rotations,
                guidance_rgb=torch.stack(seg_list).unsqueeze(0),
                guidance_normal=torch.stack(nrm_list).unsqueeze(0))
            uncond = DenoiseConditions(ref_cache=self.ref_cache,
                                       rotations=self.rotations)

            def cond_fn(x, nl, t):
                return denoise(self.model, x, nl, t, cond, mv_enabled=True)

            def uncond_fn(x, nl, t):
                return denoise(self.model, x, nl, t, uncond, mv_enabled=True)

            latent = ddim_sample(cond_fn, self.schedule,
                                 (1, n, self.model.in_channels, res, res),
                                 steps, w, seed, uncond_fn=uncond_fn)
        return decode_dual(latent, self.stats)


def decode_dual(latent: DualLatent, stats: NormalizationStats
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Dual latents -> ((N, H, W, 3) rgb, (N, H, W, 3) normal) images."""
    rgb = torch.stack([from_latent(l) for l in latent.rgb[0]])
    normal_lat = stats.denormalize(latent.normal[0])
    normal = torch.stack([from_latent(l) for l in normal_lat])
    return rgb, normal
