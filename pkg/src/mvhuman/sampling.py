"""Classifier-free guidance and deterministic DDIM sampling.

Guidance applies to the pose-guidance condition only: the unconditional
pass drops the rendered body maps (running the encoders on their learned
null images) while reference features and camera embeddings stay on. At
w = 0 sampling is purely guidance-free; at w = 1 purely conditional.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ShapeMismatchError
from .schedule import DiffusionSchedule

DenoiseFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor],
                     tuple[torch.Tensor, torch.Tensor]]


@dataclass
class DualLatent:
    """Paired RGB and normal latents with identical shapes."""

    rgb: torch.Tensor
    normal: torch.Tensor

    def __post_init__(self):
        if self.rgb.shape != self.normal.shape:
            raise ShapeMismatchError("rgb and normal latents must match in shape")


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """v_uncond + w * (v_cond - v_uncond); w = 0 is exactly unconditional."""
    if v_cond.shape != v_uncond.shape:
        raise ShapeMismatchError("guided and unguided predictions must match in shape")
    if w < 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    return v_uncond + w * (v_cond - v_uncond)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending uniform subset of [0, T), endpoints included."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return [T - 1]
    ts = np.round(np.linspace(0, T - 1, steps)).astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def ddim_sample(cond_fn: DenoiseFn, schedule: DiffusionSchedule,
                shape: tuple[int, ...], steps: int, w: float, seed: int,
                uncond_fn: DenoiseFn | None = None,
                dtype: torch.dtype = torch.float32) -> DualLatent:
    """Deterministic (eta = 0) DDIM trajectory for a dual latent.

    Args:
        cond_fn: (rgb_t, normal_t, t) -> (v_rgb, v_normal) with guidance on.
        schedule: the training-time noise schedule.
        shape: latent shape, e.g. (B, N, C, R, R).
        steps: number of denoising steps (uniform subset of the schedule).
        w: guidance scale; needs uncond_fn unless w == 1.
        seed: fully determines the initial noise and hence the output.
        uncond_fn: guidance-dropped counterpart of cond_fn.
    """
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen).to(dtype)
    n = torch.randn(shape, generator=gen).to(dtype)

    ts = ddim_timesteps(schedule.T, steps)
    batch = shape[0]
    for i, t_i in enumerate(ts):
        t = torch.full((batch,), t_i, dtype=torch.long)
        if uncond_fn is None or w == 1.0:
            v_rgb, v_normal = cond_fn(x, n, t)
        elif w == 0.0:
            v_rgb, v_normal = uncond_fn(x, n, t)
        else:
            vc_rgb, vc_normal = cond_fn(x, n, t)
            vu_rgb, vu_normal = uncond_fn(x, n, t)
            v_rgb = cfg_combine(vc_rgb, vu_rgb, w)
            v_normal = cfg_combine(vc_normal, vu_normal, w)

        x0 = schedule.x0_from_v(x, v_rgb, t)
        n0 = schedule.x0_from_v(n, v_normal, t)
        if i + 1 == len(ts):
            x, n = x0, n0
        else:
            eps_x = schedule.eps_from_v(x, v_rgb, t)
            eps_n = schedule.eps_from_v(n, v_normal, t)
            t_next = torch.full((batch,), ts[i + 1], dtype=torch.long)
            x = schedule.add_noise(x0, t_next, eps_x)
            n = schedule.add_noise(n0, t_next, eps_n)
    return DualLatent(rgb=x, normal=n)
