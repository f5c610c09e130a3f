"""Dual-branch denoising UNet with hybrid multi-view attention.

One trunk, two branches: the RGB and normal branches each own a copy of the
input stage (conv_in + first down stage) and output stage (last up stage +
conv_out); every other block is shared, evaluated once per branch per
forward pass. Attention-bearing blocks run, in order: spatial
self-attention extended to sparse 3D attention over selected views,
reference attention against cached reference features, 1D attention along
the view axis, then a small feed-forward. Multi-view attention (the 3D key
extension and the 1D layer) can be disabled, which is how stage-1 training
and reference-feature extraction run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import (AttentionProjections, attention_1d_views,
                        attention_3d_selected, reference_attention)
from .conditioning import CameraEncoder, PoseGuidanceEncoder, ReferenceFeatureCache
from .errors import ConditionError, ConfigError, ShapeMismatchError


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, (B,) -> (B, dim)."""
    if dim % 2 != 0:
        raise ConfigError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) *
                      torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, d_emb: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(d_emb, out_ch)
        self.norm2 = _group_norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(nn.functional.silu(emb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionStack(nn.Module):
    """Self/3D attention -> reference attention -> 1D view attention -> FF."""

    def __init__(self, block_id: str, channels: int, heads: int, n_views: int,
                 offsets: list[int]):
        super().__init__()
        self.block_id = block_id
        self.n_views = n_views
        self.offsets = list(offsets)
        self.norm_3d = nn.LayerNorm(channels)
        self.attn_3d = AttentionProjections(channels, heads)
        self.norm_ref = nn.LayerNorm(channels)
        self.attn_ref = AttentionProjections(channels, heads)
        self.norm_1d = nn.LayerNorm(channels)
        self.attn_1d = AttentionProjections(channels, heads)
        self.rel_bias = nn.Parameter(torch.zeros(heads, n_views))
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(),
                                nn.Linear(2 * channels, channels))
        # The 1D layer starts as a no-op so enabling it cannot derail a
        # stage-1 model at the start of stage 2.
        nn.init.zeros_(self.attn_1d.to_out.weight)

    def forward(self, h: torch.Tensor, n_views: int,
                ref_feat: torch.Tensor | None, mv_enabled: bool,
                record: dict | None = None,
                disable_attention: bool = False) -> torch.Tensor:
        BN, C, H, W = h.shape
        B = BN // n_views
        x = h.reshape(B, n_views, C, H, W).permute(0, 1, 3, 4, 2)
        if record is not None:
            record[self.block_id] = x.reshape(B * n_views, H, W, C)
        if not disable_attention:
            offsets = self.offsets if mv_enabled else []
            if mv_enabled and n_views != self.n_views:
                raise ShapeMismatchError(
                    f"block {self.block_id} built for N={self.n_views}, got {n_views}")
            x = x + attention_3d_selected(self.norm_3d(x), offsets, self.attn_3d)
            if ref_feat is not None:
                if ref_feat.shape[0] == 1 and B > 1:
                    ref_feat = ref_feat.expand(B, *ref_feat.shape[1:])
                x = x + reference_attention(self.norm_ref(x), ref_feat, self.attn_ref)
            if mv_enabled:
                x = x + attention_1d_views(self.norm_1d(x), self.attn_1d, self.rel_bias)
        x = x + self.ff(self.norm_ff(x))
        return x.permute(0, 1, 4, 2, 3).reshape(BN, C, H, W)


class DownStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, d_emb: int,
                 attn: AttentionStack | None, downsample: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, d_emb)
        self.attn = attn
        self.down = nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1) if downsample else None


class UpStage(nn.Module):
    def __init__(self, skip_ch: int, ch: int, out_ch: int, d_emb: int,
                 attn: AttentionStack | None, upsample: bool):
        super().__init__()
        self.res = ResBlock(ch + skip_ch, ch, d_emb)
        self.attn = attn
        self.up = nn.Conv2d(ch, out_ch, 3, padding=1) if upsample else None


@dataclass
class DenoiseConditions:
    """Everything the denoiser consumes besides the noisy latents.

    guidance tensors are per-view maps fed to the template encoders; None
    means the guidance is dropped (the unconditional branch), in which case
    the encoders run on their learned null images. Reference conditioning
    is always present.
    """

    ref_cache: ReferenceFeatureCache
    rotations: torch.Tensor                     # (B, N, 3, 3)
    guidance_rgb: torch.Tensor | None = None    # (B, N, Cg, Rg, Rg)
    guidance_normal: torch.Tensor | None = None  # (B, N, 3, Rg, Rg)


class DualBranchDenoiser(nn.Module):
    """Shared-trunk UNet predicting v for RGB and normal latents jointly."""

    BRANCHES = ("rgb", "normal")

    def __init__(self, *, in_channels: int = 3, base_channels: int = 32,
                 channel_mults: tuple[int, ...] = (1, 2, 2),
                 attn_levels: tuple[int, ...] = (2,), heads: int = 2,
                 d_emb: int = 64, n_views: int = 8,
                 latent_resolution: int = 64, guidance_resolution: int = 64,
                 guidance_strides: tuple[int, int, int, int] = (1, 1, 1, 1),
                 seg_channels: int = 11,
                 view_offsets: dict[str, list[int]] | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.n_views = n_views
        self.latent_resolution = latent_resolution
        self.d_emb = d_emb
        levels = len(channel_mults)
        chans = [base_channels * m for m in channel_mults]
        if any(l < 0 or l >= levels for l in attn_levels):
            raise ConfigError(f"attention levels {attn_levels} out of range")
        if latent_resolution % (2 ** (levels - 1)) != 0:
            raise ConfigError("latent resolution must survive the downsampling path")
        view_offsets = view_offsets or {}

        def make_attn(block_id: str, ch: int) -> AttentionStack:
            return AttentionStack(block_id, ch, heads, n_views,
                                  view_offsets.get(block_id, []))

        self.time_mlp = nn.Sequential(nn.Linear(d_emb, d_emb), nn.SiLU(),
                                      nn.Linear(d_emb, d_emb))
        self.camera_encoder = CameraEncoder(d_emb)
        self.guidance_encoders = nn.ModuleDict({
            "rgb": PoseGuidanceEncoder(seg_channels, in_channels,
                                       guidance_resolution, latent_resolution,
                                       guidance_strides),
            "normal": PoseGuidanceEncoder(3, in_channels,
                                          guidance_resolution, latent_resolution,
                                          guidance_strides),
        })

        self.conv_in = nn.ModuleDict(
            {b: nn.Conv2d(in_channels, chans[0], 3, padding=1) for b in self.BRANCHES})
        # Level 0 stages are per-branch; deeper stages + mid are the shared trunk.
        self.down0 = nn.ModuleDict({
            b: DownStage(chans[0], chans[0], d_emb,
                         make_attn("down0", chans[0]) if 0 in attn_levels else None,
                         downsample=levels > 1)
            for b in self.BRANCHES})
        self.down_trunk = nn.ModuleList([
            DownStage(chans[i - 1], chans[i], d_emb,
                      make_attn(f"down{i}", chans[i]) if i in attn_levels else None,
                      downsample=i < levels - 1)
            for i in range(1, levels)])
        self.mid_res1 = ResBlock(chans[-1], chans[-1], d_emb)
        self.mid_attn = make_attn("mid", chans[-1])
        self.mid_res2 = ResBlock(chans[-1], chans[-1], d_emb)
        self.up_trunk = nn.ModuleList([
            UpStage(chans[i], chans[i], chans[max(i - 1, 0)], d_emb,
                    make_attn(f"up{i}", chans[i]) if i in attn_levels else None,
                    upsample=i > 0)
            for i in range(levels - 1, 0, -1)])
        self.up0 = nn.ModuleDict({
            b: UpStage(chans[0], chans[0], chans[0], d_emb,
                       make_attn("up0", chans[0]) if 0 in attn_levels else None,
                       upsample=False)
            for b in self.BRANCHES})
        self.out_norm = nn.ModuleDict({b: _group_norm(chans[0]) for b in self.BRANCHES})
        self.conv_out = nn.ModuleDict(
            {b: nn.Conv2d(chans[0], in_channels, 3, padding=1) for b in self.BRANCHES})

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    def attention_block_ids(self) -> list[str]:
        ids = []
        for b in (self.down0["rgb"], *self.down_trunk):
            if b.attn is not None:
                ids.append(b.attn.block_id)
        ids.append("mid")
        for b in (*self.up_trunk, self.up0["rgb"]):
            if b.attn is not None:
                ids.append(b.attn.block_id)
        return ids

    def multiview_parameter_names(self) -> set[str]:
        """Names of 1D/3D multi-view attention parameters (stage-2 trainables)."""
        return {name for name, _ in self.named_parameters()
                if ".attn_3d." in name or ".attn_1d." in name or name.endswith("rel_bias")}

    # ------------------------------------------------------------------
    # Forward passes
    # ------------------------------------------------------------------

    def embed(self, t: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
        """Per-view conditioning embedding.

        Args:
            t: (B,) integer timesteps, shared across a sample's views.
            rotations: (B, N, 3, 3) relative viewpoint rotations.
        """
        B, N = rotations.shape[:2]
        dtype = next(self.parameters()).dtype
        t_emb = self.time_mlp(timestep_embedding(t, self.d_emb).to(dtype))
        cam = self.camera_encoder(rotations.reshape(B * N, 9).to(dtype))
        return cam + t_emb.unsqueeze(1).expand(B, N, self.d_emb).reshape(B * N, self.d_emb)

    def forward_branch(self, z: torch.Tensor, emb: torch.Tensor, branch: str,
                       *, n_views: int, guidance_feat: torch.Tensor | None = None,
                       ref_cache: ReferenceFeatureCache | None = None,
                       mv_enabled: bool = False, record: dict | None = None,
                       disable_attention: bool = False) -> torch.Tensor:
        """One branch pass. z is (B*N, C, R, R); emb is (B*N, d_emb)."""
        if branch not in self.BRANCHES:
            raise ConfigError(f"unknown branch {branch!r}")
        h = z if guidance_feat is None else z + guidance_feat
        h = self.conv_in[branch](h)

        def run_attn(stage, h):
            if stage.attn is None:
                return h
            ref = None
            if ref_cache is not None:
                ref = ref_cache.get(stage.attn.block_id, branch)
                ref = ref.reshape(-1, *ref.shape[-3:])
            return stage.attn(h, n_views, ref, mv_enabled, record, disable_attention)

        skips = []
        for stage in (self.down0[branch], *self.down_trunk):
            h = stage.res(h, emb)
            h = run_attn(stage, h)
            skips.append(h)
            if stage.down is not None:
                h = stage.down(h)

        h = self.mid_res1(h, emb)
        ref = None
        if ref_cache is not None:
            ref = ref_cache.get("mid", branch)
            ref = ref.reshape(-1, *ref.shape[-3:])
        h = self.mid_attn(h, n_views, ref, mv_enabled, record, disable_attention)
        h = self.mid_res2(h, emb)

        for stage in (*self.up_trunk, self.up0[branch]):
            h = torch.cat([h, skips.pop()], dim=1)
            h = stage.res(h, emb)
            h = run_attn(stage, h)
            if stage.up is not None:
                h = stage.up(nn.functional.interpolate(h, scale_factor=2.0,
                                                       mode="nearest"))
        return self.conv_out[branch](nn.functional.silu(self.out_norm[branch](h)))

    def reference_forward(self, latent: torch.Tensor, branch: str) -> dict[str, torch.Tensor]:
        """Clean (t = 0) single-view pass recording pre-attention features."""
        B = latent.shape[0]
        dtype = latent.dtype
        t = torch.zeros(B, dtype=torch.long)
        identity = torch.eye(3, dtype=dtype).reshape(1, 1, 3, 3).expand(B, 1, 3, 3)
        emb = self.embed(t, identity)
        record: dict[str, torch.Tensor] = {}
        self.forward_branch(latent, emb, branch, n_views=1, record=record)
        return record


def denoise(model: DualBranchDenoiser, rgb_t: torch.Tensor, normal_t: torch.Tensor,
            t: torch.Tensor, cond: DenoiseConditions,
            *, mv_enabled: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Predict v for both branches of a noisy dual latent.

    Args:
        rgb_t / normal_t: (B, N, C, R, R) noisy latents at timestep t.
        t: (B,) integer timesteps.
        cond: conditioning bundle; ref_cache is mandatory, guidance may be
            None to run the unconditional (guidance-dropped) branch.

    Returns:
        (v_rgb, v_normal), each shaped like its input latent.
    """
    if cond.ref_cache is None or not cond.ref_cache.features:
        raise ConditionError("reference feature cache is required")
    if rgb_t.shape != normal_t.shape:
        raise ShapeMismatchError("rgb and normal latents must have identical shapes")
    B, N = rgb_t.shape[:2]
    emb = model.embed(t, cond.rotations)

    outs = {}
    for branch, z, guid in (("rgb", rgb_t, cond.guidance_rgb),
                            ("normal", normal_t, cond.guidance_normal)):
        guid_maps = None if guid is None else guid.reshape(B * N, *guid.shape[2:])
        feat = model.guidance_encoders[branch](guid_maps, batch_size=B * N)
        v = model.forward_branch(z.reshape(B * N, *z.shape[2:]), emb, branch,
                                 n_views=N, guidance_feat=feat,
                                 ref_cache=cond.ref_cache, mv_enabled=mv_enabled)
        outs[branch] = v.reshape(B, N, *v.shape[1:])
    return outs["rgb"], outs["normal"]
