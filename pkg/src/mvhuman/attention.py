"""Multi-view attention: reference, per-pixel 1D over views, and sparse 3D.

Feature maps are (B, N, H, W, C): batch, views, spatial, channels. Three
variants share one projection structure:

* reference attention: per view, queries from the view's own tokens, keys
  and values from those tokens concatenated with the reference features.
* 1D view attention: self-attention along the view axis independently at
  every pixel location, with a learned circular relative position bias.
* selected 3D attention: per view, attention over all pixels of the view
  itself plus a sparse set of other views given by index offsets. With no
  offsets it reduces to plain spatial self-attention.

Residual connections are the caller's responsibility.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import torch
import yaml
from torch import nn

from .errors import ConfigError, ShapeMismatchError


class AttentionProjections(nn.Module):
    """Bias-free q/k/v/out projections shared by the attention variants."""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        if channels % heads != 0:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, l, c = t.shape
        return t.reshape(b, l, self.heads, c // self.heads).transpose(1, 2)

    def attend(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor,
               bias: torch.Tensor | None = None) -> torch.Tensor:
        """Softmax attention over token sequences.

        Args:
            q_tokens: (B*, Lq, C) query tokens.
            kv_tokens: (B*, Lk, C) key/value tokens.
            bias: optional logit bias broadcastable to (B*, heads, Lq, Lk).
        """
        if q_tokens.shape[-1] != self.channels or kv_tokens.shape[-1] != self.channels:
            raise ShapeMismatchError("token channel dim does not match projections")
        q = self._split(self.to_q(q_tokens))
        k = self._split(self.to_k(kv_tokens))
        v = self._split(self.to_v(kv_tokens))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if bias is not None:
            logits = logits + bias
        attn = torch.softmax(logits, dim=-1)
        out = attn @ v
        b, h, l, d = out.shape
        out = out.transpose(1, 2).reshape(b, l, h * d)
        return self.to_out(out)


def _check_feature(x: torch.Tensor) -> tuple[int, int, int, int, int]:
    if x.dim() != 5:
        raise ShapeMismatchError(f"expected (B, N, H, W, C), got {tuple(x.shape)}")
    return x.shape


def reference_attention(x: torch.Tensor, y: torch.Tensor,
                        proj: AttentionProjections) -> torch.Tensor:
    """Attend each view's pixels over itself concatenated with reference features.

    Args:
        x: (B, N, H, W, C) denoiser features.
        y: (B, H, W, C) reference features, shared across views.
    """
    B, N, H, W, C = _check_feature(x)
    if y.shape != (B, H, W, C):
        raise ShapeMismatchError(
            f"reference features {tuple(y.shape)} do not match {(B, H, W, C)}")
    xt = x.reshape(B * N, H * W, C)
    yt = y.reshape(B, 1, H * W, C).expand(B, N, H * W, C).reshape(B * N, H * W, C)
    kv = torch.cat([xt, yt], dim=1)
    out = proj.attend(xt, kv)
    return out.reshape(B, N, H, W, C)


def circular_bias_matrix(rel_bias: torch.Tensor, n_views: int) -> torch.Tensor:
    """(heads, N) circular bias table -> (heads, N, N) logit bias, b[i, j] = table[(i-j) mod N]."""
    if rel_bias.shape[-1] != n_views:
        raise ShapeMismatchError(
            f"bias table for {rel_bias.shape[-1]} views used with N={n_views}")
    i = torch.arange(n_views).unsqueeze(1)
    j = torch.arange(n_views).unsqueeze(0)
    return rel_bias[:, (i - j) % n_views]


def attention_1d_views(x: torch.Tensor, proj: AttentionProjections,
                       rel_bias: torch.Tensor | None = None) -> torch.Tensor:
    """Self-attention along the view axis at identical pixel locations.

    Args:
        x: (B, N, H, W, C).
        rel_bias: optional (heads, N) circular relative position table.
    """
    B, N, H, W, C = _check_feature(x)
    tokens = x.permute(0, 2, 3, 1, 4).reshape(B * H * W, N, C)
    bias = None
    if rel_bias is not None:
        bias = circular_bias_matrix(rel_bias, N).unsqueeze(0)
    out = proj.attend(tokens, tokens, bias=bias)
    return out.reshape(B, H, W, N, C).permute(0, 3, 1, 2, 4)


def attention_3d_selected(x: torch.Tensor, offsets: Sequence[int],
                          proj: AttentionProjections) -> torch.Tensor:
    """Per-view attention over all pixels of the view plus selected other views.

    Args:
        x: (B, N, H, W, C).
        offsets: view-index offsets; keys/values for view i come from
            views [i, i + o1, ..., i + oM] (mod N). Empty offsets give
            plain spatial self-attention.
    """
    B, N, H, W, C = _check_feature(x)
    for o in offsets:
        if o % N == 0:
            raise ConfigError(
                f"view offset {o} is 0 mod {N}: 3D attention degenerates to self-attention")
    xt = x.reshape(B, N, H * W, C)
    gathered = [xt]
    idx_base = torch.arange(N)
    for o in offsets:
        gathered.append(xt[:, (idx_base + o) % N])
    kv = torch.cat(gathered, dim=2)                      # (B, N, (M+1)HW, C)
    out = proj.attend(xt.reshape(B * N, H * W, C),
                      kv.reshape(B * N, -1, C))
    return out.reshape(B, N, H, W, C)


# ---------------------------------------------------------------------------
# View selection
# ---------------------------------------------------------------------------


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resolve_offsets(angles_deg: Sequence[float], n_views: int) -> list[int]:
    """Convert angular view offsets to index offsets for an N-view orbit.

    Index offsets are round(angle * N / 360), clamped away from zero;
    duplicates after rounding are collapsed with a warning.

    Raises:
        ConfigError: n_views < 4, or an offset is congruent to 0 views.
    """
    if n_views < 4:
        raise ConfigError(f"view selection needs N >= 4, got {n_views}")
    resolved: list[int] = []
    for angle in angles_deg:
        if angle % 360.0 == 0.0:
            raise ConfigError(f"angular offset {angle} deg selects the view itself")
        idx = _round_half_away(angle * n_views / 360.0)
        if idx == 0:
            idx = 1 if angle > 0 else -1
            warnings.warn(
                f"offset {angle} deg rounds to 0 views at N={n_views}; clamped to {idx}")
        if idx % n_views == 0:
            raise ConfigError(
                f"angular offset {angle} deg resolves to 0 mod {n_views}")
        if any((idx - r) % n_views == 0 for r in resolved):
            warnings.warn(
                f"offset {angle} deg duplicates an earlier view at N={n_views}; dropped")
            continue
        resolved.append(idx)
    return resolved


@dataclass(frozen=True)
class ViewSelectionTable:
    """Per-block angular view offsets for 3D attention.

    The table is data, not code: the default ships as a YAML file and any
    experiment can override it with its own file.
    """

    blocks: dict[str, tuple[float, ...]]

    def __post_init__(self):
        for block, angles in self.blocks.items():
            pos = sorted(a for a in angles if a > 0)
            neg = sorted(-a for a in angles if a < 0)
            if pos != neg or len(pos) + len(neg) != len(angles):
                raise ConfigError(
                    f"block {block}: offsets {angles} are not symmetric +/- pairs")

    def angles(self, block: str) -> tuple[float, ...]:
        return self.blocks[block]

    def resolve(self, n_views: int) -> dict[str, list[int]]:
        return {block: resolve_offsets(angles, n_views)
                for block, angles in self.blocks.items()}

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ViewSelectionTable":
        with open(path) as f:
            raw = yaml.safe_load(f)
        return cls._from_raw(raw, str(path))

    @classmethod
    def _from_raw(cls, raw: dict, source: str) -> "ViewSelectionTable":
        if not isinstance(raw, dict) or "blocks" not in raw:
            raise ConfigError(f"{source}: not a view-selection table")
        blocks = {}
        for name, entry in raw["blocks"].items():
            blocks[name] = tuple(float(a) for a in entry["offsets_deg"])
        return cls(blocks)


def default_view_selection() -> ViewSelectionTable:
    """The stock per-block table shipped with the package."""
    text = resources.files("mvhuman").joinpath("data/view_selection.yaml").read_text()
    return ViewSelectionTable._from_raw(yaml.safe_load(text), "data/view_selection.yaml")


def resolve_selection(table: ViewSelectionTable, n_views: int) -> dict[str, list[int]]:
    """Resolve a whole table to per-block index offsets."""
    return table.resolve(n_views)
