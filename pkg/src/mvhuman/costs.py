"""Attention cost accounting: measured MACs vs. closed-form scaling.

The hybrid scheme runs 1D attention over all N views plus 3D attention
over M selected views per view; dense 3D attends jointly over all N * HW
tokens. Measured counts come from intercepting the tensor ops actually
executed; closed-form counts come from the formulas below. Peak activation
memory is dominated by the attention logits and is reported in elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.overrides import TorchFunctionMode

from .attention import (AttentionProjections, attention_1d_views,
                        attention_3d_selected)


class MacCounter(TorchFunctionMode):
    """Counts multiply-accumulates of matmul-like ops executed under it."""

    def __init__(self):
        super().__init__()
        self.macs = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func in (torch.matmul, torch.Tensor.matmul, torch.Tensor.__matmul__, torch.bmm):
            a, b = args[0], args[1]
            # Batched (..., m, k) @ (..., k, n): batch * m * k * n MACs.
            m, k = a.shape[-2], a.shape[-1]
            n = b.shape[-1]
            batch = 1
            out_batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
            for d in out_batch:
                batch *= d
            self.macs += batch * m * k * n
        elif func is torch.nn.functional.linear:
            x, w = args[0], args[1]
            self.macs += x.numel() // x.shape[-1] * w.shape[0] * w.shape[1]
        return func(*args, **kwargs)


# ---------------------------------------------------------------------------
# Closed-form MAC counts (projections + score/value matmuls, per batch item)
# ---------------------------------------------------------------------------


def macs_attention(l_q: int, l_k: int, channels: int) -> int:
    """One attention call: q/o projections on Lq, k/v on Lk, two score matmuls."""
    proj = (2 * l_q + 2 * l_k) * channels * channels
    scores = 2 * l_q * l_k * channels
    return proj + scores


def macs_dense_3d(n_views: int, hw: int, channels: int) -> int:
    """Self-attention jointly over all views' tokens."""
    return macs_attention(n_views * hw, n_views * hw, channels)


def macs_selected_3d(n_views: int, hw: int, channels: int, m_selected: int) -> int:
    """Per-view attention over (M+1) * HW keys, summed over views."""
    return n_views * macs_attention(hw, (m_selected + 1) * hw, channels)


def macs_1d_views(n_views: int, hw: int, channels: int) -> int:
    """Per-pixel attention over the N view slots, summed over pixels."""
    return hw * macs_attention(n_views, n_views, channels)


def macs_hybrid(n_views: int, hw: int, channels: int, m_selected: int = 2) -> int:
    return macs_selected_3d(n_views, hw, channels, m_selected) + macs_1d_views(
        n_views, hw, channels)


def logits_elements_dense(n_views: int, hw: int, heads: int = 1) -> int:
    return heads * (n_views * hw) ** 2


def logits_elements_hybrid(n_views: int, hw: int, heads: int = 1,
                           m_selected: int = 2) -> int:
    sel = heads * n_views * hw * (m_selected + 1) * hw
    oned = heads * hw * n_views * n_views
    return max(sel, oned)


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------


def measure_macs(fn, *args, **kwargs) -> int:
    counter = MacCounter()
    with counter, torch.no_grad():
        fn(*args, **kwargs)
    return counter.macs


def measure_hybrid_macs(n_views: int, hw: int, channels: int,
                        offsets: list[int]) -> int:
    """Execute the hybrid attention pair on a toy tensor and count MACs."""
    side = int(hw ** 0.5)
    assert side * side == hw, "hw must be a square pixel count"
    x = torch.zeros(1, n_views, side, side, channels)
    proj = AttentionProjections(channels, heads=1)
    bias = torch.zeros(1, n_views)
    macs = measure_macs(attention_3d_selected, x, offsets, proj)
    macs += measure_macs(attention_1d_views, x, proj, bias)
    return macs


def measure_dense_macs(n_views: int, hw: int, channels: int) -> int:
    """Joint self-attention over all views' tokens in one call."""
    tokens = torch.zeros(1, n_views * hw, channels)
    proj = AttentionProjections(channels, heads=1)
    return measure_macs(proj.attend, tokens, tokens)


@dataclass
class ScalingRow:
    n_views: int
    dense_macs: int
    hybrid_macs: int
    dense_logits: int
    hybrid_logits: int

    @property
    def mac_ratio(self) -> float:
        return self.dense_macs / self.hybrid_macs

    @property
    def memory_ratio(self) -> float:
        return self.dense_logits / self.hybrid_logits


def scaling_report(view_counts: list[int], hw: int, channels: int,
                   m_selected: int = 2) -> list[ScalingRow]:
    """Closed-form dense vs. hybrid cost across view counts."""
    rows = []
    for n in view_counts:
        rows.append(ScalingRow(
            n_views=n,
            dense_macs=macs_dense_3d(n, hw, channels),
            hybrid_macs=macs_hybrid(n, hw, channels, m_selected),
            dense_logits=logits_elements_dense(n, hw),
            hybrid_logits=logits_elements_hybrid(n, hw, m_selected=m_selected),
        ))
    return rows


def max_dense_views_within(hybrid_budget_elements: int, hw: int) -> int:
    """Largest N whose dense-3D logits fit in the given element budget."""
    n = 1
    while logits_elements_dense(n + 1, hw) <= hybrid_budget_elements:
        n += 1
    return n
