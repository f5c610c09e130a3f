"""Image quality metrics and the evaluation report.

PSNR on [0, 1] images, capped at 99 dB for identical pairs; SSIM with a
uniform 7x7 window and the standard stability constants, averaged over
channels. `evaluate_directories` compares generated view files against
ground-truth renders and reports both the orthogonal 4-view aggregate and
the all-view aggregate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import match_view_files, parse_azimuth_tag
from .errors import ShapeMismatchError

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ORTHOGONAL_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs hit the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity with a uniform 7x7 window, mean over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    pad = SSIM_WINDOW // 2

    values = []
    for c in range(a.shape[-1]):
        x, y = a[..., c], b[..., c]
        def win_mean(img):
            return ndimage.uniform_filter(img, size=SSIM_WINDOW, mode="reflect")
        mu_x, mu_y = win_mean(x), win_mean(y)
        # Unbiased local (co)variances, matching the standard formulation.
        n = SSIM_WINDOW ** 2
        cov_norm = n / (n - 1)
        var_x = cov_norm * (win_mean(x * x) - mu_x ** 2)
        var_y = cov_norm * (win_mean(y * y) - mu_y ** 2)
        cov = cov_norm * (win_mean(x * y) - mu_x * mu_y)
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)
             / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))
        values.append(float(s[pad:-pad, pad:-pad].mean()))
    return float(np.mean(values))


@dataclass
class MetricsReport:
    """Per-view and aggregate PSNR/SSIM."""

    per_view: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_view": self.per_view, "aggregates": self.aggregates}


def _aggregate(entries: list[dict[str, float]]) -> dict[str, float]:
    return {"psnr": float(np.mean([e["psnr"] for e in entries])),
            "ssim": float(np.mean([e["ssim"] for e in entries])),
            "n_views": len(entries)}


def evaluate_directories(generated_dir: Path, reference_dir: Path) -> MetricsReport:
    """Compare equally named *_rgb.png views between two directories."""
    pairs = match_view_files(generated_dir, reference_dir)
    report = MetricsReport()
    orthogonal = []
    for gen_path, ref_path in pairs:
        a = np.asarray(Image.open(gen_path), dtype=np.float64) / 255.0
        b = np.asarray(Image.open(ref_path), dtype=np.float64) / 255.0
        entry = {"psnr": psnr(a, b), "ssim": ssim(a, b)}
        report.per_view[gen_path.name] = entry
        try:
            azimuth = parse_azimuth_tag(gen_path.name)
            if any(abs(azimuth - o) < 1e-6 for o in ORTHOGONAL_AZIMUTHS):
                orthogonal.append(entry)
        except ValueError:
            pass
    report.aggregates["all_views"] = _aggregate(list(report.per_view.values()))
    if orthogonal:
        report.aggregates["4_views"] = _aggregate(orthogonal)
    return report
