"""Differentiable weak-perspective rendering of the articulated body.

Produces the per-view conditioning signals: camera-space normal maps,
part segmentation maps, soft silhouettes, and projected 2D joints.

The soft silhouette is a sigmoid of the signed squared distance to the
triangle boundary nearest each pixel (positive inside coverage), measured
in resolution-normalized units with temperature SOFT_TAU, so edge softness
is a fixed fraction of the image (~0.6 px at 64 px) and the 0.5 level set
coincides with hard coverage. The gradient-bearing part of the computation
is restricted to pixels inside the sigmoid's active band; outside it the
sigmoid is constant 0 or 1 to double precision.

Normal and segmentation maps use hard nearest-face assignment: values are
differentiable through vertex positions/normals, while the assignment
itself changes only on a measure-zero set of silhouette-edge crossings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .body import BodyMesh
from .camera import CameraPose, camera_depth, project_points
from .errors import EmptyRenderError

# Sigmoid temperature on squared distances in resolution-normalized units.
SOFT_TAU = 1e-4
# |d^2| / tau beyond which the sigmoid is saturated to 0/1 (double precision).
SOFT_BAND = 35.0
# Image-range normal color of background pixels: the unit +z (toward camera).
BACKGROUND_NORMAL = (0.5, 0.5, 1.0)


@dataclass
class GuidanceBundle:
    """Per-view conditioning renders.

    Attributes:
        normal_map: (H, W, 3) camera-space normals mapped to [0, 1].
        segmentation_map: (H, W) long part labels, 0 = background.
        silhouette: (H, W) soft coverage in [0, 1].
        joints2d: (J, 2) pixel coordinates of all joints (no visibility mask).
    """

    normal_map: torch.Tensor
    segmentation_map: torch.Tensor
    silhouette: torch.Tensor
    joints2d: torch.Tensor


def _cross2(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _barycentric(p: torch.Tensor, tri: torch.Tensor) -> torch.Tensor:
    """Barycentric coords of points in triangles.

    Args:
        p: (..., 2) points.
        tri: (..., 3, 2) triangles broadcastable against p.

    Returns:
        (..., 3) weights; all >= 0 inside regardless of winding.
    """
    v0, v1, v2 = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    e1, e2 = v1 - v0, v2 - v0
    denom = _cross2(e1, e2)
    safe = torch.where(denom.abs() < 1e-12, torch.ones_like(denom), denom)
    d0 = p - v0
    w1 = _cross2(d0, e2) / safe
    w2 = _cross2(e1, d0) / safe
    w0 = 1.0 - w1 - w2
    return torch.stack([w0, w1, w2], dim=-1)


def _edge_dist_sq(p: torch.Tensor, tri: torch.Tensor) -> torch.Tensor:
    """Min squared distance from points (...,2) to triangle boundaries (...,3,2)."""
    best = None
    for e in range(3):
        a = tri[..., e, :]
        b = tri[..., (e + 1) % 3, :]
        ab = b - a
        ap = p - a
        t = ((ap * ab).sum(-1) / (ab * ab).sum(-1).clamp(min=1e-12)).clamp(0.0, 1.0)
        closest = a + t.unsqueeze(-1) * ab
        d2 = ((p - closest) ** 2).sum(-1)
        best = d2 if best is None else torch.minimum(best, d2)
    return best


@dataclass
class RasterResult:
    silhouette: torch.Tensor      # (H, W) soft, differentiable
    normal_cam: torch.Tensor      # (H, W, 3) unit normals at covered px, bg elsewhere
    segmentation: torch.Tensor    # (H, W) long labels
    covered: torch.Tensor         # (H, W) bool hard coverage


def rasterize(mesh: BodyMesh, cam: CameraPose, resolution: int,
              tau: float = SOFT_TAU, rows_per_chunk: int = 16) -> RasterResult:
    """Soft-rasterize a posed mesh under a weak-perspective camera.

    Pixels are processed in row bands; each band only tests faces whose
    bounding box overlaps it (padded by the sigmoid's active band), which
    keeps the pairwise pixel/face work near-linear in covered area.
    """
    dtype = mesh.vertices.dtype
    pix = project_points(mesh.vertices, cam, resolution)          # (V, 2), grad
    depth = camera_depth(mesh.vertices, cam)                      # (V,), grad
    W_mat = torch.as_tensor(cam.world_to_cam(), dtype=dtype)
    n_cam = mesh.vertex_normals @ W_mat.T                          # (V, 3), grad

    faces = mesh.faces
    tri = pix[faces]                                              # (F, 3, 2)
    tri_z = depth[faces]                                          # (F, 3)
    tri_n = n_cam[faces]                                          # (F, 3, 3)
    face_labels = mesh.face_parts

    res_sq = float(resolution) ** 2
    band = SOFT_BAND * tau * res_sq                               # band limit in px^2
    margin = band ** 0.5

    xs = torch.arange(resolution, dtype=dtype) + 0.5
    sil = torch.zeros(resolution * resolution, dtype=dtype)
    seg = torch.zeros(resolution * resolution, dtype=torch.long)
    normal_vec = torch.zeros(resolution * resolution, 3, dtype=dtype)
    normal_vec[:, 2] = 1.0
    covered_all = torch.zeros(resolution * resolution, dtype=torch.bool)

    with torch.no_grad():
        tri_d = tri.detach()
        vx = [tri_d[:, k, 0] for k in range(3)]
        vy = [tri_d[:, k, 1] for k in range(3)]
        tz = [tri_z.detach()[:, k] for k in range(3)]
        fy_min = tri_d[:, :, 1].min(dim=1).values
        fy_max = tri_d[:, :, 1].max(dim=1).values
        e1x, e1y = vx[1] - vx[0], vy[1] - vy[0]
        e2x, e2y = vx[2] - vx[0], vy[2] - vy[0]
        denom = e1x * e2y - e1y * e2x
        degenerate_all = denom.abs() < 1e-9
        inv_denom = torch.where(degenerate_all, torch.zeros_like(denom),
                                1.0 / torch.where(degenerate_all,
                                                  torch.ones_like(denom), denom))
        # Per-edge origin, direction, and inverse squared length.
        edges = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ex, ey = vx[b] - vx[a], vy[b] - vy[a]
            inv_len = 1.0 / (ex * ex + ey * ey).clamp(min=1e-12)
            edges.append((vx[a], vy[a], ex, ey, inv_len))

    for y0 in range(0, resolution, rows_per_chunk):
        y1 = min(y0 + rows_per_chunk, resolution)
        with torch.no_grad():
            sel = ((fy_max >= y0 + 0.5 - margin) & (fy_min <= y1 - 0.5 + margin)
                   & ~degenerate_all)
            sel_idx = sel.nonzero(as_tuple=True)[0]
        if sel_idx.numel() == 0:
            continue
        start = y0 * resolution
        ys_band = torch.arange(y0, y1, dtype=dtype) + 0.5
        gy, gx = torch.meshgrid(ys_band, xs, indexing="ij")
        px = gx.reshape(-1, 1)                                    # (P, 1)
        py = gy.reshape(-1, 1)
        p = torch.cat([px, py], dim=-1)                           # (P, 2)

        with torch.no_grad():
            d0x = px - vx[0][sel_idx]                             # (P, K)
            d0y = py - vy[0][sel_idx]
            w1 = (d0x * e2y[sel_idx] - d0y * e2x[sel_idx]) * inv_denom[sel_idx]
            w2 = (e1x[sel_idx] * d0y - e1y[sel_idx] * d0x) * inv_denom[sel_idx]
            inside = (w1 >= 0) & (w2 >= 0) & (w1 + w2 <= 1.0)

            d2 = None
            for ax, ay, ex, ey, inv_len in edges:
                apx = px - ax[sel_idx]
                apy = py - ay[sel_idx]
                t = ((apx * ex[sel_idx] + apy * ey[sel_idx])
                     * inv_len[sel_idx]).clamp(0.0, 1.0)
                dx = apx - t * ex[sel_idx]
                dy = apy - t * ey[sel_idx]
                dist = dx * dx + dy * dy
                d2 = dist if d2 is None else torch.minimum(d2, dist)

            score = torch.where(inside, d2, -d2)                  # signed d^2, px^2
            score_max, best_k = score.max(dim=1)
            in_band = score_max.abs() <= band
            band_px = in_band.nonzero(as_tuple=True)[0]

            # Hard raster: nearest covering face per pixel.
            z_px = ((1.0 - w1 - w2) * tz[0][sel_idx] + w1 * tz[1][sel_idx]
                    + w2 * tz[2][sel_idx])
            z_px = torch.where(inside, z_px, torch.full_like(z_px, torch.inf))
            z_min, face_local = z_px.min(dim=1)
            covered = torch.isfinite(z_min)

        # Soft coverage: sigmoid of the best face's signed squared distance.
        # Outside the active band the sigmoid is constant 0/1; gradients are
        # only needed for the in-band pixels.
        sil_chunk = (score_max > 0).to(dtype)
        if band_px.numel():
            pair_f = sel_idx[best_k[band_px]]
            tri_g = tri[pair_f]                                   # (n, 3, 2)
            p_g = p[band_px]
            bary_g = _barycentric(p_g, tri_g)
            inside_g = (bary_g.detach() >= 0).all(-1)
            d2_g = _edge_dist_sq(p_g, tri_g)
            sgn = torch.where(inside_g, 1.0, -1.0).to(dtype)
            cov = torch.sigmoid(sgn * d2_g / (tau * res_sq))
            sil_chunk = sil_chunk.index_put((band_px,), cov)
        sil = sil.index_put((start + torch.arange(p.shape[0]),), sil_chunk)

        # Interpolated unit normals at covered pixels (grad via selected face).
        if covered.any():
            cov_idx = covered.nonzero(as_tuple=True)[0]
            f_sel = sel_idx[face_local[cov_idx]]
            bary_sel = _barycentric(p[cov_idx], tri[f_sel]).clamp(min=0.0)
            n_interp = (bary_sel.unsqueeze(-1) * tri_n[f_sel]).sum(1)
            n_interp = n_interp / torch.linalg.norm(n_interp, dim=-1, keepdim=True).clamp(min=1e-12)
            normal_vec = normal_vec.index_put((start + cov_idx,), n_interp)
            seg[start + cov_idx] = face_labels[f_sel]
            covered_all[start + cov_idx] = True

    H = W = resolution
    return RasterResult(
        silhouette=sil.reshape(H, W),
        normal_cam=normal_vec.reshape(H, W, 3),
        segmentation=seg.reshape(H, W),
        covered=covered_all.reshape(H, W),
    )


def render_guidance(mesh: BodyMesh, cam: CameraPose, resolution: int,
                    tau: float = SOFT_TAU) -> GuidanceBundle:
    """Render the conditioning bundle for one view.

    Raises:
        EmptyRenderError: no pixel receives any coverage.
    """
    if resolution < 16:
        raise ValueError(f"resolution {resolution} < 16")
    raster = rasterize(mesh, cam, resolution, tau=tau)
    if not raster.covered.any() and float(raster.silhouette.max()) < 0.5:
        raise EmptyRenderError("subject projects outside the image frame")
    normal_map = (raster.normal_cam + 1.0) / 2.0
    bg = torch.tensor(BACKGROUND_NORMAL, dtype=normal_map.dtype)
    normal_map = torch.where(raster.covered.unsqueeze(-1), normal_map, bg)
    joints2d = project_points(mesh.joints, cam, resolution)
    return GuidanceBundle(
        normal_map=normal_map,
        segmentation_map=raster.segmentation,
        silhouette=raster.silhouette,
        joints2d=joints2d,
    )


# Fixed directional light for flat-shaded RGB renders (world frame, unit).
LIGHT_DIRECTION = (0.35, 0.55, 0.76)
LIGHT_AMBIENT = 0.55
LIGHT_DIFFUSE = 0.45


def shade_rgb(raster: RasterResult, cam: CameraPose,
              part_colors: dict[int, tuple[float, float, float]]) -> torch.Tensor:
    """Flat-shaded Lambertian coloring of a raster over a white background."""
    with torch.no_grad():
        dtype = raster.normal_cam.dtype
        light = torch.tensor(LIGHT_DIRECTION, dtype=dtype)
        light = light / torch.linalg.norm(light)
        W_mat = torch.as_tensor(cam.world_to_cam(), dtype=dtype)
        light_cam = W_mat @ light

        max_label = max(part_colors) if part_colors else 0
        palette = torch.ones(max_label + 1, 3, dtype=dtype)
        for label, color in part_colors.items():
            palette[label] = torch.tensor(color, dtype=dtype)

        shade = LIGHT_AMBIENT + LIGHT_DIFFUSE * (
            raster.normal_cam @ light_cam).clamp(min=0.0)
        rgb = palette[raster.segmentation] * shade.unsqueeze(-1)
        white = torch.ones_like(rgb)
        return torch.where(raster.covered.unsqueeze(-1), rgb.clamp(0.0, 1.0), white)


def render_rgb(mesh: BodyMesh, cam: CameraPose, resolution: int,
               part_colors: dict[int, tuple[float, float, float]],
               tau: float = SOFT_TAU) -> torch.Tensor:
    """Flat-shaded Lambertian render over a white background, (H, W, 3) in [0, 1].

    Not differentiable by contract; refinement never needs RGB gradients.
    """
    with torch.no_grad():
        raster = rasterize(mesh, cam, resolution, tau=tau)
        return shade_rgb(raster, cam, part_colors)
