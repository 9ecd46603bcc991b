"""Depth-based reprojection between frames and the SSIM + L1 photometric loss."""
from __future__ import annotations

import logging
from typing import Sequence

import torch
import torch.nn.functional as F

from .autodiff import bilinear_sample
from .decoder import AnchorMlp, VoxelGrid
from .geometry import NEAR_PLANE, Camera, Intrinsics, Pose, relative_pose
from .motion import render_views
from .rasterizer import RenderOptions

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ALPHA_PC = 0.85

empty_mask_count = 0


def pixel_grid(k: Intrinsics, dtype=torch.float64) -> torch.Tensor:
    """(H, W, 2) integer pixel coordinates as (u, v)."""
    v, u = torch.meshgrid(torch.arange(k.height, dtype=dtype), torch.arange(k.width, dtype=dtype), indexing="ij")
    return torch.stack([u, v], dim=-1)


def reproject_coords(depth_t: torch.Tensor, t_rel: Pose, k_t: Intrinsics, k_src: Intrinsics,
                     near: float = NEAR_PLANE) -> tuple[torch.Tensor, torch.Tensor]:
    """Source-image coordinates for every target pixel and their validity.

    Points are carried as rays scaled by 1/depth and the source coordinate is
    formed as the target pixel plus a projected offset, so an identity pose
    with equal intrinsics returns the pixel grid bit for bit.
    """
    dtype = depth_t.dtype
    pix = pixel_grid(k_t, dtype)
    ray = torch.stack([(pix[..., 0] - k_t.cx) / k_t.fx, (pix[..., 1] - k_t.cy) / k_t.fy, torch.ones_like(depth_t)], -1)
    ok_t = depth_t > near
    z = torch.where(ok_t, depth_t, torch.ones_like(depth_t))
    r, t = t_rel.torch()
    p = ray @ r.to(dtype).T + t.to(dtype) / z.unsqueeze(-1)
    ok_src = p[..., 2] * z > near
    pz = torch.where(ok_src, p[..., 2], torch.ones_like(z))
    du = (k_src.fx * (p[..., 0] / pz) + k_src.cx) - (k_t.fx * ray[..., 0] + k_t.cx)
    dv = (k_src.fy * (p[..., 1] / pz) + k_src.cy) - (k_t.fy * ray[..., 1] + k_t.cy)
    uv = pix + torch.stack([du, dv], -1)
    return uv, ok_t & ok_src


def reproject(src: torch.Tensor, depth_t: torch.Tensor, t_rel: Pose, k_t: Intrinsics, k_src: Intrinsics):
    """Resample ``src`` into the target view; returns ``(image, mask)``."""
    uv, valid = reproject_coords(depth_t, t_rel, k_t, k_src)
    img, inside = bilinear_sample(src, uv)
    mask = valid & inside
    return img * mask.unsqueeze(-1).to(img.dtype), mask


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM map (H, W) with 3x3 box windows, averaged over channels."""
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)

    def box(t):
        return F.avg_pool2d(F.pad(t, (1, 1, 1, 1), mode="reflect"), 3, 1)

    mu_x, mu_y = box(x), box(y)
    sigma_x = box(x * x) - mu_x * mu_x
    sigma_y = box(y * y) - mu_y * mu_y
    sigma_xy = box(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return (num / den)[0].mean(0)


def photometric_error(target: torch.Tensor, reproj: torch.Tensor, alpha: float = ALPHA_PC) -> torch.Tensor:
    """Per-pixel alpha * (1 - SSIM) + (1 - alpha) * mean |target - reproj|."""
    return alpha * (1 - ssim(target, reproj)) + (1 - alpha) * (target - reproj).abs().mean(-1)


def erode_mask(mask: torch.Tensor) -> torch.Tensor:
    """Keep pixels whose whole 3x3 SSIM window is valid (image borders reflect)."""
    m = (~mask).to(torch.float64)[None, None]
    return F.max_pool2d(F.pad(m, (1, 1, 1, 1), mode="reflect"), 3, 1)[0, 0] == 0


def _masked_mean(err: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    global empty_mask_count
    if not bool(mask.any()):
        empty_mask_count += 1
        log.debug("photometric loss with empty mask; returning zero")
        return err.sum() * 0.0
    return err[mask].mean()


def photometric_loss(target: torch.Tensor, reproj: torch.Tensor, mask: torch.Tensor,
                     alpha: float = ALPHA_PC) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"photometric_loss: alpha must be in [0, 1], got {alpha}")
    return _masked_mean(photometric_error(target, reproj, alpha), mask)


def pc_loss_from_depth(depths: Sequence[torch.Tensor], images_t: Sequence[torch.Tensor], poses_t: Sequence[Pose],
                       intrinsics: Sequence[Intrinsics], neighbors: Sequence[tuple[Sequence[torch.Tensor], Sequence[Pose]]],
                       alpha: float = ALPHA_PC, reduction: str = "mean") -> torch.Tensor:
    """Photometric consistency for rendered current-frame depths.

    ``neighbors`` holds one ``(images, poses)`` pair per temporal neighbor,
    indexed like the current views. Each view is only compared with the same
    camera at other times.
    """
    if not neighbors:
        raise ValueError("pc_loss: at least one temporal neighbor is required")
    if reduction not in ("mean", "min"):
        raise ValueError(f"pc_loss: unknown reduction {reduction!r}")
    per_view = []
    for v, (depth, target, pose, k) in enumerate(zip(depths, images_t, poses_t, intrinsics)):
        errs, masks = [], []
        for nb_images, nb_poses in neighbors:
            warped, mask = reproject(nb_images[v], depth, relative_pose(pose, nb_poses[v]), k, k)
            errs.append(photometric_error(target, warped, alpha))
            masks.append(erode_mask(mask))
        err = torch.stack(errs)
        mask = torch.stack(masks)
        if reduction == "mean":
            count = mask.sum(0)
            per_pixel = (err * mask).sum(0) / count.clamp_min(1)
        else:
            per_pixel = torch.where(mask, err, torch.full_like(err, float("inf"))).min(0).values
        per_view.append(_masked_mean(per_pixel, mask.any(0)))
    return torch.stack(per_view).mean()


def pc_loss_full(grid_t: VoxelGrid, decoder: AnchorMlp, cameras_t: Sequence[Camera], images_t: Sequence[torch.Tensor],
                 neighbors: Sequence[tuple[Sequence[torch.Tensor], Sequence[Camera]]], opts: RenderOptions = RenderOptions(),
                 alpha: float = ALPHA_PC, reduction: str = "mean") -> torch.Tensor:
    """Render current-frame depth from the grid and score reprojected neighbors."""
    if not neighbors:
        raise ValueError("pc_loss: at least one temporal neighbor is required")
    frames = render_views(grid_t, decoder, cameras_t, opts)
    return pc_loss_from_depth(
        [f.depth_norm for f in frames], images_t, [c.pose for c in cameras_t], [c.intrinsics for c in cameras_t],
        [(imgs, [c.pose for c in cams]) for imgs, cams in neighbors], alpha, reduction,
    )
