"""Velocity-guided voxel warping and the adjacent-frame rendering loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .autodiff import stop_gradient, trilinear_sample
from .decoder import AnchorMlp, VoxelGrid, decode_primitives, filter_gaussians
from .geometry import Camera
from .rasterizer import RenderOptions, render


@dataclass
class WarpedGrid:
    grid: VoxelGrid
    source: int
    target: int
    dt: float


def warp_voxels(grid: VoxelGrid, vel: torch.Tensor, dt: float) -> VoxelGrid:
    """Backward warp: destination cell x samples the source at x - v(x) dt.

    Displacements are converted to index units directly so that ``dt == 0``
    and whole-cell shifts land exactly on cell centers.
    """
    if tuple(vel.shape) != grid.dims + (3,):
        raise ValueError(f"warp_voxels: velocity shape {tuple(vel.shape)} does not match grid {grid.dims}")
    idx = torch.stack(torch.meshgrid(*(torch.arange(n, dtype=vel.dtype) for n in grid.dims), indexing="ij"), -1)
    coords = idx - vel * dt / torch.from_numpy(grid.voxel_size).to(vel.dtype)
    return grid.with_features(trilinear_sample(grid.features, coords))


def render_views(grid: VoxelGrid, mlp: AnchorMlp, cameras: Sequence[Camera], opts: RenderOptions,
                 detach_params: bool = False):
    gaussians = filter_gaussians(decode_primitives(grid, mlp, detach_params))
    return [render(gaussians, cam, opts) for cam in cameras]


def velocity_loss(grid_t: VoxelGrid, vel: torch.Tensor, decoder: AnchorMlp, cameras: Sequence[Camera],
                  images: Sequence[torch.Tensor], dt: float, opts: RenderOptions = RenderOptions()) -> torch.Tensor:
    """Mean L1 between renders of the warped grid and the frame at t + dt.

    Grid features and decoder weights are cut from the graph, so only ``vel``
    (and whatever produced it) receives gradient. Compute ``vel`` from a
    detached grid to keep the grid out of this loss entirely.
    """
    if len(cameras) != len(images):
        raise ValueError(f"velocity_loss: {len(cameras)} cameras but {len(images)} images")
    warped = warp_voxels(grid_t.with_features(stop_gradient(grid_t.features)), vel, dt)
    frames = render_views(warped, decoder, cameras, opts, detach_params=True)
    return torch.stack([(f.color - img).abs().mean() for f, img in zip(frames, images)]).mean()
