"""Differentiable splatting of Gaussians into color, depth and alpha images.

:func:`render` is the tiled fast path with a hand-written adjoint;
:func:`render_bruteforce` evaluates every Gaussian at every pixel with plain
autograd and serves as the reference.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _raster_kernels as K
from .gaussians import (CUTOFF_SIGMA, LOWPASS, Gaussians, build_covariance, cov2d_inverse, project_covariance,
                        project_gaussians, screen_bounds, sh_colors)
from .geometry import NEAR_PLANE, Camera, projection_jacobian, world_to_camera

TILE = 16

# debug hook for negative-control gradient checks
_ADJOINT_SCALE = {"opacity": 1.0}


@contextlib.contextmanager
def corrupted_adjoint(factor: float = 1.1):
    """Scale the rasterizer's opacity adjoint by ``factor`` inside the block."""
    old = _ADJOINT_SCALE["opacity"]
    _ADJOINT_SCALE["opacity"] = factor
    try:
        yield
    finally:
        _ADJOINT_SCALE["opacity"] = old


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    cutoff_sigma: float = CUTOFF_SIGMA
    min_transmittance: float = 1e-4
    alpha_max: float = 0.999
    lowpass: float = LOWPASS
    eps_norm: float = 1e-8
    normalize_color: bool = False
    precision: str = "float64"
    near: float = NEAR_PLANE

    def exact(self) -> "RenderOptions":
        """Options under which the fast path matches the oracle to roundoff."""
        return RenderOptions(self.background, 7.0, 0.0, self.alpha_max, self.lowpass, self.eps_norm,
                             self.normalize_color, self.precision, self.near)


@dataclass
class RenderedFrame:
    color: torch.Tensor  # (H, W, 3)
    depth_raw: torch.Tensor  # (H, W)
    depth_norm: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    stats: dict = field(default_factory=dict)


def _finish(color_sum, depth_raw, alpha, opts: RenderOptions) -> RenderedFrame:
    depth_norm = depth_raw / (alpha + opts.eps_norm)
    if opts.normalize_color:
        color = color_sum / (alpha + opts.eps_norm).unsqueeze(-1)
    else:
        bg = torch.as_tensor(opts.background, dtype=color_sum.dtype)
        color = color_sum + (1.0 - alpha).unsqueeze(-1) * bg
    return RenderedFrame(color, depth_raw, depth_norm, alpha)


def _empty(camera: Camera, opts: RenderOptions, dtype=torch.float64) -> RenderedFrame:
    h, w = camera.height, camera.width
    return _finish(torch.zeros(h, w, 3, dtype=dtype), torch.zeros(h, w, dtype=dtype),
                   torch.zeros(h, w, dtype=dtype), opts)


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opac, colors, depths, rects, order, width, height, opts):
        np_dtype = np.float32 if opts.precision == "float32" else np.float64
        arrs = [t.detach().cpu().numpy().astype(np_dtype) for t in (means2d, conics, opac, colors, depths)]
        tiles_x = (width + TILE - 1) // TILE
        tiles_y = (height + TILE - 1) // TILE
        offsets, ids = K.bin_tiles(order, rects, TILE, tiles_x, tiles_y)
        out_c, out_d, out_a, t_final, n_last = K.forward(
            *arrs, rects, offsets, ids, TILE, tiles_x, width, height, opts.alpha_max, opts.min_transmittance
        )
        ctx.saved = (arrs, rects, offsets, ids, tiles_x, width, height, opts, t_final, n_last)
        ctx.n_pairs = int(ids.shape[0])
        dt = means2d.dtype
        return (torch.from_numpy(out_c).to(dt), torch.from_numpy(out_d).to(dt), torch.from_numpy(out_a).to(dt))

    @staticmethod
    def backward(ctx, g_c, g_d, g_a):
        arrs, rects, offsets, ids, tiles_x, width, height, opts, t_final, n_last = ctx.saved
        np_dtype = arrs[0].dtype
        gc, gd, ga = (g.detach().cpu().numpy().astype(np_dtype) for g in (g_c, g_d, g_a))
        entry = K.backward(*arrs, rects, offsets, ids, TILE, tiles_x, width, height, opts.alpha_max,
                           t_final, n_last, np.ascontiguousarray(gc), np.ascontiguousarray(gd),
                           np.ascontiguousarray(ga))
        per_g = torch.from_numpy(K.reduce_grads(entry, ids, arrs[0].shape[0])).to(g_c.dtype)
        return (per_g[:, 0:2], per_g[:, 2:5], per_g[:, 5] * _ADJOINT_SCALE["opacity"], per_g[:, 6:9],
                per_g[:, 9], None, None, None, None, None)


def rasterize(means2d, conics, opacities, colors, depths, cov2d, valid, camera: Camera,
              opts: RenderOptions = RenderOptions()) -> RenderedFrame:
    """Composite already-projected splats; rows with ``valid`` False are skipped."""
    w, h = camera.width, camera.height
    rects = screen_bounds(means2d.detach().numpy(), cov2d.detach().numpy(), w, h, opts.cutoff_sigma)
    keep = valid.numpy() & (rects[:, 0] <= rects[:, 2]) & (rects[:, 1] <= rects[:, 3])
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(depths.detach().numpy()[idx], kind="stable")].astype(np.int64)
    color_sum, depth_raw, alpha = _Rasterize.apply(
        means2d, conics, opacities, colors, depths, np.ascontiguousarray(rects), order, w, h, opts
    )
    frame = _finish(color_sum, depth_raw, alpha, opts)
    frame.stats = {"rendered": len(order), "culled": int(len(keep) - len(order))}
    return frame


def render(gaussians: Gaussians, camera: Camera, opts: RenderOptions = RenderOptions()) -> RenderedFrame:
    """Tiled front-to-back render of ``gaussians`` through ``camera``."""
    if len(gaussians) == 0:
        return _empty(camera, opts, gaussians.means.dtype)
    proj = project_gaussians(gaussians, camera, opts.lowpass, opts.near)
    return rasterize(proj.means2d, proj.conics, proj.opacities, proj.colors, proj.depths, proj.cov2d,
                     proj.valid, camera, opts)


def render_bruteforce(gaussians: Gaussians, camera: Camera, opts: RenderOptions = RenderOptions()) -> RenderedFrame:
    """Dense reference renderer: no tiles, no cutoff, no early termination."""
    if len(gaussians) == 0:
        return _empty(camera, opts, gaussians.means.dtype)
    k = camera.intrinsics
    p_cam = world_to_camera(camera.pose, gaussians.means)
    front = p_cam[:, 2] > opts.near
    g = gaussians.select(front)
    p_cam = p_cam[front]
    if len(g) == 0:
        return _empty(camera, opts, gaussians.means.dtype)
    jac = projection_jacobian(k, p_cam, opts.near)
    cov2d = project_covariance(build_covariance(g.quats, g.scales), camera.pose, jac, opts.lowpass)
    inv, ok = cov2d_inverse(cov2d)
    g, p_cam, inv = g.select(ok), p_cam[ok], inv[ok]
    colors = sh_colors(g.colors, g.means, camera.pose.center)
    z = p_cam[:, 2]
    center = torch.stack([k.fx * p_cam[:, 0] / z + k.cx, k.fy * p_cam[:, 1] / z + k.cy], dim=-1)
    order = torch.as_tensor(np.argsort(z.detach().numpy(), kind="stable"))
    center, inv, z, colors, opac = center[order], inv[order], z[order], colors[order], g.opacities[order]

    ys, xs = torch.meshgrid(torch.arange(camera.height, dtype=z.dtype), torch.arange(camera.width, dtype=z.dtype),
                            indexing="ij")
    pix = torch.stack([xs, ys], dim=-1).reshape(-1, 1, 2)
    delta = pix - center.unsqueeze(0)  # (P, N, 2)
    q = (delta.unsqueeze(-2) @ inv.unsqueeze(0) @ delta.unsqueeze(-1))[..., 0, 0]
    alpha = (opac.unsqueeze(0) * torch.exp(-0.5 * q)).clamp(max=opts.alpha_max)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1 - alpha[:, :-1]], dim=1), dim=1)
    wts = alpha * trans
    h, w = camera.height, camera.width
    color_sum = (wts @ colors).reshape(h, w, 3)
    depth_raw = (wts @ z).reshape(h, w)
    acc = wts.sum(1).reshape(h, w)
    return _finish(color_sum, depth_raw, acc, opts)
