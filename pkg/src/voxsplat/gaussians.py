"""Gaussian primitives, 3D covariances and their screen-space projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import NEAR_PLANE, Camera, Pose, projection_jacobian, quat_to_rotmat, world_to_camera

LOWPASS = 0.3
CUTOFF_SIGMA = 3.0
MIN_COV_DET = 1e-12
SH_C1 = 0.4886025119029199


@dataclass
class Gaussians:
    """A batch of N splats.

    ``colors`` holds SH coefficients with shape (N, (d+1)**2, 3); degree 0 is
    the plain RGB value.
    """

    means: torch.Tensor
    quats: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor

    def __post_init__(self):
        n = self.means.shape[0]
        for name in ("quats", "scales", "opacities", "colors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"Gaussians.{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.colors.dim() != 3 or self.colors.shape[1] not in (1, 4) or self.colors.shape[2] != 3:
            raise ValueError(f"Gaussians.colors must be (N, 1|4, 3), got {tuple(self.colors.shape)}")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return 0 if self.colors.shape[1] == 1 else 1

    def select(self, index) -> "Gaussians":
        return Gaussians(
            self.means[index], self.quats[index], self.scales[index], self.opacities[index], self.colors[index]
        )

    def with_opacities(self, opacities: torch.Tensor) -> "Gaussians":
        return Gaussians(self.means, self.quats, self.scales, opacities, self.colors)

    def detach(self) -> "Gaussians":
        return Gaussians(*(t.detach() for t in (self.means, self.quats, self.scales, self.opacities, self.colors)))

    @classmethod
    def cat(cls, parts: list["Gaussians"]) -> "Gaussians":
        return cls(*(torch.cat([getattr(p, f) for p in parts]) for f in ("means", "quats", "scales", "opacities", "colors")))


def _outer_sum(m: torch.Tensor) -> torch.Tensor:
    # m @ m^T with elementwise products so the result is exactly symmetric
    return (m.unsqueeze(-2) * m.unsqueeze(-3)).sum(-1)


def build_covariance(quats, scales) -> torch.Tensor:
    """Covariances R S S^T R^T, shape (..., 3, 3)."""
    scales = torch.as_tensor(scales)
    if bool((scales <= 0).any()):
        raise ValueError("build_covariance: scales must be positive")
    m = quat_to_rotmat(quats) * scales.unsqueeze(-2)
    return _outer_sum(m)


def project_covariance(cov3d: torch.Tensor, pose: Pose, jac: torch.Tensor, lowpass: float = LOWPASS) -> torch.Tensor:
    """Screen-space covariance J W Σ W^T J^T plus the low-pass term."""
    r = torch.from_numpy(pose.rotation).to(cov3d.dtype)
    t = jac @ r
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    return cov2d + lowpass * torch.eye(2, dtype=cov2d.dtype)


def cov2d_inverse(cov2d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Adjugate inverse of (..., 2, 2) covariances and a mask of usable ones."""
    a, b, c, d = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 0], cov2d[..., 1, 1]
    det = a * d - b * c
    ok = det > MIN_COV_DET
    safe = torch.where(ok, det, torch.ones_like(det))
    inv = torch.stack([d, -b, -c, a], dim=-1).reshape(cov2d.shape) / safe[..., None, None]
    return inv, ok


def gaussian_weight(cov2d: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """exp(-0.5 Δ^T Σ'^-1 Δ)."""
    inv, _ = cov2d_inverse(cov2d)
    q = (delta.unsqueeze(-2) @ inv @ delta.unsqueeze(-1))[..., 0, 0]
    return torch.exp(-0.5 * q)


def screen_bounds(center, cov2d, width: int, height: int, cutoff: float = CUTOFF_SIGMA) -> np.ndarray:
    """Inclusive pixel rects (..., 4) as (x0, y0, x1, y1) covering the cutoff ellipse.

    The rect is clamped to the image; it is empty (x0 > x1 or y0 > y1) when
    the ellipse misses the image entirely.
    """
    center = np.asarray(center, dtype=np.float64)
    cov2d = np.asarray(cov2d, dtype=np.float64)
    a, b, d = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    mid = 0.5 * (a + d)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * d - b * b), 0.0))
    radius = cutoff * np.sqrt(lam)
    x0 = np.maximum(np.ceil(center[..., 0] - radius), 0)
    y0 = np.maximum(np.ceil(center[..., 1] - radius), 0)
    x1 = np.minimum(np.floor(center[..., 0] + radius), width - 1)
    y1 = np.minimum(np.floor(center[..., 1] + radius), height - 1)
    rect = np.stack([x0, y0, x1, y1], axis=-1)
    # keep far off-screen values inside int range
    return np.clip(rect, -1, max(width, height) + 1).astype(np.int64)


def sh_colors(coeffs: torch.Tensor, means: torch.Tensor, cam_center) -> torch.Tensor:
    """Evaluate degree-0/1 SH colors and clamp to [0, 1]."""
    color = coeffs[:, 0]
    if coeffs.shape[1] == 4:
        dirs = means - torch.as_tensor(cam_center, dtype=means.dtype)
        dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True).clamp_min(1e-12)
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        color = color + SH_C1 * (-y * coeffs[:, 1] + z * coeffs[:, 2] - x * coeffs[:, 3])
    return color.clamp(0.0, 1.0)


@dataclass
class ProjectedGaussians:
    """Screen-space splats for one camera; rows align with the input batch."""

    means2d: torch.Tensor  # (N, 2) pixels
    depths: torch.Tensor  # (N,) camera z, meters
    cov2d: torch.Tensor  # (N, 2, 2) pixels^2
    conics: torch.Tensor  # (N, 3) inverse covariance (a, b, c)
    opacities: torch.Tensor
    colors: torch.Tensor  # (N, 3)
    valid: torch.Tensor  # (N,) bool: in front of near plane and invertible


def project_gaussians(
    gaussians: Gaussians, camera: Camera, lowpass: float = LOWPASS, near: float = NEAR_PLANE
) -> ProjectedGaussians:
    """Fused projection: Σ' = (J W R S)(J W R S)^T + λ I without forming Σ."""
    k = camera.intrinsics
    p_cam = world_to_camera(camera.pose, gaussians.means)
    z = p_cam[:, 2]
    valid = z > near
    # park culled points on the optical axis so the Jacobian stays finite
    p_safe = torch.where(valid.unsqueeze(-1), p_cam, p_cam.new_tensor([0.0, 0.0, 1.0]).expand_as(p_cam))
    jac = projection_jacobian(k, p_safe, near)
    r_w = torch.from_numpy(camera.pose.rotation).to(p_cam.dtype)
    m = jac @ r_w @ quat_to_rotmat(gaussians.quats) * gaussians.scales.unsqueeze(-2)
    cov2d = _outer_sum(m) + lowpass * torch.eye(2, dtype=m.dtype)
    inv, ok = cov2d_inverse(cov2d)
    conics = torch.stack([inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]], dim=-1)
    zs = p_safe[:, 2]
    means2d = torch.stack([k.fx * p_safe[:, 0] / zs + k.cx, k.fy * p_safe[:, 1] / zs + k.cy], dim=-1)
    colors = sh_colors(gaussians.colors, gaussians.means, camera.pose.center)
    return ProjectedGaussians(means2d, z, cov2d, conics, gaussians.opacities, colors, valid & ok)
