"""Camera geometry: quaternions, rigid poses, pinhole projection.

Conventions: quaternions are (w, x, y, z); cameras follow the OpenCV frame
(x right, y down, z forward); world frame is z-up. A :class:`Pose` maps
world coordinates into camera coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NEAR_PLANE = 0.05


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def quat_to_rotmat(q) -> torch.Tensor:
    """Rotation matrices for quaternions of shape (..., 4), normalized first."""
    q = _as_tensor(q)
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if bool((norm <= 1e-12).any()):
        raise ValueError("quat_to_rotmat: degenerate quaternion with norm <= 1e-12")
    w, x, y, z = (q / norm).unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform ``x_cam = R x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("Pose rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_cam_to_world(cls, rotation, center) -> "Pose":
        """Build from a camera-to-world rotation and the camera center."""
        r = np.asarray(rotation, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return cls(r.T, -r.T @ c)

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        center = np.asarray(center, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - center
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls.from_cam_to_world(np.stack([right, down, forward], axis=1), center)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def cam_to_world(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rotation.T, self.center

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def torch(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.rotation), torch.from_numpy(self.translation)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "Intrinsics":
        fx = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(fx, fx, (width - 1) / 2, (height - 1) / 2, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def world_to_camera(pose: Pose, p) -> torch.Tensor:
    """Transform world points (..., 3) into the camera frame."""
    p = _as_tensor(p)
    r, t = pose.torch()
    return p @ r.to(p.dtype).T + t.to(p.dtype)


def project_pinhole(k: Intrinsics, p_cam, near: float = NEAR_PLANE):
    """Project camera-frame points (..., 3).

    Returns ``(uv, z, valid)``; ``valid`` is False where ``z <= near``. Clipped
    points get finite but meaningless ``uv`` so batch paths can mask them out.
    """
    p_cam = _as_tensor(p_cam)
    x, y, z = p_cam.unbind(-1)
    valid = z > near
    zs = torch.where(valid, z, torch.ones_like(z))
    uv = torch.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], dim=-1)
    return uv, z, valid


def unproject_pinhole(k: Intrinsics, uv, z) -> torch.Tensor:
    uv = _as_tensor(uv)
    z = _as_tensor(z)
    x = (uv[..., 0] - k.cx) / k.fx * z
    y = (uv[..., 1] - k.cy) / k.fy * z
    return torch.stack([x, y, z], dim=-1)


def projection_jacobian(k: Intrinsics, p_cam, near: float = NEAR_PLANE) -> torch.Tensor:
    """Jacobian (..., 2, 3) of the pinhole projection at camera-frame points."""
    p_cam = _as_tensor(p_cam)
    x, y, z = p_cam.unbind(-1)
    if bool((z <= near).any()):
        raise ValueError(f"projection_jacobian: point with z <= near plane ({near})")
    zero = torch.zeros_like(z)
    rows = [k.fx / z, zero, -k.fx * x / (z * z), zero, k.fy / z, -k.fy * y / (z * z)]
    return torch.stack(rows, dim=-1).reshape(p_cam.shape[:-1] + (2, 3))


def relative_pose(pose_t: Pose, pose_tp: Pose) -> Pose:
    """Pose mapping camera-``t`` coordinates to camera-``t'`` coordinates."""
    r = pose_tp.rotation @ pose_t.rotation.T
    return Pose(r, pose_tp.translation - r @ pose_t.translation)
