"""Voxel feature grid, anchor MLP decoding into Gaussians, and the velocity head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .gaussians import Gaussians

PARAMS_PER_GAUSSIAN = 3 + 4 + 3 + 1  # offset, quaternion, scale, opacity (+ color)


@dataclass
class VoxelGrid:
    """Dense (X, Y, Z, C) feature volume anchored in the world frame."""

    features: torch.Tensor
    origin: np.ndarray
    voxel_size: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.features.dim() != 4 or min(self.features.shape[:3]) < 1:
            raise ValueError(f"VoxelGrid features must be (X,Y,Z,C) with X,Y,Z >= 1, got {tuple(self.features.shape)}")
        if (self.voxel_size <= 0).any():
            raise ValueError("VoxelGrid voxel_size must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.features.shape[:3])

    @property
    def channels(self) -> int:
        return self.features.shape[3]

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + np.array(self.dims) * self.voxel_size

    def centers(self) -> torch.Tensor:
        """World-space cell centers, shape (X, Y, Z, 3)."""
        idx = torch.stack(torch.meshgrid(*(torch.arange(n, dtype=torch.float64) for n in self.dims), indexing="ij"), -1)
        return torch.from_numpy(self.origin) + (idx + 0.5) * torch.from_numpy(self.voxel_size)

    def world_to_grid(self, p: torch.Tensor) -> torch.Tensor:
        """Continuous index coordinates; cell centers map to integers."""
        return (p - torch.from_numpy(self.origin)) / torch.from_numpy(self.voxel_size) - 0.5

    def with_features(self, features: torch.Tensor) -> "VoxelGrid":
        return VoxelGrid(features, self.origin, self.voxel_size)

    def detach(self) -> "VoxelGrid":
        return self.with_features(self.features.detach())


def _linear(x, layer: nn.Linear, detach: bool):
    w, b = layer.weight, layer.bias
    if detach:
        w, b = w.detach(), b.detach()
    return F.linear(x, w, b)


class AnchorMlp(nn.Module):
    """Two-layer perceptron mapping a voxel feature to G Gaussians' raw parameters."""

    def __init__(self, channels: int, hidden: int = 64, per_anchor: int = 2, sh_degree: int = 0):
        super().__init__()
        if not 1 <= per_anchor <= 8:
            raise ValueError(f"per_anchor must be in [1, 8], got {per_anchor}")
        if sh_degree not in (0, 1):
            raise ValueError(f"sh_degree must be 0 or 1, got {sh_degree}")
        self.per_anchor = per_anchor
        self.sh_degree = sh_degree
        self.fc1 = nn.Linear(channels, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, per_anchor * self.width_per_gaussian, dtype=torch.float64)

    @property
    def width_per_gaussian(self) -> int:
        return PARAMS_PER_GAUSSIAN + 3 * (self.sh_degree + 1) ** 2

    def init_output_bias(self, opacity: float = 0.3, scale: float = 0.0):
        """Start near identity rotation, small positive opacity and unit-ish scale."""
        with torch.no_grad():
            b = self.fc2.bias.view(self.per_anchor, self.width_per_gaussian)
            b[:, 3] = 1.0
            b[:, 7:10] = scale
            b[:, 10] = float(np.arctanh(opacity))

    def forward(self, x: torch.Tensor, detach_params: bool = False) -> torch.Tensor:
        h = torch.relu(_linear(x, self.fc1, detach_params))
        return _linear(h, self.fc2, detach_params)


def decode_primitives(grid: VoxelGrid, mlp: AnchorMlp, detach_params: bool = False) -> Gaussians:
    """One anchor per voxel center, ``mlp.per_anchor`` Gaussians per anchor.

    Opacities are the raw tanh outputs in [-1, 1]; run :func:`filter_gaussians`
    before rendering. ``detach_params`` freezes the MLP weights for this call.
    """
    if grid.channels != mlp.fc1.in_features:
        raise ValueError(f"decode_primitives: grid has {grid.channels} channels, MLP expects {mlp.fc1.in_features}")
    g, d = mlp.per_anchor, mlp.sh_degree
    feats = grid.features.reshape(-1, grid.channels)
    raw = mlp(feats, detach_params).reshape(-1, g, mlp.width_per_gaussian)
    n = raw.shape[0] * g
    raw = raw.reshape(n, -1)

    vs = torch.from_numpy(grid.voxel_size)
    anchors = grid.centers().reshape(-1, 1, 3).expand(-1, g, 3).reshape(n, 3)
    means = anchors + 0.5 * vs * torch.tanh(raw[:, 0:3])

    q_raw = raw[:, 3:7]
    q_norm = torch.linalg.vector_norm(q_raw, dim=-1, keepdim=True)
    ident = q_raw.new_tensor([1.0, 0.0, 0.0, 0.0]).expand_as(q_raw)
    quats = torch.where(q_norm < 1e-8, ident, q_raw / q_norm.clamp_min(1e-8))

    scale_unit = 0.5 * float(grid.voxel_size.mean())
    scales = (F.softplus(raw[:, 7:10]) * scale_unit).clamp(1e-4, 2.0 * float(grid.voxel_size.max()))
    opacities = torch.tanh(raw[:, 10])

    c = raw[:, 11:].reshape(n, (d + 1) ** 2, 3)
    colors = torch.cat([torch.sigmoid(c[:, :1]), c[:, 1:]], dim=1)
    return Gaussians(means, quats, scales, opacities, colors)


def filter_gaussians(gaussians: Gaussians) -> Gaussians:
    """Drop Gaussians whose raw opacity is <= 0; order is preserved."""
    return gaussians.select(gaussians.opacities > 0)


class VelocityHead(nn.Module):
    """Per-voxel MLP followed by a residual Conv3d-BatchNorm-ReLU refinement.

    The output layers start at zero, so a fresh head predicts a zero field
    while still receiving gradients.
    """

    def __init__(self, channels: int, hidden: int = 32, refine: int = 8):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, 3, dtype=torch.float64)
        self.conv_in = nn.Conv3d(3, refine, 3, padding=1, dtype=torch.float64)
        self.bn = nn.BatchNorm3d(refine, dtype=torch.float64)
        self.conv_out = nn.Conv3d(refine, 3, 1, dtype=torch.float64)
        with torch.no_grad():
            for layer in (self.fc2, self.conv_out):
                layer.weight.zero_()
                layer.bias.zero_()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        v = self.fc2(torch.relu(self.fc1(features)))  # (X, Y, Z, 3)
        vol = v.permute(3, 0, 1, 2).unsqueeze(0)
        r = self.conv_out(torch.relu(self.bn(self.conv_in(vol))))
        return v + r[0].permute(1, 2, 3, 0)


def predict_velocity(grid: VoxelGrid, head: VelocityHead) -> torch.Tensor:
    """World-frame velocities (X, Y, Z, 3) in m/s."""
    if grid.channels != head.fc1.in_features:
        raise ValueError(f"predict_velocity: grid has {grid.channels} channels, head expects {head.fc1.in_features}")
    return head(grid.features)
