"""Shared fixtures-by-function for the test suite."""
import numpy as np
import torch

from voxsplat.gaussians import Gaussians
from voxsplat.geometry import Camera, Intrinsics, Pose


def front_camera(size=64, fov=60.0):
    return Camera(Intrinsics.from_fov(size, size, fov), Pose.identity())


def random_gaussians(rng, n, sh_degree=0, requires_grad=False, z_range=(2.0, 6.0), opacity=(0.05, 0.95)):
    """Gaussians scattered in front of an identity-pose camera."""
    z = rng.uniform(*z_range, n)
    xy = rng.uniform(-0.5, 0.5, (n, 2)) * z[:, None]
    means = np.c_[xy, z]
    quats = rng.normal(size=(n, 4))
    scales = rng.uniform(0.05, 0.3, (n, 3))
    opac = rng.uniform(*opacity, n)
    colors = rng.uniform(0.05, 0.95, (n, 1, 3))
    if sh_degree == 1:
        colors = np.concatenate([colors, rng.normal(scale=0.1, size=(n, 3, 3))], axis=1)
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad) for a in (means, quats, scales, opac, colors)]
    return Gaussians(*ts)


def single_gaussian(mean, opacity, color, scale=0.1, requires_grad=False):
    t = lambda a: torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad)  # noqa: E731
    return Gaussians(t([mean]), t([[1.0, 0, 0, 0]]), t([[scale] * 3]), t([opacity]), t([[color]]))
