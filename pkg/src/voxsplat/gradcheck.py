"""Finite-difference verification of every differentiable op and the full training loss.

Each case builds fresh random 64-bit inputs from a seed and returns a
zero-argument scalar function plus the leaf tensors to perturb. Inputs are
drawn away from kinks (ReLU zeros, sampler cell borders, clamp limits) so that
central differences are meaningful.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .decoder import AnchorMlp, VelocityHead, VoxelGrid, decode_primitives, filter_gaussians, predict_velocity
from .gaussians import (Gaussians, build_covariance, gaussian_weight, project_covariance, project_gaussians,
                        sh_colors)
from .geometry import Camera, Intrinsics, Pose, projection_jacobian
from .motion import velocity_loss, warp_voxels
from .photometric import pc_loss_from_depth, reproject, ssim
from .rasterizer import RenderOptions, corrupted_adjoint, render
from .trainer import l1_image_loss, total_loss

THRESHOLD = 1e-4
STEP = 1e-5
EXACT = RenderOptions().exact()

Case = Callable[[np.random.Generator], tuple[Callable[[], torch.Tensor], list[torch.Tensor]]]


def _leaf(a) -> torch.Tensor:
    return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _probe(rng, shape) -> torch.Tensor:
    """Fixed random weights that turn a tensor output into an asymmetric scalar."""
    return torch.tensor(rng.normal(size=shape))


def _off_grid(rng, lo, hi, size):
    """Integers plus fractions in [0.1, 0.9] so samplers stay inside one cell under perturbation."""
    return rng.integers(lo, hi, size=size) + rng.uniform(0.1, 0.9, size=size)


def _unary(op):
    def case(rng):
        x = _leaf(rng.normal(size=6))
        w = _probe(rng, 6)
        return lambda: ad.sum(op(x) * w), [x]
    return case


def _add(rng):
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(3, 4)))
    w = _probe(rng, (3, 4))
    return lambda: ad.sum(ad.add(a, b) ** 2 * w), [a, b]


def _mul(rng):
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(3, 4)))
    w = _probe(rng, (3, 4))
    return lambda: ad.sum(ad.mul(a, b) * w), [a, b]


def _matmul(rng):
    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(4, 2)))
    w = _probe(rng, (3, 2))
    return lambda: ad.sum(ad.matmul(a, b) * w), [a, b]


def _sum(rng):
    a = _leaf(rng.normal(size=(3, 4)))
    w = _probe(rng, 4)
    return lambda: ad.sum(ad.sum(a, dim=0) ** 2 * w), [a]


def _slice(rng):
    a = _leaf(rng.normal(size=(4, 5)))
    w = _probe(rng, (2, 3))
    return lambda: ad.sum(ad.slice(a, (slice(1, 3), slice(0, 3))) ** 2 * w), [a]


def _concat(rng):
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 2)))
    w = _probe(rng, (2, 5))
    return lambda: ad.sum(ad.concat([a, b], dim=1) ** 2 * w), [a, b]


def _trilinear(rng):
    vol = _leaf(rng.normal(size=(3, 4, 2, 2)))
    coords = _leaf(_off_grid(rng, -1, 3, (6, 3)))
    w = _probe(rng, (6, 2))
    return lambda: ad.sum(ad.trilinear_sample(vol, coords) * w), [vol, coords]


def _bilinear(rng):
    img = _leaf(rng.uniform(size=(5, 6, 3)))
    uv = _leaf(np.c_[_off_grid(rng, 0, 5, 7), _off_grid(rng, 0, 4, 7)])
    w = _probe(rng, (7, 3))
    return lambda: ad.sum(ad.bilinear_sample(img, uv)[0] * w), [img, uv]


def _covariance(rng):
    q, s = _leaf(rng.normal(size=(4, 4))), _leaf(rng.uniform(0.2, 1.0, size=(4, 3)))
    w = _probe(rng, (4, 3, 3))
    return lambda: ad.sum(build_covariance(q, s) * w), [q, s]


def _random_pose(rng) -> Pose:
    return Pose.look_at(rng.normal(size=3) * 0.5 + [0.0, -4.0, 1.0], rng.normal(size=3) * 0.3)


def _project_cov(rng):
    a = rng.normal(size=(3, 3, 3))
    cov = _leaf(a @ a.transpose(0, 2, 1) + np.eye(3))
    p_cam = _leaf(np.c_[rng.normal(size=(3, 2)), rng.uniform(2.0, 4.0, 3)])
    k = Intrinsics.from_fov(32, 32, 60)
    pose = _random_pose(rng)
    w = _probe(rng, (3, 2, 2))
    return lambda: ad.sum(project_covariance(cov, pose, projection_jacobian(k, p_cam)) * w), [cov, p_cam]


def _weight(rng):
    a = rng.normal(size=(5, 2, 2))
    cov = _leaf(a @ a.transpose(0, 2, 1) + np.eye(2))
    delta = _leaf(rng.normal(size=(5, 2)))
    w = _probe(rng, 5)
    return lambda: ad.sum(gaussian_weight(cov, delta) * w), [cov, delta]


def _sh(rng):
    coeffs = np.concatenate([rng.uniform(0.3, 0.7, (4, 1, 3)), rng.normal(scale=0.05, size=(4, 3, 3))], 1)
    coeffs, means = _leaf(coeffs), _leaf(rng.normal(size=(4, 3)))
    center = rng.normal(size=3) + [0.0, -5.0, 0.0]
    w = _probe(rng, (4, 3))
    return lambda: ad.sum(sh_colors(coeffs, means, center) * w), [coeffs, means]


def _random_splats(rng, n=6) -> Gaussians:
    z = rng.uniform(2.0, 4.0, n)
    means = np.c_[rng.uniform(-0.3, 0.3, (n, 2)) * z[:, None], z]
    return Gaussians(_leaf(means), _leaf(rng.normal(size=(n, 4))), _leaf(rng.uniform(0.1, 0.3, (n, 3))),
                     _leaf(rng.uniform(0.2, 0.8, n)), _leaf(rng.uniform(0.2, 0.8, (n, 1, 3))))


def _splat_leaves(g: Gaussians) -> list[torch.Tensor]:
    return [g.means, g.quats, g.scales, g.opacities, g.colors]


def _project(rng):
    g = _random_splats(rng)
    cam = Camera(Intrinsics.from_fov(24, 24, 60), Pose.identity())
    w1, w2 = _probe(rng, (6, 2)), _probe(rng, (6, 2, 2))

    def f():
        p = project_gaussians(g, cam)
        # keep the pixel-scale means term small so it does not drown the covariance term in roundoff
        return ad.sum((p.means2d - 12.0) * w1) * 0.01 + ad.sum(p.cov2d * w2)
    return f, _splat_leaves(g)


def _rasterize(rng):
    g = _random_splats(rng)
    cam = Camera(Intrinsics.from_fov(16, 16, 50), Pose.identity())
    wc, wd, wa = _probe(rng, (16, 16, 3)), _probe(rng, (16, 16)), _probe(rng, (16, 16))

    def f():
        out = render(g, cam, EXACT)
        return ad.sum(out.color * wc) + ad.sum(out.depth_norm * wd) * 0.1 + ad.sum(out.alpha * wa)
    return f, _splat_leaves(g)


def _decode(rng):
    torch.manual_seed(int(rng.integers(2**31)))
    feats = _leaf(rng.normal(size=(2, 2, 1, 4)))
    mlp = AnchorMlp(4, hidden=6, per_anchor=1)
    mlp.init_output_bias(opacity=0.5)
    grid = VoxelGrid(feats, (0.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    out = decode_primitives(grid, mlp)
    probes = [_probe(rng, t.shape) for t in _splat_leaves(out)]
    leaves = [feats, mlp.fc1.weight, mlp.fc2.weight]

    def f():
        g = decode_primitives(grid, mlp)
        return sum(ad.sum(t * w) for t, w in zip(_splat_leaves(g), probes))
    return f, leaves


def _warp(rng):
    feats = _leaf(rng.normal(size=(4, 3, 2, 2)))
    grid = VoxelGrid(feats, (0.0, 0.0, 0.0), (0.5, 0.5, 1.0))
    # displacements of 0.1..0.9 cells keep every sample inside one cell
    vel = _leaf(rng.uniform(0.1, 0.9, size=(4, 3, 2, 3)) * rng.choice([-1.0, 1.0], size=3) * [1.0, 1.0, 2.0])
    w = _probe(rng, (4, 3, 2, 2))
    return lambda: ad.sum(warp_voxels(grid.with_features(feats), vel, 0.5).features * w), [feats, vel]


def _ssim(rng):
    a, b = _leaf(rng.uniform(size=(6, 7, 3))), _leaf(rng.uniform(size=(6, 7, 3)))
    w = _probe(rng, (6, 7))
    return lambda: ad.sum(ssim(a, b) * w), [a, b]


def _reproject(rng):
    k = Intrinsics.from_fov(10, 10, 60)
    src = _leaf(rng.uniform(size=(10, 10, 3)))
    depth = _leaf(rng.uniform(4.0, 6.0, size=(10, 10)))
    rel = Pose.from_cam_to_world(np.eye(3), rng.uniform(-0.05, 0.05, 3))
    w = _probe(rng, (10, 10, 3))
    return lambda: ad.sum(reproject(src, depth, rel, k, k)[0] * w), [src, depth]


PRIMITIVES: dict[str, Case] = {
    "add": _add, "mul": _mul, "matmul": _matmul,
    "exp": _unary(ad.exp), "tanh": _unary(ad.tanh), "softplus": _unary(ad.softplus), "sigmoid": _unary(ad.sigmoid),
    "sum": _sum, "slice": _slice, "concat": _concat,
    "trilinear_sample": _trilinear, "bilinear_sample": _bilinear,
    "build_covariance": _covariance, "project_covariance": _project_cov, "gaussian_weight": _weight,
    "sh_colors": _sh, "project_gaussians": _project, "rasterize": _rasterize,
    "decode_primitives": _decode, "warp_voxels": _warp, "ssim": _ssim, "reproject": _reproject,
}


def end_to_end(rng):
    """Decode, render, and score a tiny dynamic scene with the weighted three-term loss.

    The velocity term reads a frozen copy of the grid and decoder, which is
    exactly what the stop-gradient in the training graph means, so central
    differences of this function are the right reference for every parameter.
    """
    torch.manual_seed(int(rng.integers(2**31)))
    dims, channels = (3, 3, 2), 4
    feats = _leaf(rng.normal(size=dims + (channels,)))
    origin, vs = (-0.75, -0.75, 0.0), (0.5, 0.5, 0.5)
    mlp = AnchorMlp(channels, hidden=6, per_anchor=1)
    mlp.init_output_bias(opacity=0.6, scale=0.5)
    head = VelocityHead(channels, hidden=6)
    with torch.no_grad():
        head.fc2.weight.normal_(0.0, 0.3)
        head.conv_out.weight.normal_(0.0, 0.3)
    frozen_mlp = copy.deepcopy(mlp)
    frozen_grid = VoxelGrid(feats.detach().clone(), origin, vs)

    k = Intrinsics.from_fov(12, 12, 60)
    centers = [rng.normal(size=3) * 0.2 + c for c in ([0.0, -3.5, 2.0], [3.0, 1.0, 2.5])]
    step = np.array([0.05, 0.02, 0.0])
    cams = [[Camera(k, Pose.look_at(c + i * step, [0.0, 0.0, 0.4])) for c in centers] for i in (-1, 0, 1)]
    images = [[torch.tensor(rng.uniform(0.2, 0.8, (12, 12, 3))) for _ in centers] for _ in range(3)]
    dts = (-0.5, 0.5)

    def f():
        grid = VoxelGrid(feats, origin, vs)
        frames = [render(filter_gaussians(decode_primitives(grid, mlp)), c, EXACT) for c in cams[1]]
        l_img = l1_image_loss([fr.color for fr in frames], images[1])
        nb = [(images[n], [c.pose for c in cams[n]]) for n in (0, 2)]
        l_pc = pc_loss_from_depth([fr.depth_norm for fr in frames], images[1], [c.pose for c in cams[1]],
                                  [k] * len(centers), nb)
        vel = predict_velocity(frozen_grid, head)
        l_vel = torch.stack([velocity_loss(frozen_grid, vel, frozen_mlp, cams[n], images[n], dt, EXACT)
                             for n, dt in zip((0, 2), dts)]).mean()
        return total_loss(l_img, l_vel, l_pc)

    leaves = [feats, mlp.fc1.bias, mlp.fc2.weight, head.fc2.weight, head.conv_out.weight]
    return f, leaves


@dataclass
class GradcheckReport:
    seeds: list
    per_op: dict = field(default_factory=dict)  # name -> max relative error over seeds
    negative_control: float = 0.0  # error with a deliberately wrong rasterizer adjoint
    seconds: float = 0.0
    threshold: float = THRESHOLD

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.per_op.items() if not v < self.threshold]

    @property
    def control_detected(self) -> bool:
        return self.negative_control > 1e-2

    @property
    def passed(self) -> bool:
        return not self.failures and self.control_detected

    def table(self) -> str:
        width = max(len(k) for k in self.per_op) if self.per_op else 10
        lines = [f"{'op':<{width}}  max_rel_err  status"]
        for k, v in self.per_op.items():
            lines.append(f"{k:<{width}}  {v:11.3e}  {'ok' if v < self.threshold else 'FAIL'}")
        lines.append(f"{'negative control':<{width}}  {self.negative_control:11.3e}  "
                     f"{'detected' if self.control_detected else 'MISSED'}")
        lines.append(f"seeds={self.seeds} threshold={self.threshold:g} time={self.seconds:.1f}s")
        return "\n".join(lines)


def run_case(case: Case, seed: int, h: float = STEP) -> float:
    rng = np.random.default_rng(seed)
    f, leaves = case(rng)
    return ad.finite_diff_check(f, leaves, h)


def run(seeds=(0, 1, 2, 3, 4), ops: list[str] | None = None, include_end_to_end: bool = True,
        h: float = STEP, threshold: float = THRESHOLD) -> GradcheckReport:
    """Max relative error per op over ``seeds``, plus the corrupted-adjoint control."""
    t0 = time.perf_counter()
    cases = {k: PRIMITIVES[k] for k in (ops or PRIMITIVES)}
    if include_end_to_end:
        cases["end_to_end_loss"] = end_to_end
    report = GradcheckReport(list(seeds), threshold=threshold)
    for name, case in cases.items():
        report.per_op[name] = max(run_case(case, s, h) for s in seeds)
    with corrupted_adjoint(1.1):
        report.negative_control = run_case(_rasterize, seeds[0], h)
    report.seconds = time.perf_counter() - t0
    return report
