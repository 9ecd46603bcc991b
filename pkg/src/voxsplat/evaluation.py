"""Metrics for a trained model against a synthetic sequence with ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .decoder import predict_velocity
from .io import psnr
from .motion import render_views
from .scenes import SceneSequence
from .trainer import Model, TrainConfig, validate_dataset


@dataclass
class VelocityReport:
    object_mean: np.ndarray  # mean predicted velocity over object voxels
    planted: np.ndarray  # mean ground-truth velocity over the same voxels
    magnitude_error: float  # | |pred| - |gt| | / |gt|
    angle_deg: float
    static_speed: float  # mean predicted speed over voxels with zero ground truth
    object_voxels: int

    def passes(self, magnitude_tol: float = 0.15, angle_tol: float = 15.0, static_tol: float = 0.1) -> bool:
        return self.magnitude_error <= magnitude_tol and self.angle_deg <= angle_tol and self.static_speed < static_tol


@dataclass
class EvalReport:
    frame: int
    psnr_train: float
    psnr_heldout: float | None
    depth_mae_train: float
    depth_mae_heldout: float | None
    velocity: VelocityReport

    def to_text(self) -> str:
        v = self.velocity
        fmt = lambda x: "n/a" if x is None else f"{x:.4f}"  # noqa: E731
        lines = [
            "[psnr]",
            f"frame = {self.frame}",
            f"train_views_db = {self.psnr_train:.4f}",
            f"heldout_views_db = {fmt(self.psnr_heldout)}",
            "",
            "[depth_mae]",
            f"train_views_m = {self.depth_mae_train:.4f}",
            f"heldout_views_m = {fmt(self.depth_mae_heldout)}",
            "",
            "[velocity]",
            f"object_voxels = {v.object_voxels}",
            f"object_mean = {np.array2string(v.object_mean, precision=4)}",
            f"planted_mean = {np.array2string(v.planted, precision=4)}",
            f"magnitude_error = {v.magnitude_error:.4f}",
            f"angle_deg = {v.angle_deg:.3f}",
            f"static_speed = {v.static_speed:.4f}",
        ]
        return "\n".join(lines) + "\n"


def predicted_velocity(model: Model) -> np.ndarray:
    """(X, Y, Z, 3) field from the velocity head in inference mode."""
    head = model.velocity
    was_training = head.training
    head.eval()
    with torch.no_grad():
        vel = predict_velocity(model.grid().detach(), head).numpy()
    head.train(was_training)
    return vel


def velocity_report(pred: np.ndarray, gt: np.ndarray) -> VelocityReport:
    """Compare a predicted field with ground truth; object voxels are those with nonzero truth."""
    if pred.shape != gt.shape:
        raise ValueError(f"velocity field shape {pred.shape} does not match ground truth {gt.shape}")
    moving = np.linalg.norm(gt, axis=-1) > 0
    static = np.linalg.norm(pred[~moving], axis=-1).mean() if (~moving).any() else 0.0
    if not moving.any():
        zero = np.zeros(3)
        return VelocityReport(zero, zero, 0.0, 0.0, float(static), 0)
    mean, planted = pred[moving].mean(0), gt[moving].mean(0)
    gt_speed, speed = np.linalg.norm(planted), np.linalg.norm(mean)
    cos = mean @ planted / (speed * gt_speed) if speed > 0 else -1.0
    return VelocityReport(mean, planted, float(abs(speed - gt_speed) / gt_speed),
                          float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))), float(static), int(moving.sum()))


def depth_mae(rendered: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute depth error over pixels where the ground truth hits a surface."""
    hit = gt > 0
    if not hit.any():
        return 0.0
    return float(np.abs(rendered[hit] - gt[hit]).mean())


def evaluate(model: Model, seq: SceneSequence, config: TrainConfig) -> EvalReport:
    """PSNR and depth MAE on train and held-out views of the reference frame, plus velocity error."""
    frame = validate_dataset(seq, config)
    train_cams = seq.train_cameras()
    with torch.no_grad():
        views = render_views(model.grid(), model.decoder, seq.cameras[frame], config.render_options())
    ps = [psnr(v.color.numpy(), seq.images[frame][c]) for c, v in enumerate(views)]
    mae = [depth_mae(v.depth_norm.numpy(), seq.depths[frame][c]) for c, v in enumerate(views)]
    held = list(seq.holdout)
    return EvalReport(
        frame=frame,
        psnr_train=float(np.mean([ps[c] for c in train_cams])),
        psnr_heldout=float(np.mean([ps[c] for c in held])) if held else None,
        depth_mae_train=float(np.mean([mae[c] for c in train_cams])),
        depth_mae_heldout=float(np.mean([mae[c] for c in held])) if held else None,
        velocity=velocity_report(predicted_velocity(model), seq.velocities[frame]),
    )
