"""Loss composition, masking augmentation, AdamW and the pre-training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .decoder import AnchorMlp, VelocityHead, VoxelGrid, decode_primitives, filter_gaussians, predict_velocity
from .motion import velocity_loss
from .photometric import pc_loss_from_depth
from .rasterizer import RenderOptions, render
from .scenes import SceneSequence

log = logging.getLogger(__name__)

METRICS_HEADER = "step,L,L_img,L_vel,L_pc,wall_ms"
GROUPS = ("grid", "decoder", "velocity")


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class TrainConfig:
    w_img: float = 0.5
    w_vel: float = 1.0
    w_pc: float = 1.0
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 12
    steps_per_epoch: int = 50
    reference_frame: int | None = None
    neighbor_offsets: tuple = (-1, 1)
    mask_enabled: bool = False
    mask_size: int = 32
    mask_ratio: float = 0.3
    sh_degree: int = 0
    per_anchor: int = 2
    channels: int = 16
    mlp_hidden: int = 64
    head_hidden: int = 64
    feature_init_std: float = 0.5
    init_opacity: float = 0.3
    seed: int = 0
    pc_alpha: float = 0.85
    pc_reduction: str = "mean"
    frozen: tuple = ()
    lr_scale: dict = field(default_factory=dict)  # per-group lr multipliers
    cutoff_sigma: float = 3.0
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0
    preview_every: int = 50
    check_grad_partition: bool = False  # assert every step that L_vel only reaches the velocity head

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("w_img", "w_vel", "w_pc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"config.{name} must be a finite non-negative number, got {v}")
        if self.epochs < 1:
            raise ValueError(f"config.epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 1:
            raise ValueError(f"config.steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError(f"config.mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.mask_size < 1:
            raise ValueError(f"config.mask_size must be >= 1, got {self.mask_size}")
        if self.lr <= 0:
            raise ValueError(f"config.lr must be positive, got {self.lr}")
        if self.sh_degree not in (0, 1):
            raise ValueError(f"config.sh_degree must be 0 or 1, got {self.sh_degree}")
        if not 1 <= self.per_anchor <= 8:
            raise ValueError(f"config.per_anchor must be in [1, 8], got {self.per_anchor}")
        if self.pc_reduction not in ("mean", "min"):
            raise ValueError(f"config.pc_reduction must be 'mean' or 'min', got {self.pc_reduction!r}")
        if not self.neighbor_offsets or 0 in self.neighbor_offsets:
            raise ValueError(f"config.neighbor_offsets must be non-empty and non-zero, got {self.neighbor_offsets}")
        bad = set(self.frozen) - set(GROUPS)
        if bad:
            raise ValueError(f"config.frozen has unknown group(s) {sorted(bad)}")
        bad = set(self.lr_scale) - set(GROUPS)
        if bad:
            raise ValueError(f"config.lr_scale has unknown group(s) {sorted(bad)}")
        for g, v in self.lr_scale.items():
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"config.lr_scale.{g} must be positive, got {v}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_dict(cls, data: dict | None) -> "TrainConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"config: unknown field(s) {sorted(unknown)}")
        for key in ("betas", "neighbor_offsets", "frozen", "background"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def render_options(self) -> RenderOptions:
        return RenderOptions(background=tuple(self.background), cutoff_sigma=self.cutoff_sigma)


# --- losses ----------------------------------------------------------------

def l1_image_loss(rendered: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                  weights: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
    """Mean absolute error over views, pixels and channels.

    ``weights`` optionally gives a per-pixel (H, W) weight per view; the mean
    then runs over weighted pixels only.
    """
    if len(rendered) != len(targets):
        raise ValueError(f"l1_image_loss: {len(rendered)} renders vs {len(targets)} targets")
    total, count = 0.0, 0.0
    for i, (r, t) in enumerate(zip(rendered, targets)):
        if r.shape != t.shape:
            raise ValueError(f"l1_image_loss: view {i} shape {tuple(r.shape)} vs {tuple(t.shape)}")
        err = (r - t).abs()
        if weights is None:
            total = total + err.sum()
            count += err.numel()
        else:
            w = weights[i].unsqueeze(-1).to(err.dtype)
            total = total + (err * w).sum()
            count += float(w.sum()) * err.shape[-1]
    return total / max(count, 1.0)


def total_loss(l_img, l_vel, l_pc, weights: tuple = (0.5, 1.0, 1.0)):
    w1, w2, w3 = weights
    return w1 * l_img + w2 * l_vel + w3 * l_pc


def mask_images(images: Sequence[np.ndarray], patch_size: int, ratio: float, rng: np.random.Generator):
    """Zero a random subset of non-overlapping square patches in each image.

    ``floor(ratio * n_patches)`` patches are masked per image. Returns the
    masked copies and the boolean (H, W) masks (True = masked).
    """
    if patch_size < 1:
        raise ValueError("mask_images: patch_size must be >= 1")
    if not 0 <= ratio < 1:
        raise ValueError("mask_images: ratio must be in [0, 1)")
    out, masks = [], []
    for img in images:
        h, w = img.shape[:2]
        py, px = -(-h // patch_size), -(-w // patch_size)
        n = py * px
        k = int(math.floor(ratio * n))
        chosen = rng.choice(n, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
        mask = np.zeros((h, w), dtype=bool)
        for p in chosen:
            y, x = divmod(int(p), px)
            mask[y * patch_size:(y + 1) * patch_size, x * patch_size:(x + 1) * patch_size] = True
        masked = np.array(img, copy=True)
        masked[mask] = 0
        out.append(masked)
        masks.append(mask)
    return out, masks


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimState:
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01, lr_scale: dict | None = None) -> None:
    """Decoupled-weight-decay Adam, updating ``params`` in place.

    Entries whose gradient is None are skipped. A non-finite gradient aborts
    the step before anything is modified. ``lr_scale`` optionally maps a
    parameter name to a learning-rate multiplier.
    """
    lr_scale = lr_scale or {}
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            step_lr = lr * lr_scale.get(name, 1.0)
            p.mul_(1 - step_lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-step_lr / bc1)


# --- model -----------------------------------------------------------------

class Model(nn.Module):
    """Trainable feature grid, anchor decoder and velocity head."""

    def __init__(self, dims, origin, voxel_size, config: TrainConfig):
        super().__init__()
        gen = torch.Generator().manual_seed(config.seed)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = np.asarray(voxel_size, dtype=np.float64)
        self.features = nn.Parameter(
            torch.randn(*dims, config.channels, generator=gen, dtype=torch.float64) * config.feature_init_std)
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.decoder = AnchorMlp(config.channels, config.mlp_hidden, config.per_anchor, config.sh_degree)
            self.decoder.init_output_bias(config.init_opacity)
            self.velocity = VelocityHead(config.channels, config.head_hidden)

    def grid(self) -> VoxelGrid:
        return VoxelGrid(self.features, self.origin, self.voxel_size)

    def groups(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            "grid": {"features": self.features},
            "decoder": {f"decoder.{k}": v for k, v in self.decoder.named_parameters()},
            "velocity": {f"velocity.{k}": v for k, v in self.velocity.named_parameters()},
        }

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {"features": self.features.detach()}
        out.update({f"decoder.{k}": v.detach() for k, v in self.decoder.state_dict().items()})
        out.update({f"velocity.{k}": v.detach() for k, v in self.velocity.state_dict().items()
                    if v.is_floating_point()})
        out["grid.origin"] = torch.from_numpy(self.origin)
        out["grid.voxel_size"] = torch.from_numpy(self.voxel_size)
        return out

    def load_tensors(self, tensors: dict) -> None:
        with torch.no_grad():
            self.features.copy_(torch.as_tensor(tensors["features"]))
            for prefix, module in (("decoder.", self.decoder), ("velocity.", self.velocity)):
                sd = module.state_dict()
                for k in sd:
                    if sd[k].is_floating_point():
                        sd[k].copy_(torch.as_tensor(tensors[prefix + k]))
        self.origin = np.asarray(tensors["grid.origin"], dtype=np.float64)
        self.voxel_size = np.asarray(tensors["grid.voxel_size"], dtype=np.float64)


def model_for_sequence(seq: SceneSequence, config: TrainConfig) -> Model:
    g = seq.grid
    return Model(tuple(g.dims), g.origin, g.voxel_size, config)


# --- loop ------------------------------------------------------------------

def _t(img) -> torch.Tensor:
    return torch.as_tensor(np.asarray(img, dtype=np.float64))


@dataclass
class StepLosses:
    total: torch.Tensor
    img: torch.Tensor
    vel: torch.Tensor
    pc: torch.Tensor


def compute_losses(model: Model, seq: SceneSequence, config: TrainConfig, frame: int,
                   cams: Sequence[int], loss_masks=None, opts: RenderOptions | None = None) -> StepLosses:
    """Forward pass for one window centred on ``frame``."""
    opts = opts or config.render_options()
    grid = model.grid()
    zero = torch.zeros((), dtype=torch.float64)
    cameras_t = [seq.cameras[frame][c] for c in cams]
    images_t = [_t(seq.images[frame][c]) for c in cams]
    neighbors = [frame + o for o in config.neighbor_offsets]

    need_render = config.w_img > 0 or config.w_pc > 0
    frames = []
    if need_render:
        gaussians = filter_gaussians(decode_primitives(grid, model.decoder))
        frames = [render(gaussians, cam, opts) for cam in cameras_t]
    l_img = l1_image_loss([f.color for f in frames], images_t, loss_masks) if config.w_img > 0 else zero

    l_pc = zero
    if config.w_pc > 0:
        nb = [([_t(seq.images[n][c]) for c in cams], [seq.cameras[n][c].pose for c in cams]) for n in neighbors]
        l_pc = pc_loss_from_depth([f.depth_norm for f in frames], images_t, [c.pose for c in cameras_t],
                                  [c.intrinsics for c in cameras_t], nb, config.pc_alpha, config.pc_reduction)

    l_vel = zero
    if config.w_vel > 0:
        vel = predict_velocity(grid.detach(), model.velocity)
        terms = []
        for n in neighbors:
            dt = float(seq.timestamps[n] - seq.timestamps[frame])
            terms.append(velocity_loss(grid, vel, model.decoder, [seq.cameras[n][c] for c in cams],
                                       [_t(seq.images[n][c]) for c in cams], dt, opts))
        l_vel = torch.stack(terms).mean()

    total = total_loss(l_img, l_vel, l_pc, (config.w_img, config.w_vel, config.w_pc))
    return StepLosses(total, l_img, l_vel, l_pc)


def velocity_grad_leaks(model: Model, l_vel: torch.Tensor) -> list[str]:
    """Names of non-velocity-head parameters that receive nonzero gradient from ``l_vel``."""
    if not l_vel.requires_grad:
        return []
    named = [(k, v) for g, ps in model.groups().items() if g != "velocity" for k, v in ps.items()]
    grads = torch.autograd.grad(l_vel, [v for _, v in named], retain_graph=True, allow_unused=True)
    return [k for (k, _), g in zip(named, grads) if g is not None and bool((g != 0).any())]


def validate_dataset(seq: SceneSequence, config: TrainConfig) -> int:
    if seq.num_frames < 3:
        raise ValueError(f"dataset has {seq.num_frames} frames; at least 3 are required")
    frame = seq.num_frames // 2 if config.reference_frame is None else config.reference_frame
    for o in config.neighbor_offsets:
        if not 0 <= frame + o < seq.num_frames:
            raise ValueError(f"reference frame {frame} has no neighbor at offset {o}")
    if not seq.train_cameras():
        raise ValueError("dataset has no training cameras")
    return frame


@dataclass
class TrainResult:
    model: Model
    state: OptimState
    metrics: list  # rows of (step, L, L_img, L_vel, L_pc, wall_ms)


def format_metrics_row(row) -> str:
    step, *vals, wall = row
    return ",".join([str(step)] + [repr(float(v)) for v in vals] + [f"{wall:.3f}"])


def train(config: TrainConfig, seq: SceneSequence, model: Model | None = None, state: OptimState | None = None,
          steps: int | None = None, on_step: Callable | None = None) -> TrainResult:
    """Run the pre-training loop on one sequence window.

    ``steps`` overrides ``config.total_steps``; passing a ``model`` and
    ``state`` resumes where they left off. ``on_step(step, model, losses)`` is
    called after every update.
    """
    config.validate()
    frame = validate_dataset(seq, config)
    torch.manual_seed(config.seed)
    model = model or model_for_sequence(seq, config)
    state = state or OptimState()
    cams = seq.train_cameras()
    groups = model.groups()
    params = {k: v for g, ps in groups.items() if g not in config.frozen for k, v in ps.items()}
    scale = {k: config.lr_scale.get(g, 1.0) for g, ps in groups.items() for k in ps}
    metrics = []
    n_steps = config.total_steps if steps is None else steps
    for _ in range(n_steps):
        t0 = time.perf_counter()
        loss_masks = None
        if config.mask_enabled:
            step_rng = np.random.default_rng([config.seed, state.step + 1])  # per-step stream keeps resumes exact
            _, masks = mask_images([seq.images[frame][c] for c in cams], config.mask_size, config.mask_ratio, step_rng)
            loss_masks = [torch.from_numpy(~m) for m in masks]
        model.zero_grad(set_to_none=True)
        losses = compute_losses(model, seq, config, frame, cams, loss_masks)
        if config.check_grad_partition:
            leaks = velocity_grad_leaks(model, losses.vel)
            if leaks:
                raise RuntimeError(f"step {state.step + 1}: velocity loss reached {leaks}")
        if losses.total.requires_grad:
            losses.total.backward()
        grads = {k: p.grad for k, p in params.items()}
        adamw_step(params, grads, state, config.lr, config.betas, config.eps, config.weight_decay, scale)
        wall = (time.perf_counter() - t0) * 1000.0
        row = (state.step, losses.total.item(), losses.img.item(), losses.vel.item(), losses.pc.item(), wall)
        metrics.append(row)
        if on_step is not None:
            on_step(state.step, model, losses)
    return TrainResult(model, state, metrics)


def write_metrics(path, rows, append: bool = False) -> None:
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode) as f:
        if mode == "w":
            f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(format_metrics_row(row) + "\n")
