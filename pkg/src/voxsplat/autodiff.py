"""Reverse-mode differentiation substrate.

Tensors are float64 ``torch.Tensor`` objects and torch's autograd records the
tape. This module adds the pipeline's primitive ops with explicit shape
errors, the two interpolation kernels (trilinear over voxel grids, bilinear
over images), ``stop_gradient`` and a central-difference checker.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64)).clone()
    return t.requires_grad_(requires_grad)


def _broadcast(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ValueError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}") from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast("mul", a, b)
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def exp(a: torch.Tensor) -> torch.Tensor:
    return torch.exp(a)


def tanh(a: torch.Tensor) -> torch.Tensor:
    return torch.tanh(a)


def softplus(a: torch.Tensor) -> torch.Tensor:
    return F.softplus(a)


def sigmoid(a: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(a)


def sum(a: torch.Tensor, dim=None) -> torch.Tensor:  # noqa: A001
    return a.sum() if dim is None else a.sum(dim)


def slice(a: torch.Tensor, index) -> torch.Tensor:  # noqa: A001
    return a[index]


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    shapes = [tuple(t.shape) for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != dim % len(ref)):
            raise ValueError(f"concat: incompatible shapes {shapes} along dim {dim}")
    return torch.cat(list(tensors), dim=dim)


def stop_gradient(t: torch.Tensor) -> torch.Tensor:
    """Same values, no gradient flows back through the result."""
    return t.detach()


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()


def _corner_gather(features: torch.Tensor, idx: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Gather ``features[idx]`` with zero padding; returns values and in-bounds mask."""
    inside = torch.ones_like(idx[0], dtype=torch.bool)
    clamped = []
    for axis, i in enumerate(idx):
        size = features.shape[axis]
        inside = inside & (i >= 0) & (i < size)
        clamped.append(i.clamp(0, size - 1))
    vals = features[tuple(clamped)]
    return vals * inside.unsqueeze(-1).to(vals.dtype), inside


def trilinear_sample(features: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample an (X, Y, Z, C) volume at continuous index coordinates (..., 3).

    Integer coordinates hit cell centers exactly. Corners outside the volume
    contribute zero (zero padding).
    """
    if features.dim() != 4 or coords.shape[-1] != 3:
        raise ValueError(
            f"trilinear_sample: expected (X,Y,Z,C) features and (...,3) coords, "
            f"got {tuple(features.shape)} and {tuple(coords.shape)}"
        )
    base = torch.floor(coords.detach())
    frac = coords - base
    base = base.long()
    out = 0
    for corner in range(8):
        bits = [(corner >> a) & 1 for a in range(3)]
        idx = [base[..., a] + bits[a] for a in range(3)]
        w = 1
        for a in range(3):
            w = w * (frac[..., a] if bits[a] else 1 - frac[..., a])
        vals, _ = _corner_gather(features, idx)
        out = out + w.unsqueeze(-1) * vals
    return out


def bilinear_sample(image: torch.Tensor, uv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample an (H, W, C) image at pixel coordinates (..., 2) given as (u, v).

    Returns ``(values, valid)``; ``valid`` is False outside ``[0, W-1] x [0, H-1]``
    and those samples are zero.
    """
    if image.dim() != 3 or uv.shape[-1] != 2:
        raise ValueError(
            f"bilinear_sample: expected (H,W,C) image and (...,2) coords, "
            f"got {tuple(image.shape)} and {tuple(uv.shape)}"
        )
    h, w = image.shape[:2]
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u0 = torch.floor(u.detach())
    v0 = torch.floor(v.detach())
    fu, fv = u - u0, v - v0
    u0, v0 = u0.long(), v0.long()
    out = 0
    for dv in (0, 1):
        for du in (0, 1):
            wgt = (fu if du else 1 - fu) * (fv if dv else 1 - fv)
            vals, _ = _corner_gather(image, [v0 + dv, u0 + du])
            out = out + wgt.unsqueeze(-1) * vals
    out = out * valid.unsqueeze(-1).to(image.dtype)
    return out, valid


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    return_details: bool = False,
):
    """Max relative error between autograd and central differences.

    ``f`` takes no arguments and reads ``params`` (leaf tensors with
    ``requires_grad``), which are perturbed in place. The error of one entry is
    ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    worst = 0.0
    details = []
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            af = a.view(-1)
            denom = torch.maximum(torch.maximum(af.abs(), numeric.abs()), torch.tensor(1e-8, dtype=af.dtype))
            err = ((af - numeric).abs() / denom).max().item() if flat.numel() else 0.0
            worst = max(worst, err)
            details.append((af.clone(), numeric))
    for p in params:
        p.grad = None
    return (worst, details) if return_details else worst
