"""Command-line entry point: synth, fit, render, gradcheck and eval.

Exit codes: 0 success, 1 invalid input (bad flags, files or config values),
2 failure while computing.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import gradcheck as gc
from .evaluation import evaluate
from .io import (FormatError, load_checkpoint, load_yaml, read_sequence, save_checkpoint, scene_spec_from_dict,
                 write_pfm, write_png, write_sequence)
from .motion import render_views
from .rasterizer import corrupted_adjoint
from .scenes import PRESETS, SceneSpec, generate_scene
from .trainer import Model, OptimState, TrainConfig, model_for_sequence, train, validate_dataset, write_metrics

log = logging.getLogger("voxsplat")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class InvalidInput(Exception):
    """Raised for problems the user can fix by changing flags, files or config."""


# --- checkpoints ------------------------------------------------------------

def save_training_state(path, model: Model, state: OptimState, config: TrainConfig) -> None:
    tensors = dict(model.named_tensors())
    for k, v in state.exp_avg.items():
        tensors[f"optim.exp_avg.{k}"] = v
    for k, v in state.exp_avg_sq.items():
        tensors[f"optim.exp_avg_sq.{k}"] = v
    echo = yaml.safe_dump({"step": state.step, "config": config.to_dict()}, sort_keys=False)
    save_checkpoint(path, tensors, echo)


def load_training_state(path, seq=None, config: TrainConfig | None = None):
    """Rebuild ``(model, state, config)`` from a checkpoint; ``config`` overrides the stored one."""
    tensors, echo = load_checkpoint(path)
    meta = yaml.safe_load(echo) or {}
    config = config or TrainConfig.from_dict(meta.get("config"))
    if seq is not None:
        model = model_for_sequence(seq, config)
    else:
        dims = tuple(int(n) for n in tensors["features"].shape[:3])
        model = Model(dims, tensors["grid.origin"], tensors["grid.voxel_size"], config)
    try:
        model.load_tensors(tensors)
    except (KeyError, RuntimeError) as exc:
        raise InvalidInput(f"{path}: checkpoint does not match the model ({exc})") from None
    state = OptimState(step=int(meta.get("step", 0)))
    for key, prefix in (("exp_avg", "optim.exp_avg."), ("exp_avg_sq", "optim.exp_avg_sq.")):
        getattr(state, key).update({k[len(prefix):]: torch.as_tensor(v) for k, v in tensors.items()
                                    if k.startswith(prefix)})
    return model, state, config


# --- config handling ----------------------------------------------------------

def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(data: dict, pairs) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into nested mappings."""
    data = dict(data)
    for pair in pairs or []:
        if "=" not in pair:
            raise InvalidInput(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InvalidInput(f"--set {key}: {p} is not a mapping")
        node[parts[-1]] = _parse_value(value)
    return data


def load_train_config(path, overrides=(), seed=None, steps=None) -> tuple[TrainConfig, int]:
    """Read a YAML config (fields at top level or under ``train:``) and apply flag overrides."""
    data = load_yaml(path) if path else {}
    if not isinstance(data, dict):
        raise InvalidInput(f"{path}: config must be a mapping")
    if "train" in data:
        extra = set(data) - {"train", "steps"}
        if extra:
            raise InvalidInput(f"{path}: unknown top-level key(s) {sorted(extra)}")
        cfg, n = dict(data["train"] or {}), data.get("steps")
    else:
        cfg, n = dict(data), None
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    config = TrainConfig.from_dict(cfg)
    n = steps if steps is not None else n
    n = config.total_steps if n is None else int(n)
    if n < 1:
        raise InvalidInput(f"steps must be >= 1, got {n}")
    return config, n


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise InvalidInput(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        spec = PRESETS[args.preset]()
    elif args.spec:
        if not Path(args.spec).exists():
            raise InvalidInput(f"spec file not found: {args.spec}")
        spec = scene_spec_from_dict(apply_overrides(load_yaml(args.spec), args.set))
    else:
        spec = scene_spec_from_dict(apply_overrides({}, args.set)) if args.set else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    seq = generate_scene(spec)
    manifest = write_sequence(seq, args.out, spec)
    print(f"wrote {seq.num_frames} frames x {seq.num_cameras} cameras to {manifest.parent}")
    return EXIT_OK


def _require_data(path) -> None:
    if not (Path(path) / "manifest.yaml").exists():
        raise InvalidInput(f"no manifest.yaml in {path}")


def _preview(model: Model, seq, frame: int, config: TrainConfig, path: Path) -> None:
    with torch.no_grad():
        views = render_views(model.grid(), model.decoder, [seq.cameras[frame][c] for c in seq.train_cameras()],
                             config.render_options())
    strip = np.concatenate([v.color.numpy() for v in views], axis=1)
    write_png(path, np.clip(strip, 0.0, 1.0))


def cmd_fit(args) -> int:
    _require_data(args.data)
    if args.resume and not Path(args.resume).exists():
        raise InvalidInput(f"checkpoint not found: {args.resume}")
    if args.config and not Path(args.config).exists():
        raise InvalidInput(f"config file not found: {args.config}")
    if args.resume and not args.config:
        _, echo = load_checkpoint(args.resume)
        base = (yaml.safe_load(echo) or {}).get("config", {})
        config = TrainConfig.from_dict(apply_overrides(base, args.set))
        if args.seed is not None:
            config.seed = args.seed
        steps = args.steps or config.total_steps
    else:
        config, steps = load_train_config(args.config, args.set, args.seed, args.steps)
    if args.preview_every is not None:
        config.preview_every = args.preview_every
    if args.checkpoint_every is not None:
        config.checkpoint_every = args.checkpoint_every
    seq = read_sequence(args.data)
    frame = validate_dataset(seq, config)

    out = Path(args.out)
    (out / "previews").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
    model = state = None
    if args.resume:
        model, state, _ = load_training_state(args.resume, seq, config)

    metrics_path = out / "metrics.csv"
    append = bool(args.resume) and metrics_path.exists()

    def on_step(step, m, losses):
        if config.preview_every and step % config.preview_every == 0:
            _preview(m, seq, frame, config, out / "previews" / f"step_{step:06d}.png")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_training_state(out / "checkpoints" / f"step_{step:06d}.vpad", m, res_state[0], config)
        if step % max(1, args.log_every) == 0:
            log.info("step %d L=%.6f L_img=%.6f L_vel=%.6f L_pc=%.6f", step, losses.total.item(),
                     losses.img.item(), losses.vel.item(), losses.pc.item())

    res_state = [state or OptimState()]
    res = train(config, seq, model=model, state=res_state[0], steps=steps, on_step=on_step)
    write_metrics(metrics_path, res.metrics, append=append)
    save_training_state(out / "final.vpad", res.model, res.state, config)
    last = res.metrics[-1]
    print(f"step {last[0]}: L={last[1]:.6f} L_img={last[2]:.6f} L_vel={last[3]:.6f} L_pc={last[4]:.6f}")
    print(f"checkpoint: {out / 'final.vpad'}")
    return EXIT_OK


def cmd_render(args) -> int:
    _require_data(args.data)
    if not Path(args.ckpt).exists():
        raise InvalidInput(f"checkpoint not found: {args.ckpt}")
    seq = read_sequence(args.data)
    if not 0 <= args.frame < seq.num_frames:
        raise InvalidInput(f"frame {args.frame} out of range [0, {seq.num_frames})")
    model, _, config = load_training_state(args.ckpt, seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        views = render_views(model.grid(), model.decoder, seq.cameras[args.frame], config.render_options())
    for c, v in enumerate(views):
        stem = f"f{args.frame:03d}_c{c}"
        write_png(out / f"{stem}_color.png", np.clip(v.color.numpy(), 0.0, 1.0))
        write_pfm(out / f"{stem}_depth.pfm", v.depth_norm.numpy())
        write_pfm(out / f"{stem}_alpha.pfm", v.alpha.numpy())
    print(f"wrote {3 * len(views)} files to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise InvalidInput(f"--seeds must be >= 1, got {args.seeds}")
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.corrupt_adjoint:
        with corrupted_adjoint(1.1):
            report = gc.run(seeds, ops=["rasterize"], include_end_to_end=not args.quick)
    else:
        report = gc.run(seeds, include_end_to_end=not args.quick)
    print(report.table())
    if report.failures:
        print(f"FAILED: {', '.join(report.failures)}")
        return EXIT_RUNTIME
    if not report.control_detected:
        print("FAILED: corrupted-adjoint control was not detected")
        return EXIT_RUNTIME
    print("all gradients match finite differences")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_data(args.data)
    if not Path(args.ckpt).exists():
        raise InvalidInput(f"checkpoint not found: {args.ckpt}")
    seq = read_sequence(args.data)
    model, _, config = load_training_state(args.ckpt, seq)
    text = evaluate(model, seq, config).to_text()
    out = Path(args.out)
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "report.txt"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxsplat", description="Voxel-anchored Gaussian splatting pre-training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 keeps runs bitwise repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene sequence")
    s.add_argument("--spec", help="YAML scene spec")
    s.add_argument("--preset", help=f"named scene instead of a spec file: {', '.join(sorted(PRESETS))}")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a spec field (dotted keys)")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="pre-train on a sequence")
    f.add_argument("--data", required=True)
    f.add_argument("--config", help="YAML training config")
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--resume", help="checkpoint to continue from")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    f.add_argument("--preview-every", type=int)
    f.add_argument("--checkpoint-every", type=int)
    f.add_argument("--log-every", type=int, default=10)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render color, depth and alpha from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    g.add_argument("--seed", type=int, default=0, help="first seed")
    g.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    g.add_argument("--quick", action="store_true", help="skip the end-to-end loss graph")
    g.add_argument("--corrupt-adjoint", action="store_true", help="debug: scale the rasterizer opacity adjoint by 1.1")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="PSNR, depth MAE and velocity error against ground truth")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report file, or a directory for report.txt")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (InvalidInput, ValueError, FileNotFoundError, FormatError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
