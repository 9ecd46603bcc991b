"""File formats: PNG images, PFM float maps, binary checkpoints, YAML configs and manifests."""
from __future__ import annotations

import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .geometry import Camera, Intrinsics, Pose
from .scenes import GridSpec, GroundSpec, ObjectSpec, RigSpec, SceneSequence, SceneSpec

CKPT_MAGIC = b"VPAD"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    pass


def write_png(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, data) -> None:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"write_pfm expects a 2-D map, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ValueError("write_pfm: map contains NaN")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().rstrip() != b"Pf":
            raise FormatError(f"{path}: not a single-channel PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    if data.size != w * h:
        raise FormatError(f"{path}: truncated payload")
    return data.reshape(h, w)[::-1].astype(np.float32)


def save_checkpoint(path, tensors: dict, config_text: str = "") -> None:
    """Write named tensors plus a UTF-8 config echo in the VPAD layout."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"checkpoint tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    text = config_text.encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict, str]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(buf):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
        (n,) = struct.unpack_from("<I", buf, pos)
        text = buf[pos + 4:pos + 4 + n].decode("utf-8")
    except (struct.error, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return tensors, text


def psnr(a, b, cap: float = 99.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


# --- scene specs -----------------------------------------------------------

def _build(cls, data: dict, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping")
    fields = cls.__dataclass_fields__
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{where}: unknown field(s) {sorted(unknown)}")
    return cls(**data)


def scene_spec_from_dict(data: dict) -> SceneSpec:
    data = dict(data or {})
    try:
        spec = SceneSpec(
            ground=_build(GroundSpec, data.pop("ground", None), "ground"),
            objects=[_build(ObjectSpec, o, f"objects[{i}]") for i, o in enumerate(data.pop("objects", []) or [])],
            rig=_build(RigSpec, data.pop("rig", None), "rig"),
            grid=_build(GridSpec, data.pop("grid", None), "grid"),
            **data,
        )
    except TypeError as exc:
        raise ValueError(f"scene spec: {exc}") from None
    spec.validate()
    return spec


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    return yaml.safe_load(yaml.safe_dump(_plain(asdict(spec))))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def load_yaml(path) -> dict:
    with open(path) as f:
        data = yaml.safe_load(f)
    return data or {}


# --- scene sequences on disk ---------------------------------------------

def write_sequence(seq: SceneSequence, out_dir, spec: SceneSpec | None = None) -> Path:
    """Write PNG images, PFM depths, npy velocities and ``manifest.yaml``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "velocity").mkdir(exist_ok=True)
    frames = []
    for f in range(seq.num_frames):
        cams = []
        for c, cam in enumerate(seq.cameras[f]):
            img_name = f"images/f{f:03d}_c{c}.png"
            depth_name = f"depth/f{f:03d}_c{c}.pfm"
            write_png(out / img_name, seq.images[f][c])
            write_pfm(out / depth_name, seq.depths[f][c])
            r_c2w, center = cam.pose.cam_to_world()
            k = cam.intrinsics
            cams.append({
                "image": img_name,
                "depth": depth_name,
                "intrinsics": {"fx": float(k.fx), "fy": float(k.fy), "cx": float(k.cx), "cy": float(k.cy),
                               "width": int(k.width), "height": int(k.height)},
                "cam_to_world": {"rotation": r_c2w.tolist(), "center": center.tolist()},
            })
        vel_name = f"velocity/f{f:03d}.npy"
        np.save(out / vel_name, seq.velocities[f])
        frames.append({"index": f, "timestamp": float(seq.timestamps[f]), "velocity": vel_name, "cameras": cams})
    manifest = {
        "format": "voxsplat-scene/1",
        "grid": _plain(asdict(seq.grid)),
        "holdout": list(seq.holdout),
        "frames": frames,
    }
    if spec is not None:
        manifest["spec"] = scene_spec_to_dict(spec)
    with open(out / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return out / "manifest.yaml"


def read_sequence(data_dir) -> SceneSequence:
    root = Path(data_dir)
    path = root / "manifest.yaml"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.yaml in {root}")
    manifest = load_yaml(path)
    times, cameras, images, depths, vels = [], [], [], [], []
    for fr in manifest["frames"]:
        times.append(fr["timestamp"])
        cams, imgs, ds = [], [], []
        for c in fr["cameras"]:
            k = Intrinsics(**c["intrinsics"])
            pose = Pose.from_cam_to_world(c["cam_to_world"]["rotation"], c["cam_to_world"]["center"])
            cams.append(Camera(k, pose))
            imgs.append(read_png(root / c["image"]))
            ds.append(read_pfm(root / c["depth"]).astype(np.float64))
        cameras.append(cams)
        images.append(imgs)
        depths.append(ds)
        vels.append(np.load(root / fr["velocity"]))
    times = np.asarray(times, dtype=np.float64)
    if (np.diff(times) <= 0).any():
        raise FormatError(f"{path}: timestamps must be strictly increasing")
    grid = GridSpec(**{k: tuple(v) for k, v in manifest["grid"].items()})
    return SceneSequence(times, cameras, images, depths, vels, grid, list(manifest.get("holdout", [])))
