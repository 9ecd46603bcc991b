"""Synthetic multi-view dynamic scenes with analytic depth and velocity.

A checkered ground square plus moving spheres and axis-aligned boxes,
ray traced from a camera rig that may itself translate (ego motion). Misses
render black, which is also the splatting background.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, Intrinsics, Pose

LIGHT_DIR = np.array([0.4, 0.3, 0.866])


@dataclass
class GroundSpec:
    cell_size: float = 2.0
    color_a: tuple = (0.85, 0.8, 0.7)
    color_b: tuple = (0.25, 0.35, 0.45)
    half_extent: float = 8.0
    softness: float = 0.0  # 0 gives hard checker edges; larger values blend across cell borders


@dataclass
class ObjectSpec:
    kind: str  # "sphere" | "box"
    center: tuple
    size: object  # radius for spheres, half-extents (3,) for boxes
    albedo: tuple = (0.9, 0.2, 0.2)
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"object kind must be 'sphere' or 'box', got {self.kind!r}")
        size = np.asarray(self.size, dtype=np.float64)
        if self.kind == "sphere" and size.size != 1 or self.kind == "box" and size.size != 3:
            raise ValueError(f"{self.kind} size has wrong length: {self.size}")
        if (size <= 0).any():
            raise ValueError("object size must be positive")


@dataclass
class RigSpec:
    """Cameras on a ring around the ego origin, looking outward (or inward)."""

    count: int = 4
    radius: float = 0.5
    height: float = 2.5
    pitch_deg: float = 30.0
    yaws_deg: list | None = None
    forward: list | None = None  # per-camera shift along the viewing direction, meters
    inward: bool = False
    width: int = 128
    height_px: int = 128
    fov_deg: float = 90.0
    ego_velocity: tuple = (0.0, 0.0, 0.0)
    holdout: list = field(default_factory=list)

    def yaws(self) -> list[float]:
        if self.yaws_deg is not None:
            return [float(y) for y in self.yaws_deg]
        return [360.0 * i / self.count for i in range(self.count)]

    def forwards(self) -> list[float]:
        if self.forward is None:
            return [0.0] * len(self.yaws())
        if len(self.forward) != len(self.yaws()):
            raise ValueError(f"rig.forward has {len(self.forward)} entries for {len(self.yaws())} cameras")
        return [float(f) for f in self.forward]


@dataclass
class GridSpec:
    origin: tuple = (-8.0, -8.0, -0.5)
    voxel_size: tuple = (0.5, 0.5, 0.75)
    dims: tuple = (32, 32, 4)


@dataclass
class SceneSpec:
    ground: GroundSpec = field(default_factory=GroundSpec)
    objects: list = field(default_factory=list)
    rig: RigSpec = field(default_factory=RigSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    frames: int = 5
    dt: float = 0.5
    seed: int = 0
    noise_std: float = 0.0

    def validate(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if len(self.rig.yaws()) < 1:
            raise ValueError("rig needs at least one camera")
        self.rig.forwards()
        lo = np.asarray(self.grid.origin)
        hi = lo + np.asarray(self.grid.dims) * np.asarray(self.grid.voxel_size)
        for i, obj in enumerate(self.objects):
            c = np.asarray(obj.center)
            if (c < lo).any() or (c > hi).any():
                raise ValueError(f"objects[{i}] center {obj.center} lies outside the world extent")
        for i in self.rig.holdout:
            if not 0 <= i < len(self.rig.yaws()):
                raise ValueError(f"rig.holdout index {i} out of range")


@dataclass
class SceneSequence:
    timestamps: np.ndarray  # (F,)
    cameras: list  # [frame][cam] -> Camera
    images: list  # [frame][cam] -> (H, W, 3) float
    depths: list  # [frame][cam] -> (H, W), 0 where nothing is hit
    velocities: list  # [frame] -> (X, Y, Z, 3) ground-truth voxel velocities
    grid: GridSpec
    holdout: list = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.timestamps)

    @property
    def num_cameras(self) -> int:
        return len(self.cameras[0])

    def train_cameras(self) -> list[int]:
        return [c for c in range(self.num_cameras) if c not in self.holdout]


def rig_cameras(rig: RigSpec, time: float) -> list[Camera]:
    k = Intrinsics.from_fov(rig.width, rig.height_px, rig.fov_deg)
    ego = np.asarray(rig.ego_velocity, dtype=np.float64) * time
    cams = []
    for yaw, fwd in zip(np.radians(rig.yaws()), rig.forwards()):
        heading = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        look = -heading if rig.inward else heading
        center = ego + rig.radius * heading + np.array([0.0, 0.0, rig.height])
        pitch = np.radians(rig.pitch_deg)
        center = center + fwd * (look * np.cos(pitch) - np.array([0.0, 0.0, np.sin(pitch)]))
        target = center + look * np.cos(pitch) - np.array([0.0, 0.0, np.sin(pitch)])
        cams.append(Camera(k, Pose.look_at(center, target)))
    return cams


def _checker(g: GroundSpec, p: np.ndarray) -> np.ndarray:
    """Ground albedo at points (N, 3); soft edges blend the two colors smoothly."""
    if g.softness <= 0:
        parity = (np.floor(p[:, 0] / g.cell_size) + np.floor(p[:, 1] / g.cell_size)).astype(np.int64) % 2
        return np.where(parity[:, None] == 0, g.color_a, g.color_b)
    q = np.sin(np.pi * p[:, 0] / g.cell_size) * np.sin(np.pi * p[:, 1] / g.cell_size)
    w = np.clip(0.5 + 0.5 * q / g.softness, 0.0, 1.0)[:, None]
    return w * np.asarray(g.color_a) + (1 - w) * np.asarray(g.color_b)


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    t = np.full(d.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t_hit = np.where(t0 > 1e-9, t0, t1)
    ok &= t_hit > 1e-9
    t[ok] = t_hit[ok]
    normal = (o + np.where(ok, t, 0.0)[:, None] * d - center) / radius
    return t, normal


def _hit_box(o, d, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_a = (center - half - o) * inv
        t_b = (center + half - o) * inv
    t_near = np.nanmax(np.minimum(t_a, t_b), axis=1)
    t_far = np.nanmin(np.maximum(t_a, t_b), axis=1)
    ok = (t_near <= t_far) & (t_far > 1e-9)
    t_hit = np.where(t_near > 1e-9, t_near, t_far)
    t = np.where(ok, t_hit, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    rel = (p - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    normal = np.zeros_like(p)
    normal[np.arange(len(p)), axis] = np.sign(rel[np.arange(len(p)), axis])
    return t, normal


def _object_center(obj: ObjectSpec, time: float) -> np.ndarray:
    return np.asarray(obj.center, dtype=np.float64) + np.asarray(obj.velocity, dtype=np.float64) * time


def raytrace(spec: SceneSpec, camera: Camera, time: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat-shaded image and camera-z depth (0 where the ray escapes)."""
    k = camera.intrinsics
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], -1).reshape(-1, 3)
    r_c2w, origin = camera.pose.cam_to_world()
    d_world = d_cam @ r_c2w.T  # unit camera-z per step, so t is the depth
    norms = np.linalg.norm(d_world, axis=1)
    d_unit = d_world / norms[:, None]

    best_t = np.full(len(d_unit), np.inf)
    albedo = np.zeros((len(d_unit), 3))
    normal = np.zeros((len(d_unit), 3))

    g = spec.ground
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = -origin[2] / d_unit[:, 2]
    p = origin + np.where(np.isfinite(t_plane), t_plane, 0)[:, None] * d_unit
    on = (t_plane > 1e-9) & (np.abs(p[:, 0]) <= g.half_extent) & (np.abs(p[:, 1]) <= g.half_extent)
    best_t[on] = t_plane[on]
    albedo[on] = _checker(g, p[on])
    normal[on] = (0.0, 0.0, 1.0)

    for obj in spec.objects:
        c = _object_center(obj, time)
        if obj.kind == "sphere":
            t, n = _hit_sphere(origin, d_unit, c, float(np.asarray(obj.size).reshape(())))
        else:
            t, n = _hit_box(origin, d_unit, c, np.asarray(obj.size, dtype=np.float64))
        closer = t < best_t
        best_t[closer] = t[closer]
        albedo[closer] = obj.albedo
        normal[closer] = n[closer]

    hit = np.isfinite(best_t)
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    shade = 0.2 + 0.8 * np.maximum(0.0, normal @ light)
    img = np.where(hit[:, None], albedo * shade[:, None], 0.0)
    depth = np.where(hit, best_t / np.where(hit, norms, 1.0), 0.0)
    return img.reshape(k.height, k.width, 3), depth.reshape(k.height, k.width)


def _inside(obj: ObjectSpec, time: float, pts: np.ndarray) -> np.ndarray:
    c = _object_center(obj, time)
    if obj.kind == "sphere":
        return np.linalg.norm(pts - c, axis=-1) <= float(np.asarray(obj.size).reshape(()))
    return (np.abs(pts - c) <= np.asarray(obj.size)).all(-1)


def grid_centers(grid: GridSpec) -> np.ndarray:
    idx = np.stack(np.meshgrid(*(np.arange(n) for n in grid.dims), indexing="ij"), -1)
    return np.asarray(grid.origin) + (idx + 0.5) * np.asarray(grid.voxel_size)


def velocity_field(spec: SceneSpec, time: float) -> np.ndarray:
    pts = grid_centers(spec.grid)
    vel = np.zeros(pts.shape)
    for obj in spec.objects:
        vel[_inside(obj, time, pts)] = obj.velocity
    return vel


def object_voxel_mask(spec: SceneSpec, time: float) -> np.ndarray:
    pts = grid_centers(spec.grid)
    mask = np.zeros(pts.shape[:3], dtype=bool)
    for obj in spec.objects:
        mask |= _inside(obj, time, pts)
    return mask


def generate_scene(spec: SceneSpec) -> SceneSequence:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    times = np.arange(spec.frames) * spec.dt
    cameras, images, depths, vels = [], [], [], []
    for time in times:
        cams = rig_cameras(spec.rig, time)
        cameras.append(cams)
        frame_imgs, frame_depths = [], []
        for cam in cams:
            img, depth = raytrace(spec, cam, time)
            if spec.noise_std > 0:
                img = np.clip(img + rng.normal(0, spec.noise_std, img.shape), 0, 1)
            frame_imgs.append(img)
            frame_depths.append(depth)
        images.append(frame_imgs)
        depths.append(frame_depths)
        vels.append(velocity_field(spec, time))
    return SceneSequence(times, cameras, images, depths, vels, spec.grid, list(spec.rig.holdout))


# --- preset scenes ------------------------------------------------------------


def desk_scene(frames: int = 5) -> SceneSpec:
    """Static three-object desk seen by four inward cameras plus a held-out fifth.

    The rig translates at constant ego velocity so temporal neighbors see the
    scene from shifted viewpoints, which is what photometric consistency uses.
    """
    return SceneSpec(
        objects=[
            ObjectSpec("box", (4.0, 1.0, 0.75), (0.75, 0.75, 0.75), (0.2, 0.7, 0.3)),
            ObjectSpec("sphere", (-2.0, 4.0, 1.0), 1.0, (0.9, 0.2, 0.2)),
            ObjectSpec("box", (-3.0, -4.0, 0.5), (1.0, 0.5, 0.5), (0.3, 0.3, 0.9)),
        ],
        rig=RigSpec(yaws_deg=[0.0, 90.0, 180.0, 270.0, 45.0], holdout=[4], ego_velocity=(1.0, 0.5, 0.0),
                    inward=True, radius=11.0, height=5.0, pitch_deg=35.0, fov_deg=60.0),
        frames=frames,
    )


def moving_box_scene(velocity=(1.0, 0.0, 0.0), frames: int = 3) -> SceneSpec:
    """One box moving over a plain ground, eight inward cameras, two 1 m voxel layers.

    The flat grid keeps the reconstructed box inside its own voxels, so a
    velocity field can be scored directly against the planted motion.
    """
    return SceneSpec(
        ground=GroundSpec(color_a=(0.6, 0.6, 0.6), color_b=(0.6, 0.6, 0.6)),
        objects=[ObjectSpec("box", (0.25, 0.25, 0.75), (1.0, 0.75, 0.75), (0.2, 0.7, 0.3), velocity=velocity)],
        rig=RigSpec(yaws_deg=[45.0 * i for i in range(8)], inward=True, radius=11.0, height=5.0, pitch_deg=35.0,
                    fov_deg=60.0, width=64, height_px=64),
        grid=GridSpec(origin=(-8.0, -8.0, -0.5), voxel_size=(0.5, 0.5, 1.0), dims=(32, 32, 2)),
        frames=frames,
    )


def textured_ground_scene(frames: int = 3) -> SceneSpec:
    """Static smooth-checker ground under a forward-moving rig; views stay on the texture."""
    return SceneSpec(
        ground=GroundSpec(softness=1.0, half_extent=60.0, cell_size=2.0),
        rig=RigSpec(radius=0.5, height=4.0, pitch_deg=50.0, fov_deg=60.0, width=64, height_px=64,
                    ego_velocity=(1.0, 0.5, 0.0)),
        grid=GridSpec(origin=(-60.0, -60.0, -0.5), voxel_size=(4.0, 4.0, 1.0), dims=(30, 30, 3)),
        frames=frames,
    )


PRESETS = {"desk": desk_scene, "moving_box": moving_box_scene, "textured_ground": textured_ground_scene}
