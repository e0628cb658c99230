"""Synthetic scene oracle and RGB-D + semantic dataset I/O.

The synthetic scene is an axis-aligned room with labelled box and sphere
primitives, ray cast analytically. Depth is z-depth in the camera frame, the
same convention the renderer uses.

Synthetic-dump layout (the canonical on-disk format)::

    rgb/000000.png        8-bit RGB
    depth/000000.png      16-bit, millimetres (0 = hole)
    semantic/000000.png   16-bit class ids
    traj_gt.txt           TUM lines "timestamp tx ty tz qx qy qz qw"
    intrinsics.txt        "fx fy cx cy width height"

Row ``i`` of ``traj_gt.txt`` belongs to frame file ``i``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose

__all__ = [
    "Primitive",
    "Room",
    "SyntheticScene",
    "Frame",
    "Dataset",
    "DatasetError",
    "raycast_scene",
    "orbit_trajectory",
    "look_at",
    "default_scene",
    "default_intrinsics",
    "write_frame_dump",
    "write_dump",
    "load_dataset",
    "read_tum",
    "write_tum",
    "DEPTH_SCALES",
    "scene_to_dict",
    "scene_from_dict",
]

log = logging.getLogger(__name__)

DEPTH_SCALES = {"synthetic-dump": 1000.0, "scannet-like": 1000.0, "replica-like": 6553.5}


class DatasetError(ValueError):
    pass


@dataclass
class Primitive:
    shape: str  # "box" or "sphere"
    center: tuple
    size: tuple  # box: full edge lengths; sphere: (radius,)
    class_id: int
    albedo: tuple
    yaw: float = 0.0  # box rotation about world z, radians

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if min(self.size) <= 0:
            raise ValueError("primitive extents must be positive")

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Room:
    lo: tuple = (-1.5, -1.5, 0.0)
    hi: tuple = (1.5, 1.5, 3.0)
    wall_class: int = 0
    floor_class: int = 1
    ceiling_class: int = 2
    wall_albedo: tuple = (0.75, 0.7, 0.6)
    floor_albedo: tuple = (0.45, 0.35, 0.25)
    ceiling_albedo: tuple = (0.9, 0.9, 0.9)


@dataclass
class SyntheticScene:
    primitives: list
    room: Room = field(default_factory=Room)
    light_dir: tuple = (0.3, 0.5, 1.0)  # towards the light
    ambient: float = 0.35

    def class_ids(self) -> list:
        r = self.room
        return sorted({r.wall_class, r.floor_class, r.ceiling_class, *(p.class_id for p in self.primitives)})

    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.room.hi, self.room.lo)))

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p > self.room.lo) and np.all(p < self.room.hi))


def default_scene() -> SyntheticScene:
    """3 m room (walls 0, floor 1, ceiling 2) with a box (3) and a sphere (4)."""
    return SyntheticScene(
        primitives=[
            Primitive("box", (0.35, -0.3, 0.2), (0.4, 0.4, 0.4), 3, (0.2, 0.45, 0.8), yaw=math.radians(20)),
            Primitive("sphere", (-0.3, 0.3, 0.25), (0.25,), 4, (0.85, 0.25, 0.2)),
        ]
    )


def scene_to_dict(scene: SyntheticScene) -> dict:
    return asdict(scene)


def scene_from_dict(d: dict) -> SyntheticScene:
    prims = [Primitive(p["shape"], tuple(p["center"]), tuple(p["size"]), int(p["class_id"]), tuple(p["albedo"]),
                       float(p.get("yaw", 0.0))) for p in d["primitives"]]
    room = Room(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("room", {}).items()})
    return SyntheticScene(prims, room, tuple(d.get("light_dir", (0.3, 0.5, 1.0))), float(d.get("ambient", 0.35)))


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)


@dataclass
class Frame:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) metres, 0 = hole
    semantic: np.ndarray  # (H, W) int class ids
    timestamp: float = 0.0
    gt_pose: Pose | None = None
    index: int = 0
    est_pose: Pose | None = None
    is_keyframe: bool = False

    def validate(self, known_classes=None) -> None:
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3) or self.semantic.shape != (h, w):
            raise DatasetError(f"frame {self.index}: inconsistent image shapes")
        if not np.all(np.isfinite(self.depth)) or (self.depth < 0).any():
            raise DatasetError(f"frame {self.index}: depth must be finite and >= 0")
        if known_classes is not None:
            unknown = set(np.unique(self.semantic).tolist()) - set(known_classes)
            if unknown:
                raise DatasetError(f"frame {self.index}: unregistered class ids {sorted(unknown)}")


@dataclass
class Dataset:
    frames: list
    K: Intrinsics
    gt_trajectory: list | None  # list of (timestamp, Pose)


# -- ray casting ---------------------------------------------------------------


def _room_hit(o, d, room: Room):
    lo, hi = np.asarray(room.lo), np.asarray(room.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_exit = np.maximum((lo - o) / d, (hi - o) / d)
    t_exit = np.where(np.isfinite(t_exit), t_exit, np.inf)
    axis = np.argmin(t_exit, axis=1)
    t = t_exit[np.arange(len(d)), axis]
    positive = d[np.arange(len(d)), axis] > 0
    normal = np.zeros_like(d)
    normal[np.arange(len(d)), axis] = np.where(positive, -1.0, 1.0)
    cls = np.full(len(d), room.wall_class)
    alb = np.tile(np.asarray(room.wall_albedo, dtype=float), (len(d), 1))
    floor = (axis == 2) & ~positive
    ceil = (axis == 2) & positive
    cls[floor], alb[floor] = room.floor_class, room.floor_albedo
    cls[ceil], alb[ceil] = room.ceiling_class, room.ceiling_albedo
    return t, normal, cls, alb


def _sphere_hit(o, d, prim: Primitive):
    c = np.asarray(prim.center, dtype=float)
    r = prim.size[0]
    oc = o - c
    a = (d * d).sum(1)
    b = 2 * (d * oc).sum(1)
    cc = (oc * oc).sum(1) - r * r
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.clip(disc, 0, None))
    t = (-b - sq) / (2 * a)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    p = o + t[:, None] * d
    with np.errstate(invalid="ignore"):
        n = (p - c) / r
    return t, n


def _box_hit(o, d, prim: Primitive):
    R = prim.rotation()
    c = np.asarray(prim.center, dtype=float)
    half = np.asarray(prim.size, dtype=float) / 2
    ol = (o - c) @ R
    dl = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ol) / dl
        t2 = (half - ol) / dl
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=1)
    t_near = tmin[np.arange(len(d)), axis]
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    t = np.where(hit, t_near, np.inf)
    nl = np.zeros_like(d)
    nl[np.arange(len(d)), axis] = -np.sign(dl[np.arange(len(d)), axis])
    return t, nl @ R.T


def raycast_scene(scene: SyntheticScene, pose: Pose, K: Intrinsics, depth_noise: float = 0.0,
                  rng: np.random.Generator | None = None) -> Frame:
    """Render depth (z-depth), class ids and Lambertian-shaded colour for every pixel."""
    T = pose.numpy()
    Rc, o = T[:3, :3], T[:3, 3]
    if not scene.contains(o):
        raise ValueError("camera must be inside the room")
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(float)
    dc = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1).reshape(-1, 3)
    d = dc @ Rc.T
    O = np.broadcast_to(o, d.shape)
    t, normal, cls, alb = _room_hit(O, d, scene.room)
    for prim in scene.primitives:
        tp, n = (_sphere_hit if prim.shape == "sphere" else _box_hit)(O, d, prim)
        closer = tp < t
        t = np.where(closer, tp, t)
        normal[closer] = n[closer]
        cls[closer] = prim.class_id
        alb[closer] = prim.albedo
    light = np.asarray(scene.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    shade = scene.ambient + (1 - scene.ambient) * np.clip(normal @ light, 0, None)
    rgb = np.clip(alb * shade[:, None], 0, 1)
    depth = t.copy()
    if depth_noise > 0:
        rng = rng or np.random.default_rng(0)
        depth = depth + rng.normal(0, depth_noise, depth.shape)
    H, W = K.height, K.width
    return Frame(rgb.reshape(H, W, 3), depth.reshape(H, W), cls.reshape(H, W).astype(np.int64), gt_pose=pose)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose (x right, y down, z forward) looking at ``target``."""
    eye, target, up = (np.asarray(a, dtype=float) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z], 1)
    T[:3, 3] = eye
    return Pose.from_matrix(T)


def orbit_trajectory(center, radius: float, n_frames: int, height: float = 0.0, arc: float = 2 * math.pi,
                     start_angle: float = 0.0, target=None) -> list:
    """Poses on a horizontal circle around ``center`` with a constant angular step.

    Cameras sit ``height`` above ``center`` and look at ``target`` (default
    ``center``). ``arc`` is the angle swept by ``n_frames`` steps.
    """
    center = np.asarray(center, dtype=float)
    target = center if target is None else np.asarray(target, dtype=float)
    step = arc / n_frames
    poses = []
    for i in range(n_frames):
        a = start_angle + i * step
        eye = center + np.array([radius * math.cos(a), radius * math.sin(a), height])
        poses.append(look_at(eye, target))
    return poses


TOY_ORBIT = dict(center=(0.0, 0.0, 0.3), radius=1.2, height=0.9, arc=math.radians(40.0))


def toy_orbit(n_frames: int = 20) -> list:
    """The default camera path through the synthetic room."""
    return orbit_trajectory(n_frames=n_frames, **TOY_ORBIT)


# -- TUM trajectories ----------------------------------------------------------


def write_tum(path, timestamps, poses) -> None:
    lines = []
    for ts, p in zip(timestamps, poses):
        q = p.quat.detach().cpu().numpy()
        t = p.trans.detach().cpu().numpy()
        vals = [ts, *t, *q]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _text_rows(path: Path, width: int):
    data = path.read_bytes()
    offset = 0
    rows = []
    for line in data.split(b"\n"):
        s = line.strip()
        if s and not s.startswith(b"#"):
            try:
                vals = [float(x) for x in s.split()]
            except ValueError:
                raise DatasetError(f"{path}: malformed number at byte {offset}") from None
            if len(vals) != width:
                raise DatasetError(f"{path}: expected {width} values at byte {offset}, got {len(vals)}")
            rows.append(vals)
        offset += len(line) + 1
    return rows


def read_tum(path) -> list:
    """List of (timestamp, Pose)."""
    return [(r[0], Pose.from_quat_trans(r[4:8], r[1:4])) for r in _text_rows(Path(path), 8)]


# -- dump / load ---------------------------------------------------------------


def write_frame_dump(frame: Frame, root, index: int | None = None) -> None:
    root = Path(root)
    i = frame.index if index is None else index
    for sub in ("rgb", "depth", "semantic"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rgb8 = np.clip(np.round(frame.rgb * 255), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8).save(root / "rgb" / f"{i:06d}.png")
    depth_mm = np.clip(np.round(frame.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(depth_mm).save(root / "depth" / f"{i:06d}.png")
    Image.fromarray(frame.semantic.astype(np.uint16)).save(root / "semantic" / f"{i:06d}.png")


def write_dump(frames, K: Intrinsics, root, scene: SyntheticScene | None = None) -> None:
    """Write the synthetic-dump layout; ``scene`` adds ``scene.json`` for mesh evaluation."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_frame_dump(f, root, i)
    (root / "intrinsics.txt").write_text(" ".join(f"{v:.9g}" for v in K.as_tuple()) + "\n")
    if all(f.gt_pose is not None for f in frames):
        write_tum(root / "traj_gt.txt", [f.timestamp for f in frames], [f.gt_pose for f in frames])
    if scene is not None:
        (root / "scene.json").write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises several types for corrupt files
        raise DatasetError(f"{path}: malformed image at byte 0 ({exc})") from None


def _read_intrinsics(path: Path, shape=None) -> Intrinsics:
    if not path.exists():
        raise DatasetError(f"missing intrinsics file {path}")
    data = path.read_text().split()
    try:
        vals = [float(x) for x in data]
    except ValueError:
        raise DatasetError(f"{path}: malformed number at byte 0") from None
    if len(vals) == 6:
        return Intrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
    if len(vals) == 16 and shape is not None:  # 4x4 matrix, ScanNet style
        m = np.asarray(vals).reshape(4, 4)
        return Intrinsics(m[0, 0], m[1, 1], m[0, 2], m[1, 2], shape[1], shape[0])
    raise DatasetError(f"{path}: expected 'fx fy cx cy width height' at byte 0")


def _load_frame(rgb_path, depth_path, sem_path, scale, index, ts, pose) -> Frame:
    rgb = _read_png(rgb_path)[..., :3].astype(np.float64) / 255.0
    depth = _read_png(depth_path).astype(np.float64) / scale
    if sem_path is not None and sem_path.exists():
        sem = _read_png(sem_path).astype(np.int64)
    else:
        sem = np.zeros(depth.shape, dtype=np.int64)
    f = Frame(rgb, depth, sem, timestamp=ts, gt_pose=pose, index=index)
    f.validate()
    return f


def _first_existing(*paths):
    for p in paths:
        if p.exists():
            return p
    return paths[0]


def load_dataset(root, layout: str = "synthetic-dump", max_frames: int | None = None) -> Dataset:
    """Load frames (sorted by timestamp), intrinsics and the optional GT trajectory."""
    root = Path(root)
    if layout not in DEPTH_SCALES:
        raise ValueError(f"unknown layout {layout!r}")
    scale = DEPTH_SCALES[layout]
    frames = []
    if layout == "synthetic-dump":
        K = _read_intrinsics(root / "intrinsics.txt")
        files = sorted((root / "rgb").glob("*.png"))
        traj = read_tum(root / "traj_gt.txt") if (root / "traj_gt.txt").exists() else None
        for i, fp in enumerate(files[:max_frames]):
            ts, pose = traj[i] if traj else (float(i), None)
            frames.append(_load_frame(fp, root / "depth" / fp.name, root / "semantic" / fp.name,
                                      scale, i, ts, pose))
    elif layout == "replica-like":
        K = _read_intrinsics(root / "intrinsics.txt")
        files = sorted((root / "results").glob("frame*.*"))
        rows = _text_rows(root / "traj.txt", 16) if (root / "traj.txt").exists() else None
        for i, fp in enumerate(files[:max_frames]):
            num = fp.stem[len("frame"):]
            pose = Pose.from_matrix(np.asarray(rows[i]).reshape(4, 4)) if rows else None
            frames.append(_load_frame(fp, root / "results" / f"depth{num}.png",
                                      root / "results" / f"semantic{num}.png", scale, i, float(i), pose))
    else:  # scannet-like
        files = sorted((root / "color").glob("*.*"), key=lambda p: int(p.stem))
        for i, fp in enumerate(files[:max_frames]):
            pose_file = root / "pose" / f"{fp.stem}.txt"
            pose = None
            if pose_file.exists():
                m = np.asarray(_text_rows(pose_file, 4))
                pose = Pose.from_matrix(m) if np.all(np.isfinite(m)) else None
            frames.append(_load_frame(fp, root / "depth" / f"{fp.stem}.png",
                                      _first_existing(root / "label" / f"{fp.stem}.png"),
                                      scale, i, float(i), pose))
        shape = frames[0].depth.shape if frames else None
        K = _read_intrinsics(root / "intrinsic" / "intrinsic_depth.txt", shape)
    if not frames:
        raise DatasetError(f"{root}: no frames found for layout {layout}")
    frames.sort(key=lambda f: f.timestamp)
    for i, f in enumerate(frames):
        f.index = i
    gt = [(f.timestamp, f.gt_pose) for f in frames] if all(f.gt_pose is not None for f in frames) else None
    return Dataset(frames, K, gt)


def generate_frames(scene: SyntheticScene, poses, K: Intrinsics, fps: float = 30.0) -> list:
    frames = []
    for i, p in enumerate(poses):
        f = raycast_scene(scene, p, K)
        f.index, f.timestamp = i, i / fps
        frames.append(f)
    return frames


def pose_close(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation (m) and rotation (rad) difference between two poses."""
    Ta, Tb = a.numpy(), b.numpy()
    dt = float(np.linalg.norm(Ta[:3, 3] - Tb[:3, 3]))
    Rrel = Ta[:3, :3].T @ Tb[:3, :3]
    ang = float(np.arccos(np.clip((np.trace(Rrel) - 1) / 2, -1, 1)))
    return dt, ang


__all__ += ["generate_frames", "pose_close", "toy_orbit", "TOY_ORBIT"]
