"""Trajectory and reconstruction metrics, mesh extraction and PLY export."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from .data import Frame, SyntheticScene
from .field import RefView, SceneField
from .geometry import Intrinsics, Pose
from .render import sample_rays, render_rays

__all__ = [
    "Trajectory",
    "TriangleMesh",
    "umeyama_align",
    "ate_rmse",
    "position_error",
    "render_frame",
    "depth_l1",
    "miou",
    "miou_from_labels",
    "observation_mask",
    "extract_mesh",
    "scene_mesh",
    "cull_unobserved",
    "sample_surface",
    "mesh_accuracy_completion",
    "export_ply",
    "read_ply",
]

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        if len(ts) != len(self.poses):
            raise ValueError("one timestamp per pose")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        self.timestamps = ts

    @classmethod
    def from_pairs(cls, pairs) -> "Trajectory":
        return cls([t for t, _ in pairs], [p for _, p in pairs])

    def positions(self) -> np.ndarray:
        return np.stack([p.trans.detach().cpu().numpy() for p in self.poses])


def _positions(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.positions()
    if isinstance(traj, np.ndarray):
        return traj
    return np.stack([p.trans.detach().cpu().numpy() if isinstance(p, Pose) else np.asarray(p) for p in traj])


def umeyama_align(est, gt) -> np.ndarray:
    """Rigid 4x4 transform T minimising sum ||gt_i - T est_i||^2 (no scale)."""
    X, Y = _positions(est).astype(float), _positions(gt).astype(float)
    if len(X) != len(Y) or len(X) < 3:
        raise ValueError("need two associated trajectories of equal length >= 3")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    s = np.linalg.svd(Xc, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise ValueError("rank-deficient (collinear) point set, alignment is ambiguous")
    U, _, Vt = np.linalg.svd(Yc.T @ Xc)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = my - R @ mx
    return T


def ate_rmse(est, gt) -> float:
    """Absolute trajectory error after rigid alignment, in centimetres."""
    X, Y = _positions(est), _positions(gt)
    T = umeyama_align(X, Y)
    aligned = X @ T[:3, :3].T + T[:3, 3]
    return float(np.sqrt(np.mean(np.sum((aligned - Y) ** 2, 1))) * 100)


def position_error(est, gt) -> float:
    """RMS position error without alignment, in centimetres."""
    X, Y = _positions(est), _positions(gt)
    return float(np.sqrt(np.mean(np.sum((X - Y) ** 2, 1))) * 100)


# -- rendering metrics ---------------------------------------------------------


@torch.no_grad()
def render_frame(field: SceneField, frame: Frame, pose: Pose, K: Intrinsics, n_surface=15, n_free=32, near=0.05,
                 far=None, tr=0.1, seed=0, chunk=1024, refs=None, mode="fine") -> dict:
    """Render depth and semantic labels for every pixel of ``frame``.

    Rays use the same depth-guided sampling as training with a fixed seed; the
    frame's own image provides the reference features unless ``refs`` is given.
    ``fine`` picks each pixel's geometry head from the frame's semantic map, so
    its labels reach the semantic head; ``merged`` reads no labels.
    """
    H, W = frame.depth.shape
    far = far if far is not None else float(torch.linalg.norm(field.extent))
    rng = np.random.default_rng(seed)
    pose = pose.to(field.dtype)
    if refs is None:
        refs = [RefView(field.feature_map(frame.rgb), pose, K)]
    v, u = np.mgrid[0:H, 0:W]
    v, u = v.ravel(), u.ravel()
    depth = np.zeros(H * W)
    labels = np.zeros(H * W, dtype=np.int64)
    known = np.asarray(field.class_ids)
    for s in range(0, H * W, chunk):
        sl = slice(s, s + chunk)
        cls = frame.semantic.ravel()[sl]
        cls = np.where(np.isin(cls, known), cls, known[0])
        rays = sample_rays(np.stack([u[sl], v[sl]], 1), pose, K, frame.depth.ravel()[sl], cls,
                           n_surface, n_free, near, far, tr, rng)
        out = render_rays(field, rays, refs, mode)
        depth[sl] = out.depth.numpy()
        labels[sl] = known[out.logits.argmax(-1).numpy()]
    return {"depth": depth.reshape(H, W), "labels": labels.reshape(H, W)}


def depth_l1(field, frames, K: Intrinsics, stride: int = 1, poses=None, **kw) -> float:
    """Mean |rendered - gt| depth over valid pixels of every stride-th frame, in cm."""
    errs = []
    for i in range(0, len(frames), stride):
        f = frames[i]
        pose = poses[i] if poses is not None else f.gt_pose
        r = render_frame(field, f, pose, K, **kw)
        ok = f.depth > 0
        errs.append(np.abs(r["depth"][ok] - f.depth[ok]))
    return float(np.concatenate(errs).mean() * 100)


def miou_from_labels(pred, gt) -> float:
    """Mean IoU (percent) over classes present in the ground truth."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    ious = []
    for c in np.unique(gt):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        ious.append(inter / union)
    return float(np.mean(ious) * 100)


def miou(field, frames, K: Intrinsics, stride: int = 1, poses=None, **kw) -> float:
    preds, gts = [], []
    for i in range(0, len(frames), stride):
        f = frames[i]
        pose = poses[i] if poses is not None else f.gt_pose
        preds.append(render_frame(field, f, pose, K, **kw)["labels"].ravel())
        gts.append(f.semantic.ravel())
    return miou_from_labels(np.concatenate(preds), np.concatenate(gts))


# -- meshes --------------------------------------------------------------------


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) metres
    triangles: np.ndarray  # (T, 3) int
    class_ids: np.ndarray | None = None  # (V,)
    colors: np.ndarray | None = None  # (V, 3) uint8

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.class_ids is None:
            self.class_ids = np.zeros(n, dtype=np.int64)
        if self.colors is None:
            self.colors = np.full((n, 3), 200, dtype=np.uint8)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range")

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def cleanup(self) -> "TriangleMesh":
        keep = self.areas() > 1e-14 if len(self.triangles) else np.zeros(0, bool)
        return TriangleMesh(self.vertices, self.triangles[keep], self.class_ids, self.colors)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def observation_mask(points: np.ndarray, frames, poses, K: Intrinsics, tr: float, class_id=None) -> np.ndarray:
    """Points seen by at least one frame and not hidden more than ``tr`` behind the surface.

    With ``class_id`` the point must additionally lie within ``tr`` of an
    observed surface of that class.
    """
    seen = np.zeros(len(points), dtype=bool)
    for f, p in zip(frames, poses):
        T = p.numpy()
        pc = (points - T[:3, 3]) @ T[:3, :3]
        z = pc[:, 2]
        zs = np.where(z > 1e-6, z, 1.0)
        u = np.round(K.fx * pc[:, 0] / zs + K.cx).astype(np.int64)
        v = np.round(K.fy * pc[:, 1] / zs + K.cy).astype(np.int64)
        ok = (z > 1e-6) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        d = np.zeros(len(points))
        d[ok] = f.depth[v[ok], u[ok]]
        ok &= d > 0
        if class_id is None:
            ok &= z <= d + tr
        else:
            lab = np.full(len(points), -1)
            lab[ok] = f.semantic[v[ok], u[ok]]
            ok &= (np.abs(z - d) <= tr) & (lab == class_id)
        seen |= ok
    return seen


def _grid(field: SceneField, resolution: int):
    lo = field.lo.numpy()
    hi = lo + field.extent.numpy()
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    spacing = (hi - lo) / (resolution - 1)
    return pts, lo, spacing


def _marching(vol: np.ndarray, lo, spacing, level=0.5):
    if not (vol.min() < level < vol.max()):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level, spacing=tuple(spacing))
    return verts + lo, faces


@torch.no_grad()
def _grid_values(field: SceneField, pts: np.ndarray, fn, chunk: int = 65536):
    out = []
    for s in range(0, len(pts), chunk):
        x = torch.as_tensor(pts[s : s + chunk], dtype=field.dtype)
        out.append(fn(x, field.geometry_input(x)))
    return out


def extract_mesh(field: SceneField, resolution: int = 64, mode: str = "per-class", observations=None,
                 tr: float = 0.1, level: float = 0.5):
    """Marching cubes on the occupancy of the field.

    ``per-class`` returns ``{class_id: TriangleMesh}``, one per geometry head;
    ``merged`` returns one mesh from the per-point maximum occupancy, with
    vertices labelled by the semantic head. ``observations`` is an optional
    ``(frames, poses, K)`` triple; grid points unsupported by observations of
    the class are treated as empty.
    """
    pts, lo, spacing = _grid(field, resolution)
    shape = (resolution,) * 3
    occs = {}
    for c in field.class_ids:
        vals = _grid_values(field, pts, lambda x, g, c=c: field.eval_geometry(c, None, g)[1])
        occ = torch.cat(vals).numpy()
        if observations is not None:
            frames, poses, K = observations
            occ = np.where(observation_mask(pts, frames, poses, K, tr, class_id=c), occ, 0.0)
        occs[c] = occ
    if mode == "per-class":
        meshes = {}
        for c, occ in occs.items():
            v, f = _marching(occ.reshape(shape), lo, spacing, level)
            if len(f) == 0:
                log.warning("class %d: empty surface", c)
            meshes[c] = TriangleMesh(v, f, np.full(len(v), c)).cleanup()
        return meshes
    if mode != "merged":
        raise ValueError(f"unknown mesh mode {mode!r}")
    stack = np.stack([occs[c] for c in field.class_ids])
    v, f = _marching(stack.max(0).reshape(shape), lo, spacing, level)
    if len(f) == 0:
        log.warning("merged mesh is empty")
        return TriangleMesh(v, f)
    labels, colors = _label_vertices(field, v)
    return TriangleMesh(v, f, labels, colors).cleanup()


@torch.no_grad()
def _label_vertices(field: SceneField, verts: np.ndarray):
    x = torch.as_tensor(verts, dtype=field.dtype)
    g = field.geometry_input(x)
    heads = torch.stack([field.eval_geometry(c, None, g)[1] for c in field.class_ids])
    best = heads.argmax(0)
    h = torch.stack([field.eval_geometry(c, None, g)[0] for c in field.class_ids])[best, torch.arange(len(x))]
    zero = torch.zeros(len(x), field.cfg.ref_dim, dtype=field.dtype)
    logits = field.eval_semantic(x, h, zero)
    rgb = field.eval_color(x, h, zero)
    known = np.asarray(field.class_ids)
    return known[logits.argmax(-1).numpy()], np.clip(np.round(rgb.numpy() * 255), 0, 255).astype(np.uint8)


def _box_mesh(center, size, R=np.eye(3), subdiv=1):
    # triangle winding is not consistent; only areas are used downstream
    half = np.asarray(size, dtype=float) / 2
    verts, tris = [], []
    for axis in range(3):
        for sign in (-1, 1):
            a, b = [i for i in range(3) if i != axis]
            s = np.linspace(-1, 1, subdiv + 1)
            gu, gv = np.meshgrid(s, s, indexing="ij")
            p = np.zeros((subdiv + 1, subdiv + 1, 3))
            p[..., axis] = sign * half[axis]
            p[..., a] = gu * half[a]
            p[..., b] = gv * half[b]
            base = sum(len(x) for x in verts)
            verts.append(p.reshape(-1, 3))
            n = subdiv + 1
            for i in range(subdiv):
                for j in range(subdiv):
                    q = [i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1]
                    t1, t2 = [q[0], q[1], q[2]], [q[0], q[2], q[3]]
                    tris += [[base + k for k in t1], [base + k for k in t2]]
    V = np.concatenate(verts) @ np.asarray(R).T + np.asarray(center, dtype=float)
    return V, np.asarray(tris)


def _sphere_mesh(center, r, n=48):
    th = np.linspace(0, np.pi, n // 2 + 1)
    ph = np.linspace(0, 2 * np.pi, n + 1)[:-1]
    T, P = np.meshgrid(th, ph, indexing="ij")
    V = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3) * r + center
    rows, cols = T.shape
    tris = []
    for i in range(rows - 1):
        for j in range(cols):
            a, b = i * cols + j, i * cols + (j + 1) % cols
            c, d = (i + 1) * cols + j, (i + 1) * cols + (j + 1) % cols
            tris += [[a, c, b], [b, c, d]]
    return V, np.asarray(tris)


def scene_mesh(scene: SyntheticScene, per_class: bool = False, subdiv: int = 8):
    """Ground-truth triangle mesh of a synthetic scene (room faces plus primitives)."""
    parts = []
    room = scene.room
    lo, hi = np.asarray(room.lo, float), np.asarray(room.hi, float)
    V, F = _box_mesh((lo + hi) / 2, hi - lo, subdiv=subdiv)
    parts.append((V, F, None, "room"))
    for prim in scene.primitives:
        if prim.shape == "sphere":
            V, F = _sphere_mesh(np.asarray(prim.center, float), prim.size[0])
        else:
            V, F = _box_mesh(prim.center, prim.size, prim.rotation(), subdiv=2)
        parts.append((V, F, np.full(len(V), prim.class_id), "prim"))
    meshes = {}
    for V, F, cls, kind in parts:
        if kind == "room":
            # label room triangles by which face they lie on
            z = V[F, 2]
            tri_cls = np.full(len(F), room.wall_class)
            tri_cls[np.isclose(z, lo[2]).all(1)] = room.floor_class
            tri_cls[np.isclose(z, hi[2]).all(1)] = room.ceiling_class
            for c in np.unique(tri_cls):
                meshes.setdefault(int(c), []).append((V, F[tri_cls == c]))
        else:
            meshes.setdefault(int(cls[0]), []).append((V, F))
    out = {}
    for c, items in meshes.items():
        out[c] = _merge([TriangleMesh(V, F, np.full(len(V), c)) for V, F in items])
    return out if per_class else _merge(list(out.values()))


def _merge(meshes: list) -> TriangleMesh:
    V, F, C, off = [], [], [], 0
    for m in meshes:
        V.append(m.vertices)
        F.append(m.triangles + off)
        C.append(m.class_ids)
        off += len(m.vertices)
    if not V:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    return TriangleMesh(np.concatenate(V), np.concatenate(F), np.concatenate(C))


def cull_unobserved(mesh: TriangleMesh, frames, poses, K: Intrinsics, tr: float = 0.1) -> TriangleMesh:
    """Drop vertices (and their triangles) outside every training frustum."""
    if mesh.is_empty():
        return mesh
    keep = observation_mask(mesh.vertices, frames, poses, K, tr)
    tri_ok = keep[mesh.triangles].all(1)
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    return TriangleMesh(mesh.vertices[keep], remap[mesh.triangles[tri_ok]], mesh.class_ids[keep], mesh.colors[keep])


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c


def mesh_accuracy_completion(pred: TriangleMesh, gt: TriangleMesh, n_samples: int = 200_000,
                             threshold_cm: float = 5.0, seed: int = 0) -> tuple[float, float, float]:
    """(accuracy cm, completion cm, completion ratio %) from surface samples."""
    rng = np.random.default_rng(seed)
    if pred.is_empty():
        return float("inf"), float("inf"), 0.0
    p = sample_surface(pred, n_samples, rng)
    g = sample_surface(gt, n_samples, rng)
    acc = cKDTree(g).query(p)[0]
    comp = cKDTree(p).query(g)[0]
    ratio = float(np.mean(comp * 100 < threshold_cm) * 100)
    return float(acc.mean() * 100), float(comp.mean() * 100), ratio


# -- PLY -----------------------------------------------------------------------

_PLY_HEADER = (
    "ply\n"
    "format binary_little_endian 1.0\n"
    "comment dnsslam mesh; class_id is the semantic class of each vertex (uint16)\n"
    "element vertex {nv}\n"
    "property float x\nproperty float y\nproperty float z\n"
    "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    "property ushort class_id\n"
    "element face {nf}\n"
    "property list uchar int vertex_indices\n"
    "end_header\n"
)

_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                    ("class_id", "<u2")])
_FACE = np.dtype([("n", "u1"), ("i", "<i4", (3,))])


def export_ply(mesh: TriangleMesh, path) -> None:
    v = np.zeros(len(mesh.vertices), dtype=_VERTEX)
    v["x"], v["y"], v["z"] = mesh.vertices.T.astype(np.float32)
    v["red"], v["green"], v["blue"] = mesh.colors.T
    v["class_id"] = mesh.class_ids.astype(np.uint16)
    f = np.zeros(len(mesh.triangles), dtype=_FACE)
    f["n"] = 3
    f["i"] = mesh.triangles.astype(np.int32)
    header = _PLY_HEADER.format(nv=len(v), nf=len(f)).encode("ascii")
    Path(path).write_bytes(header + v.tobytes() + f.tobytes())


def read_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    v = np.frombuffer(data, dtype=_VERTEX, count=nv, offset=end)
    f = np.frombuffer(data, dtype=_FACE, count=nf, offset=end + nv * _VERTEX.itemsize)
    verts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    colors = np.stack([v["red"], v["green"], v["blue"]], 1)
    return TriangleMesh(verts, f["i"].astype(np.int64), v["class_id"].astype(np.int64), colors)

