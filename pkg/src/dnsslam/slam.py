"""Tracking and mapping loop.

Frame 0 anchors the world and is mapped alone for ``init_iters`` steps.
Every later frame is tracked against the frozen coarse head; every
``ba_every`` frames a bundle-adjustment window of frames is optimised jointly
with the scene representation, alternating local and global window
selection.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .data import Frame
from .diffnet import Adam
from .field import FieldConfig, RefView, SceneField
from .geometry import Intrinsics, Pose, apply_delta, constant_speed_guess, pixel_rays
from .loss import (LossLog, LossWeights, mapping_loss, mapping_terms, tracking_loss, tracking_terms)
from .render import RaySamples, _sample_depths, render_rays

__all__ = [
    "SlamConfig",
    "KeyframeDB",
    "PixelBatch",
    "Slam",
    "SlamResult",
    "select_ba_frames",
    "select_reference_frames",
    "sample_mapping_pixels",
    "frustum_overlap",
    "run_slam",
]

log = logging.getLogger(__name__)


@dataclass
class SlamConfig:
    track_iters: int = 30
    map_iters: int = 100
    ba_every: int = 5
    keyframe_every: int = 30
    window: int = 5
    pixels_track: int = 500
    pixels_map: int = 2000
    init_iters: int = 500
    new_class_iters: int = 100
    lr_params: float = 0.005
    lr_pose_track: float = 0.001
    lr_pose_map: float = 0.0005
    n_surface: int = 15
    n_free: int = 32
    near: float = 0.05
    far: float | None = None  # defaults to the scene-bounds diagonal
    uniform_fraction: float = 0.6
    overlap_threshold: float = 0.1
    overlap_grid: int = 32
    seed: int = 0
    checkpoint_every: int = 0

    @classmethod
    def toy(cls, **kw) -> "SlamConfig":
        """Reduced budgets for the 80x60 synthetic orbit."""
        base = dict(keyframe_every=5, track_iters=60, lr_pose_track=0.002, pixels_track=300, pixels_map=1000, n_surface=11, n_free=16,
                    init_iters=300, map_iters=60, new_class_iters=50)
        return cls(**{**base, **kw})

    def __post_init__(self):
        counts = (self.track_iters, self.map_iters, self.ba_every, self.keyframe_every, self.pixels_track,
                  self.pixels_map, self.init_iters, self.new_class_iters, self.n_surface, self.n_free)
        if min(counts) < 1:
            raise ValueError("all iteration and sample counts must be >= 1")
        if self.window < 3:
            raise ValueError("window must be >= 3")


@dataclass
class KeyframeDB:
    frames: dict = dc_field(default_factory=dict)  # index -> Frame
    poses: dict = dc_field(default_factory=dict)  # index -> estimated Pose
    features: dict = dc_field(default_factory=dict)  # index -> (h, w, F) feature map
    keyframes: list = dc_field(default_factory=list)
    K: Intrinsics | None = None

    def add_keyframe(self, idx: int) -> None:
        if self.keyframes and idx <= self.keyframes[-1]:
            if idx in self.keyframes:
                return
            raise ValueError("keyframe indices must increase")
        self.keyframes.append(idx)


@dataclass
class PixelBatch:
    frame: np.ndarray  # position in the frame list passed to the sampler
    v: np.ndarray
    u: np.ndarray
    stratum: np.ndarray  # -1 for the uniform pool, else the class id


# -- selection rules -----------------------------------------------------------


def frustum_overlap(frame: Frame, pose: Pose, other_pose: Pose, K: Intrinsics, grid: int = 32) -> float:
    """Fraction of a grid x grid subsample of ``frame`` visible from ``other_pose``."""
    H, W = frame.depth.shape
    vs = np.linspace(0, H - 1, grid).round().astype(int)
    us = np.linspace(0, W - 1, grid).round().astype(int)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    d = frame.depth[vv, uu].ravel()
    ok = d > 0
    if not ok.any():
        return 0.0
    T = pose.numpy()
    To = other_pose.numpy()
    pc = np.stack([(uu.ravel() - K.cx) / K.fx * d, (vv.ravel() - K.cy) / K.fy * d, d], 1)[ok]
    pw = pc @ T[:3, :3].T + T[:3, 3]
    po = (pw - To[:3, 3]) @ To[:3, :3]
    z = po[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * po[:, 0] / z + K.cx
        v = K.fy * po[:, 1] / z + K.cy
    inside = (z > 0) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    return float(inside.sum()) / float(grid * grid)


def select_ba_frames(db: KeyframeDB, current: int, W: int, mode: str, rng: np.random.Generator,
                     threshold: float = 0.1) -> list:
    """Current frame, latest keyframe, then up to W-2 further keyframes."""
    if not db.keyframes:
        raise ValueError("at least one keyframe is required")
    chosen = [current]
    if db.keyframes[-1] != current:
        chosen.append(db.keyframes[-1])
    pool = [k for k in db.keyframes if k not in chosen]
    if mode == "local":
        frame = db.frames[current]
        pool = [
            k for k in pool
            if frustum_overlap(frame, db.poses[current], db.poses[k], db.K) >= threshold
        ]
    elif mode != "global":
        raise ValueError(f"unknown BA mode {mode!r}")
    need = W - len(chosen)
    if need > 0 and pool:
        picks = rng.choice(len(pool), size=min(need, len(pool)), replace=False)
        chosen += [pool[i] for i in sorted(picks)]
    return chosen


def select_reference_frames(keyframes: list, target: int, current: int) -> list:
    """Two reference keyframes for a BA target frame.

    Current frame: the two latest keyframes. Latest keyframe: the two before
    it. Any other keyframe: its previous and next keyframe.
    """
    kfs = sorted(keyframes)
    if target == current:
        return [k for k in kfs if k != target][-2:]
    if kfs and target == kfs[-1]:
        return kfs[:-1][-2:]
    before = [k for k in kfs if k < target]
    after = [k for k in kfs if k > target]
    return before[-1:] + after[:1]


def sample_mapping_pixels(frames: list, R: int, rng: np.random.Generator, uniform_fraction: float = 0.6,
                          class_filter=None) -> PixelBatch:
    """Per frame, R/len(frames) pixels: 60% uniform, 40% split evenly over present classes."""
    quota = R // len(frames)
    fr, vs, us, st = [], [], [], []
    for i, f in enumerate(frames):
        H, W = f.semantic.shape
        classes = np.unique(f.semantic)
        if class_filter is not None:
            classes = np.asarray([c for c in classes if c in class_filter])
        n_class = int(round(quota * (1 - uniform_fraction)))
        per_class = n_class // len(classes) if len(classes) else 0
        n_uniform = quota - per_class * len(classes)
        flat = rng.integers(0, H * W, n_uniform)
        parts = [(flat, np.full(n_uniform, -1))]
        sem_flat = f.semantic.ravel()
        for c in classes:
            pix = np.flatnonzero(sem_flat == c)
            parts.append((pix[rng.integers(0, len(pix), per_class)], np.full(per_class, c)))
        idx = np.concatenate([p[0] for p in parts])
        fr.append(np.full(len(idx), i))
        vs.append(idx // W)
        us.append(idx % W)
        st.append(np.concatenate([p[1] for p in parts]))
    return PixelBatch(np.concatenate(fr), np.concatenate(vs), np.concatenate(us), np.concatenate(st))


# -- the SLAM system ------------------------------------------------------------


@dataclass
class SlamResult:
    trajectory: list  # (timestamp, Pose)
    field: SceneField
    diagnostics: list
    flagged_frames: list


class Slam:
    def __init__(self, K: Intrinsics, cfg: SlamConfig | None = None, field_cfg: FieldConfig | None = None,
                 weights: LossWeights | None = None, field: SceneField | None = None, loss_log: LossLog | None = None):
        self.K = K
        self.cfg = cfg or SlamConfig()
        self.weights = weights or LossWeights()
        self.field = field or SceneField(field_cfg)
        self.dtype = self.field.dtype
        lo, hi = self.field.lo.numpy(), (self.field.lo + self.field.extent).numpy()
        self.far = self.cfg.far if self.cfg.far is not None else float(np.linalg.norm(hi - lo))
        self.db = KeyframeDB(K=K)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.loss_log = loss_log or LossLog()
        self.opt = Adam({"params": self._mapping_params(), "lr": self.cfg.lr_params})
        self.map_count = 0
        self.flagged: list = []
        self.last_terms: dict = {}
        self.poses_fixed = False  # set in ground-truth-pose mode

    # -- helpers ---------------------------------------------------------------

    def _mapping_params(self) -> list:
        f = self.field
        heads = [p for c in f.class_ids for p in f.head_parameters(c)]
        return f.shared_parameters() + heads + list(f.coarse_head.parameters())

    def _refresh_optimizer(self) -> None:
        known = {id(p) for p in self.opt.params()}
        new = [p for p in self._mapping_params() if id(p) not in known]
        if new:
            self.opt.groups[0]["params"].extend(new)

    def features(self, idx: int) -> torch.Tensor:
        if idx not in self.db.features:
            self.db.features[idx] = self.field.feature_map(self.db.frames[idx].rgb)
        return self.db.features[idx]

    def ref_view(self, idx: int) -> RefView:
        return RefView(self.features(idx), self.db.poses[idx].detach(), self.K)

    def _rays(self, frame: Frame, pose: Pose, v, u, depths=None) -> tuple:
        pix = np.stack([u, v], 1).astype(np.float64)
        gt = frame.depth[v, u]
        if depths is None:
            depths = _sample_depths(gt, self.cfg.n_surface, self.cfg.n_free, self.cfg.near, self.far,
                                    self.weights.tr, self.rng)
        o, d = pixel_rays(pose, self.K, torch.as_tensor(pix, dtype=pose.trans.dtype))
        rays = RaySamples(o.to(self.dtype), d.to(self.dtype), torch.as_tensor(depths, dtype=self.dtype), torch.as_tensor(gt, dtype=self.dtype),
                          torch.as_tensor(pix, dtype=self.dtype), frame.semantic[v, u])
        rgb = torch.as_tensor(frame.rgb[v, u], dtype=self.dtype)
        return rays, rgb

    # -- tracking --------------------------------------------------------------

    def track_frame(self, frame: Frame, prev_poses: list, ref: RefView, iters: int | None = None,
                    init: Pose | None = None) -> tuple[Pose, dict]:
        """Estimate the pose of ``frame`` with the scene frozen.

        ``prev_poses`` holds the latest estimated poses, most recent last. The
        best-loss pose over all iterations is returned.
        """
        cfg = self.cfg
        iters = iters or cfg.track_iters
        if init is not None:
            guess = init.detach()
        elif len(prev_poses) >= 2:
            guess = constant_speed_guess(prev_poses[-1], prev_poses[-2]).detach()
        else:
            guess = prev_poses[-1].detach()
        H, W = frame.depth.shape
        n = min(cfg.pixels_track, H * W)
        flat = self.rng.choice(H * W, n, replace=False)
        v, u = flat // W, flat % W
        gt = frame.depth[v, u]
        depths = _sample_depths(gt, cfg.n_surface, cfg.n_free, cfg.near, self.far, self.weights.tr, self.rng)
        delta = torch.zeros(6, dtype=self.dtype, requires_grad=True)
        opt = Adam({"params": [delta], "lr": cfg.lr_pose_track})
        best_loss, best_pose = math.inf, guess
        for it in range(iters):
            pose = apply_delta(guess, delta)
            rays, rgb = self._rays(frame, pose, v, u, depths)
            out = render_rays(self.field, rays, [ref], mode="coarse")
            terms = tracking_terms(out, rays, rgb, class_ids=self.field.class_ids)
            loss = tracking_loss(terms, self.weights)
            if not bool(torch.isfinite(loss)):
                log.warning("frame %d: non-finite tracking loss, reverting to the initial guess", frame.index)
                self.flagged.append(frame.index)
                return guess, {"iters": it, "loss": math.nan, "flagged": True}
            if float(loss.detach()) < best_loss:
                best_loss, best_pose = float(loss.detach()), pose.detach()
            (grad,) = torch.autograd.grad(loss, [delta])
            delta.grad = grad
            opt.step()
        return best_pose, {"iters": iters, "loss": best_loss, "flagged": False}

    # -- mapping ---------------------------------------------------------------

    def _refs_for(self, target: int, current: int) -> list:
        refs = select_reference_frames(self.db.keyframes, target, current)
        if not refs:
            refs = [target]
        return [self.ref_view(r) for r in refs]

    def _mapping_batch_loss(self, targets: list, poses: dict, refs: dict, pixels: int, params_filter=None):
        frames = [self.db.frames[t] for t in targets]
        batch = sample_mapping_pixels(frames, pixels, self.rng, self.cfg.uniform_fraction, params_filter)
        outs, rays_all, rgbs, coarse = [], [], [], []
        for i, t in enumerate(targets):
            sel = batch.frame == i
            if not sel.any():
                continue
            rays, rgb = self._rays(frames[i], poses[t], batch.v[sel], batch.u[sel])
            out = render_rays(self.field, rays, refs[t], mode="fine")
            h_c, _ = self.field.eval_coarse(None, out.geo_in.detach())
            outs.append(out)
            rays_all.append(rays)
            rgbs.append(rgb)
            coarse.append(h_c)
        return _concat(outs, rays_all, rgbs, coarse)

    def _optimize(self, targets, anchor_free: list, iters: int, refs: dict, pixels: int) -> dict:
        """Joint optimisation of the scene and the pose deltas of ``anchor_free`` frames."""
        deltas = {t: torch.zeros(6, dtype=self.dtype, requires_grad=True) for t in anchor_free}
        pose_opt = Adam({"params": list(deltas.values()), "lr": self.cfg.lr_pose_map}) if deltas else None
        retried = False
        terms = {}
        it = 0
        while it < iters:
            poses = {t: apply_delta(self.db.poses[t], deltas[t]) if t in deltas else self.db.poses[t]
                     for t in targets}
            out, rays, rgb, h_c = self._mapping_batch_loss(targets, poses, refs, pixels)
            terms = mapping_terms(out, rays, rgb, self.field.class_index(rays.class_ids), h_c, self.weights)
            loss = mapping_loss(terms, self.weights)
            if not bool(torch.isfinite(loss)):
                if retried:
                    log.error("mapping aborted: non-finite loss after learning-rate halving")
                    return {"aborted": True, **{k: float(v.detach()) for k, v in terms.items()}}
                retried = True
                self.opt.set_lr_scale(0.5)
                if pose_opt:
                    pose_opt.set_lr_scale(0.5)
                continue
            self.opt.zero_grad()
            if pose_opt:
                pose_opt.zero_grad()
            loss.backward()
            self.opt.step()
            if pose_opt:
                pose_opt.step()
            self.loss_log.record({**terms, "total": loss})
            it += 1
        for t, d in deltas.items():
            self.db.poses[t] = apply_delta(self.db.poses[t], d.detach()).detach()
        self.last_terms = {k: float(v.detach()) for k, v in terms.items()}
        return self.last_terms

    def initialize(self, frame: Frame, pose: Pose) -> dict:
        """Map frame 0 alone with its pose fixed."""
        self._register(frame, pose)
        self.db.add_keyframe(frame.index)
        frame.is_keyframe = True
        for c in np.unique(frame.semantic):
            self.field.add_class(int(c))
        self._refresh_optimizer()
        refs = {frame.index: self._refs_for(frame.index, frame.index)}
        terms = self._optimize([frame.index], [], self.cfg.init_iters, refs, self.cfg.pixels_map)
        self.field.warming.clear()
        return terms

    def _register(self, frame: Frame, pose: Pose) -> None:
        self.db.frames[frame.index] = frame
        self.db.poses[frame.index] = pose.detach()
        frame.est_pose = pose.detach()

    def map_step(self, current: int) -> dict:
        mode = "local" if self.map_count % 2 == 0 else "global"
        self.map_count += 1
        targets = select_ba_frames(self.db, current, self.cfg.window, mode, self.rng, self.cfg.overlap_threshold)
        refs = {t: self._refs_for(t, current) for t in targets}
        anchor_free = [] if self.poses_fixed else [t for t in targets if t != 0]
        terms = self._optimize(targets, anchor_free, self.cfg.map_iters, refs, self.cfg.pixels_map)
        for t in targets:
            self.db.frames[t].est_pose = self.db.poses[t]
        return {"mode": mode, "targets": targets, **terms}

    def init_new_class(self, class_id: int, frame_ids: list) -> dict:
        """Burn in a freshly added class head on that class's pixels only."""
        f = self.field
        frame_ids = [i for i in frame_ids if (self.db.frames[i].semantic == class_id).any()]
        if not frame_ids:
            raise ValueError(f"no pixels of class {class_id} to initialise from")
        key = str(class_id)
        params = f.head_parameters(class_id) + [f.semantic_head.rows[key], f.semantic_head.bias[key]]
        opt = Adam({"params": params, "lr": self.cfg.lr_params})
        refs = {t: self._refs_for(t, frame_ids[-1]) for t in frame_ids}
        poses = {t: self.db.poses[t] for t in frame_ids}
        terms = {}
        for _ in range(self.cfg.new_class_iters):
            frames = [self.db.frames[t] for t in frame_ids]
            batch = sample_mapping_pixels(frames, self.cfg.pixels_map, self.rng, 0.0, {class_id})
            outs, rl, rgbs = [], [], []
            for i, t in enumerate(frame_ids):
                sel = batch.frame == i
                rays, rgb = self._rays(frames[i], poses[t], batch.v[sel], batch.u[sel])
                outs.append(render_rays(f, rays, refs[t], mode="fine"))
                rl.append(rays)
                rgbs.append(rgb)
            out, rays, rgb, _ = _concat(outs, rl, rgbs, None)
            terms = mapping_terms(out, rays, rgb, f.class_index(rays.class_ids), out.latent.reshape(-1, out.latent.shape[-1]), self.weights)
            terms["latent"] = terms["latent"] * 0
            loss = mapping_loss(terms, self.weights)
            grads = torch.autograd.grad(loss, params)
            for p, g in zip(params, grads):
                p.grad = g
            opt.step()
        f.warming.discard(class_id)
        self._refresh_optimizer()
        return {k: float(v.detach()) for k, v in terms.items()}

    # -- full loop ---------------------------------------------------------------

    def run(self, frames: list, gt_pose_mode: bool = False, diagnostics_path=None, out_dir=None,
            progress=None) -> SlamResult:
        if not frames:
            raise ValueError("empty frame stream")
        cfg = self.cfg
        self.poses_fixed = gt_pose_mode
        diags = []
        t0 = time.time()
        f0 = frames[0]
        anchor = f0.gt_pose if f0.gt_pose is not None else Pose.identity()
        terms = self.initialize(f0, anchor.to(self.dtype))
        diags.append(self._diag(f0, 0, cfg.init_iters, terms, t0))
        for i in range(1, len(frames)):
            frame = frames[i]
            prev = [self.db.poses[j] for j in range(max(0, i - 2), i)]
            track_iters = 0
            if gt_pose_mode and frame.gt_pose is not None:
                pose = frame.gt_pose.to(self.dtype)
            else:
                pose, info = self.track_frame(frame, prev, self.ref_view(i - 1))
                track_iters = info["iters"]
                if info["flagged"]:
                    pose = constant_speed_guess(prev[-1], prev[-2]) if len(prev) > 1 else prev[-1]
            self._register(frame, pose)
            map_terms = {}
            if i % cfg.ba_every == 0:
                if i % cfg.keyframe_every == 0:
                    self.db.add_keyframe(i)
                    frame.is_keyframe = True
                for c in np.unique(frame.semantic):
                    if int(c) not in self.field.class_ids:
                        self.field.add_class(int(c))
                        self.init_new_class(int(c), sorted(set(self.db.keyframes) | {i}))
                map_terms = self.map_step(i)
            diags.append(self._diag(frame, track_iters, cfg.map_iters if map_terms else 0, map_terms, t0))
            if cfg.checkpoint_every and out_dir and i % cfg.checkpoint_every == 0:
                self.field.save(Path(out_dir) / f"checkpoint_{i:06d}.bin")
            if progress:
                progress(i, len(frames))
        for fr in frames:
            fr.est_pose = self.db.poses[fr.index]
        traj = [(fr.timestamp, self.db.poses[fr.index]) for fr in frames]
        if diagnostics_path:
            _write_diagnostics(diagnostics_path, diags)
        self.loss_log.close()
        return SlamResult(traj, self.field, diags, list(self.flagged))

    def _diag(self, frame: Frame, track_iters: int, map_iters: int, terms: dict, t0: float) -> dict:
        from .eval import position_error

        row = {"frame": frame.index, "track_iters": track_iters, "map_iters": map_iters,
               "wall_time": round(time.time() - t0, 3)}
        est = [self.db.poses[j] for j in sorted(self.db.poses)]
        gt = [self.db.frames[j].gt_pose for j in sorted(self.db.poses)]
        row["ate_so_far_cm"] = position_error(est, gt) if all(g is not None for g in gt) else ""
        for k in ("geo", "photo", "sem", "latent", "occ", "fs"):
            row[k] = terms.get(k, "")
        return row


def _concat(outs, rays_list, rgbs, coarse):
    from .render import RenderedPixels

    cat = lambda name: torch.cat([getattr(o, name) for o in outs])
    out = RenderedPixels(
        color=cat("color"), depth=cat("depth"), logits=cat("logits"), depth_variance=cat("depth_variance"),
        weights=cat("weights"), occupancy=cat("occupancy"), latent=cat("latent"), geo_in=cat("geo_in"),
    )
    rays = RaySamples(
        torch.cat([r.origins for r in rays_list]), torch.cat([r.directions for r in rays_list]),
        torch.cat([r.depths for r in rays_list]), torch.cat([r.gt_depth for r in rays_list]),
        torch.cat([r.pixels for r in rays_list]), np.concatenate([r.class_ids for r in rays_list]),
    )
    h_c = torch.cat(coarse) if coarse is not None else None
    return out, rays, torch.cat(rgbs), h_c


def _write_diagnostics(path, rows: list) -> None:
    keys = ["frame", "ate_so_far_cm", "geo", "photo", "sem", "latent", "occ", "fs", "track_iters", "map_iters",
            "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.9g}" if isinstance(r.get(k), float) else r.get(k, "")) for k in keys})


def run_slam(frames: list, K: Intrinsics, cfg: SlamConfig | None = None, field_cfg: FieldConfig | None = None,
             weights: LossWeights | None = None, gt_pose_mode: bool = False, diagnostics_path=None,
             out_dir=None, loss_csv=None) -> SlamResult:
    cfg = cfg or SlamConfig()
    torch.manual_seed(cfg.seed)
    slam = Slam(K, cfg, field_cfg, weights, loss_log=LossLog(loss_csv))
    return slam.run(frames, gt_pose_mode, diagnostics_path, out_dir)

