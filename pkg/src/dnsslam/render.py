"""Depth-guided ray sampling and differentiable occupancy volume rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import SceneField
from .geometry import Intrinsics, Pose, pixel_rays

__all__ = [
    "RaySamples",
    "RenderedPixels",
    "sample_rays",
    "sample_ray",
    "termination_weights",
    "integrate",
    "depth_variance",
    "render_rays",
    "render_pixel",
]


@dataclass
class RaySamples:
    """A batch of rays; row ``n`` of every field belongs to the same pixel.

    ``gt_depth`` is 0 for hole pixels.
    """

    origins: torch.Tensor  # (N, 3)
    directions: torch.Tensor  # (N, 3), unit camera z
    depths: torch.Tensor  # (N, M) ascending
    gt_depth: torch.Tensor  # (N,)
    pixels: torch.Tensor  # (N, 2)
    class_ids: np.ndarray  # (N,)

    def points(self) -> torch.Tensor:
        return self.origins[:, None, :] + self.depths[..., None] * self.directions[:, None, :]

    def __len__(self) -> int:
        return self.depths.shape[0]


@dataclass
class RenderedPixels:
    color: torch.Tensor  # (N, 3)
    depth: torch.Tensor  # (N,)
    logits: torch.Tensor  # (N, K)
    depth_variance: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, M)
    occupancy: torch.Tensor  # (N, M)
    latent: torch.Tensor  # (N, M, D)
    geo_in: torch.Tensor  # (N*M, geo_in) encoder inputs, reused by the latent loss


def _sample_depths(gt, n_surface, n_free, near, far, tr, rng):
    n = gt.shape[0]
    m = n_surface + n_free
    strat = lambda count: near + (np.arange(count) + rng.random((n, count))) * (far - near) / count
    free = strat(n_free)
    surf = gt[:, None] + (rng.random((n, n_surface)) * 2 - 1) * tr
    depths = np.concatenate([surf, free], 1)
    holes = gt <= 0
    if holes.any():
        depths[holes] = strat(m)[holes]
    depths = np.sort(np.clip(depths, 1e-4, None), axis=1)
    return depths


def sample_rays(pixels, pose: Pose, K: Intrinsics, gt_depth, class_ids, n_surface: int, n_free: int,
                near: float, far: float, tr: float, rng: np.random.Generator) -> RaySamples:
    """``n_surface`` depths uniform in ``gt +- tr`` and ``n_free`` stratified in [near, far]."""
    if near >= far:
        raise ValueError("near bound must be smaller than far bound")
    if n_surface <= 0 or n_free <= 0:
        raise ValueError("sample counts must be positive")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    depths = _sample_depths(gt, n_surface, n_free, near, far, tr, rng)
    dtype = pose.trans.dtype
    origins, dirs = pixel_rays(pose, K, torch.as_tensor(pixels, dtype=dtype))
    return RaySamples(
        origins, dirs, torch.as_tensor(depths, dtype=dtype), torch.as_tensor(gt, dtype=dtype),
        torch.as_tensor(pixels, dtype=dtype), np.asarray(class_ids).reshape(-1),
    )


def sample_ray(pixel, pose, K, gt_depth, n_surface, n_free, near, far, tr, rng, class_id=0) -> RaySamples:
    gt = 0.0 if gt_depth is None else gt_depth
    return sample_rays([pixel], pose, K, [gt], [class_id], n_surface, n_free, near, far, tr, rng)


def termination_weights(occ: torch.Tensor) -> torch.Tensor:
    """``w_i = o_i * prod_{j<i} (1 - o_j)`` along the last axis."""
    free = torch.cumprod(1 - occ, -1)
    trans = torch.cat([torch.ones_like(occ[..., :1]), free[..., :-1]], -1)
    return occ * trans


def integrate(weights: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Weighted sum over samples; ``values`` is (..., M) or (..., M, C)."""
    if values.dim() == weights.dim():
        return (weights * values).sum(-1)
    return (weights[..., None] * values).sum(-2)


def depth_variance(weights, depths, rendered_depth) -> torch.Tensor:
    return (weights * (rendered_depth[..., None] - depths) ** 2).sum(-1)


def render_rays(field: SceneField, rays: RaySamples, refs: list, mode: str = "fine") -> RenderedPixels:
    """Render colour, depth, semantic logits and depth variance for a ray batch.

    In ``fine`` mode each ray is evaluated with the geometry head of its
    pixel's class; ``coarse`` mode uses the single coarse head and ``merged``
    the per-sample most occupied class head, which needs no labels.
    """
    n, m = rays.depths.shape
    pts = rays.points().reshape(-1, 3)
    pos_enc = field.position_encoding(pts)
    geo_in = field.geometry_input(pts, pos_enc)
    if mode == "coarse":
        latent, occ = field.eval_coarse(pts, geo_in)
    elif mode == "fine":
        ids = np.asarray(rays.class_ids)
        latent = torch.zeros(n * m, field.cfg.latent_dim, dtype=pts.dtype)
        for c in np.unique(ids):
            rows = np.nonzero(ids == c)[0]
            idx = torch.as_tensor((rows[:, None] * m + np.arange(m)).ravel())
            h, _ = field.eval_geometry(int(c), None, geo_in[idx])
            latent = latent.index_copy(0, idx, h)
        occ = torch.sigmoid(latent[:, 0])
    elif mode == "merged":
        # label-free: every sample takes the head with the highest occupancy
        hs = torch.stack([field.eval_geometry(c, None, geo_in)[0] for c in field.class_ids])
        best = hs[:, :, 0].argmax(0)
        latent = hs[best, torch.arange(n * m)]
        occ = torch.sigmoid(latent[:, 0])
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    pooled = field.gather_reference_features(pts, refs)
    color = field.eval_color(pts, latent, pooled, pos_enc)
    logits = field.eval_semantic(pts, latent, pooled, pos_enc)
    occ = occ.reshape(n, m)
    w = termination_weights(occ)
    depth = integrate(w, rays.depths)
    return RenderedPixels(
        color=integrate(w, color.reshape(n, m, 3)),
        depth=depth,
        logits=integrate(w, logits.reshape(n, m, -1)),
        depth_variance=depth_variance(w, rays.depths, depth),
        weights=w,
        occupancy=occ,
        latent=latent.reshape(n, m, -1),
        geo_in=geo_in,
    )


def render_pixel(field, samples: RaySamples, refs, mode: str = "fine") -> RenderedPixels:
    return render_rays(field, samples, refs, mode)
