import numpy as np
import pytest
import torch

from conftest import tiny_field
from dnsslam.render import (RaySamples, depth_variance, integrate, render_rays, sample_ray, sample_rays,
                            termination_weights)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_termination_weights_closed_form():
    w = termination_weights(t([0.5, 0.5, 1.0]))
    assert torch.allclose(w, t([0.5, 0.25, 0.25]))


def test_weights_bounded_for_random_occupancies():
    occ = torch.rand(100, 20, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    w = termination_weights(occ)
    assert ((w >= 0) & (w <= 1)).all()
    assert (w.sum(-1) <= 1 + 1e-12).all()


def test_opaque_first_sample_takes_everything():
    occ = t([[1.0, 0.3, 0.9]])
    depths = t([[0.7, 1.0, 2.0]])
    w = termination_weights(occ)
    assert w.tolist() == [[1.0, 0.0, 0.0]]
    d = integrate(w, depths)
    assert d.item() == 0.7
    assert depth_variance(w, depths, d).item() == 0.0


def test_variance_hand_case():
    w = t([[0.5, 0.5]])
    depths = t([[1.0, 3.0]])
    d = integrate(w, depths)
    assert d.item() == 2.0
    assert depth_variance(w, depths, d).item() == 1.0


def test_integrate_vector_values():
    w = t([[0.25, 0.75]])
    vals = t([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    assert torch.allclose(integrate(w, vals), t([[0.25, 0.75, 0.0]]))


def test_sample_rays_band_and_stratification(frames, K):
    f = frames[0]
    rng = np.random.default_rng(0)
    pix = np.array([[10, 10], [40, 30]])
    gt = f.depth[pix[:, 1], pix[:, 0]]
    rays = sample_rays(pix, f.gt_pose, K, gt, [0, 0], 7, 5, 0.1, 6.0, 0.1, rng)
    assert rays.depths.shape == (2, 12)
    d = rays.depths.numpy()
    assert np.all(np.diff(d, axis=1) >= 0)
    near = np.abs(d - gt[:, None]) <= 0.1 + 1e-12
    assert (near.sum(1) >= 7).all()
    with pytest.raises(ValueError):
        sample_rays(pix, f.gt_pose, K, gt, [0, 0], 7, 5, 6.0, 0.1, 0.1, rng)


def test_hole_pixels_get_stratified_samples(frames, K):
    rays = sample_ray([5, 5], frames[0].gt_pose, K, 0.0, 3, 3, 0.1, 4.0, 0.1, np.random.default_rng(1))
    d = rays.depths.numpy()[0]
    assert d.min() >= 0.1 and d.max() <= 4.0
    assert rays.gt_depth.item() == 0.0


def test_render_modes_shapes(field, ref, frames, K):
    f = frames[0]
    pix = np.array([[10, 10], [40, 30], [70, 50]])
    gt = f.depth[pix[:, 1], pix[:, 0]]
    cls = f.semantic[pix[:, 1], pix[:, 0]]
    rays = sample_rays(pix, f.gt_pose, K, gt, cls, 4, 3, 0.1, 6.0, 0.1, np.random.default_rng(0))
    for mode in ("fine", "coarse"):
        out = render_rays(field, rays, [ref], mode)
        assert out.color.shape == (3, 3) and out.depth.shape == (3,)
        assert out.logits.shape == (3, len(field.class_ids))
        assert out.weights.shape == (3, 7)
        assert (out.weights.sum(-1) <= 1 + 1e-12).all()
    with pytest.raises(ValueError):
        render_rays(field, rays, [ref], "medium")


def test_fine_mode_uses_the_pixel_class_head(field, ref, frames, K):
    f = frames[0]
    pix = np.array([[10, 10]])
    gt = f.depth[10:11, 10]
    a = sample_rays(pix, f.gt_pose, K, gt, [0], 4, 3, 0.1, 6.0, 0.1, np.random.default_rng(0))
    b = RaySamples(a.origins, a.directions, a.depths, a.gt_depth, a.pixels, np.array([1]))
    oa = render_rays(field, a, [ref]).occupancy
    ob = render_rays(field, b, [ref]).occupancy
    x = a.points().reshape(-1, 3)
    assert torch.allclose(oa[0], field.eval_geometry(0, x)[1])
    assert torch.allclose(ob[0], field.eval_geometry(1, x)[1])


def test_merged_mode_takes_the_most_occupied_head(field, ref, frames, K):
    f = frames[0]
    pix = np.array([[10, 10], [60, 40]])
    gt = f.depth[pix[:, 1], pix[:, 0]]
    rays = sample_rays(pix, f.gt_pose, K, gt, [0, 0], 4, 3, 0.1, 6.0, 0.1, np.random.default_rng(0))
    merged = render_rays(field, rays, [ref], "merged").occupancy.reshape(-1)
    x = rays.points().reshape(-1, 3)
    best = torch.stack([field.eval_geometry(c, x)[1] for c in field.class_ids]).max(0).values
    assert torch.allclose(merged, best)

    single = tiny_field(classes=(0,))
    fine = render_rays(single, rays, [ref], "fine")
    assert torch.equal(render_rays(single, rays, [ref], "merged").depth, fine.depth)
