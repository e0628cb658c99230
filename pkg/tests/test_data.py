import math

import numpy as np
import pytest
import torch

from dnsslam.data import (DatasetError, Frame, Primitive, default_intrinsics, default_scene, generate_frames,
                          load_dataset, look_at, orbit_trajectory, pose_close, raycast_scene, read_tum,
                          scene_from_dict, scene_to_dict, toy_orbit, write_dump, write_tum)
from dnsslam.geometry import Intrinsics, Pose


def test_raycast_depth_against_analytic_floor(scene):
    K = Intrinsics(50.0, 50.0, 15.5, 11.5, 32, 24)
    pose = look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    f = raycast_scene(scene, pose, K)
    assert f.depth.shape == (24, 32)
    # the box and sphere are off-centre; the principal ray hits the floor one metre below
    c = f.depth[11:13, 15:17]
    assert np.allclose(c, 1.0, atol=1e-9)
    assert (f.semantic[11:13, 15:17] == 1).all()


def test_sphere_depth_matches_closed_form():
    K = Intrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)
    scene = default_scene()
    sph = scene.primitives[1]
    eye = np.asarray(sph.center) + np.array([0.0, 0.0, 1.0])
    pose = look_at(eye, sph.center, up=(0.0, 1.0, 0.0))
    f = raycast_scene(scene, pose, K)
    d = f.depth[15:17, 15:17]
    r = sph.size[0]
    # the four central pixels are half a pixel off axis, so the hit is a hair behind the pole
    assert np.all(np.abs(d - (1.0 - r)) < 2e-3)
    assert (f.semantic[15:17, 15:17] == 4).all()


def test_orbit_is_evenly_spaced():
    poses = orbit_trajectory((0, 0, 0), 1.0, 8, arc=math.pi)
    steps = [np.linalg.norm(poses[i + 1].trans - poses[i].trans) for i in range(7)]
    assert np.allclose(steps, steps[0])
    assert len(toy_orbit()) == 20


def test_frame_validation():
    f = Frame(np.zeros((2, 2, 3)), np.ones((2, 2)), np.zeros((2, 2), dtype=int))
    f.validate([0])
    with pytest.raises(DatasetError):
        f.validate([1])
    bad = Frame(np.zeros((2, 2, 3)), -np.ones((2, 2)), np.zeros((2, 2), dtype=int))
    with pytest.raises(DatasetError):
        bad.validate()
    with pytest.raises(ValueError):
        Primitive("cone", (0, 0, 0), (1,), 0, (1, 1, 1))


def test_tum_roundtrip(tmp_path):
    poses = toy_orbit(3)
    write_tum(tmp_path / "t.txt", [0.0, 0.1, 0.2], poses)
    back = read_tum(tmp_path / "t.txt")
    for (ts, p), q in zip(back, poses):
        dt, dr = pose_close(p, q)
        assert dt < 1e-6 and dr < 1e-6


def test_dump_roundtrip(tmp_path, frames, K, scene):
    write_dump(frames[:3], K, tmp_path, scene=scene)
    ds = load_dataset(tmp_path)
    assert len(ds.frames) == 3 and ds.K == K
    assert ds.gt_trajectory is not None
    for a, b in zip(ds.frames, frames):
        assert np.array_equal(a.semantic, b.semantic)
        assert np.abs(a.depth - b.depth).max() <= 0.5e-3 + 1e-9
        a.validate(scene.class_ids())
    assert scene_from_dict(scene_to_dict(scene)) == scene


def test_missing_dataset(tmp_path):
    with pytest.raises((DatasetError, OSError)):
        load_dataset(tmp_path)
    with pytest.raises(ValueError):
        load_dataset(tmp_path, layout="nope")


def test_generation_is_deterministic(scene, K):
    a = generate_frames(scene, toy_orbit(2), K)
    b = generate_frames(scene, toy_orbit(2), K)
    assert all(np.array_equal(x.rgb, y.rgb) and np.array_equal(x.depth, y.depth) for x, y in zip(a, b))
