import math

import numpy as np
import pytest
import torch

from dnsslam.data import default_intrinsics, default_scene, generate_frames, toy_orbit
from dnsslam.field import FieldConfig, RefView, SceneField


def tiny_field_config(**kw) -> FieldConfig:
    base = dict(levels=3, base_resolution=4, finest_voxel=0.4, table_size=2**10, bins=4, latent_dim=4, hidden=8,
                image_channels=4, ref_dim=4)
    return FieldConfig(**{**base, **kw})


def tiny_field(classes=(0, 1, 2, 3, 4), **kw) -> SceneField:
    f = SceneField(tiny_field_config(**kw))
    for c in classes:
        f.add_class(c)
    f.warming.clear()
    return f


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def K():
    return default_intrinsics()


@pytest.fixture(scope="session")
def frames(scene, K):
    return generate_frames(scene, toy_orbit(6), K)


@pytest.fixture
def field():
    return tiny_field()


@pytest.fixture
def ref(field, frames, K):
    f0 = frames[0]
    return RefView(field.feature_map(f0.rgb), f0.gt_pose, K)


def rng(seed=0):
    return np.random.default_rng(seed)


def perturb(pose, cm: float, deg: float, seed: int):
    """``pose`` moved by exactly ``cm`` centimetres and rotated by ``deg`` degrees about random axes."""
    from dnsslam.geometry import Pose, compose, se3_exp

    g = np.random.default_rng(seed)
    axis = g.normal(size=3)
    axis /= np.linalg.norm(axis)
    step = g.normal(size=3)
    step *= cm / 100 / np.linalg.norm(step)
    rot = se3_exp(torch.as_tensor(np.r_[axis * math.radians(deg), 0, 0, 0]))
    moved = compose(pose, rot)
    return Pose(moved.quat, moved.trans + torch.as_tensor(step, dtype=moved.trans.dtype))


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
