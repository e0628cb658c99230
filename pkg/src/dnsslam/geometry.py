"""Pinhole camera model and SE(3) poses.

Poses are camera-to-world transforms stored as a unit quaternion ``(x, y, z, w)``
plus a translation. Everything is expressed with torch tensors so that a pose
built with :func:`apply_delta` stays differentiable with respect to the twist.

Pixel coordinates are continuous with ``(0, 0)`` at the centre of the top-left
pixel. Ray directions are *not* normalised: a direction has unit z in camera
coordinates, so the sample parameter along a ray is z-depth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "Intrinsics",
    "Pose",
    "CameraError",
    "project",
    "backproject",
    "transform_point",
    "compose",
    "inverse",
    "apply_delta",
    "constant_speed_guess",
    "so3_exp",
    "so3_log",
    "se3_exp",
    "se3_log",
    "quat_to_matrix",
    "matrix_to_quat",
    "pixel_rays",
]

_SMALL = 1e-4  # squared angle below which Taylor series are used


class CameraError(ValueError):
    """Raised for points behind the camera or non-positive depths."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_tuple(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    dtype = like.dtype if like is not None else torch.float64
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _skew(v: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros_like(v[..., 0])
    return torch.stack(
        [
            torch.stack([zero, -v[..., 2], v[..., 1]], -1),
            torch.stack([v[..., 2], zero, -v[..., 0]], -1),
            torch.stack([-v[..., 1], v[..., 0], zero], -1),
        ],
        -2,
    )


def _safe_theta(theta2: torch.Tensor) -> torch.Tensor:
    # sqrt with a floor so the unused branch of torch.where has finite gradients
    return torch.sqrt(torch.clamp(theta2, min=_SMALL))


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    x, y, z, w = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def matrix_to_quat(R) -> torch.Tensor:
    """Rotation matrix to unit quaternion (x, y, z, w) with w >= 0 (not differentiable)."""
    m = np.asarray(R.detach().cpu() if isinstance(R, torch.Tensor) else R, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    q = np.array(q)
    if q[3] < 0:
        q = -q
    return torch.as_tensor(q / np.linalg.norm(q), dtype=torch.float64)


def _quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ax, ay, az, aw = a.unbind(-1)
    bx, by, bz, bw = b.unbind(-1)
    return torch.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        -1,
    )


def _axis_angle_to_quat(omega: torch.Tensor) -> torch.Tensor:
    theta2 = (omega * omega).sum(-1)
    theta = _safe_theta(theta2)
    # sin(theta/2)/theta and cos(theta/2)
    s = torch.where(theta2 < _SMALL, 0.5 - theta2 / 48.0 + theta2**2 / 3840.0, torch.sin(theta / 2) / theta)
    c = torch.where(theta2 < _SMALL, 1.0 - theta2 / 8.0 + theta2**2 / 384.0, torch.cos(theta / 2))
    return torch.cat([omega * s[..., None], c[..., None]], -1)


def so3_exp(omega) -> torch.Tensor:
    """Axis-angle vector to rotation matrix."""
    omega = _as_tensor(omega)
    return quat_to_matrix(_axis_angle_to_quat(omega))


def so3_log(R) -> torch.Tensor:
    q = matrix_to_quat(R)
    v, w = q[:3], q[3]
    n = torch.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v / w
    return 2.0 * torch.atan2(n, w) * v / n


def _left_jacobian(omega: torch.Tensor) -> torch.Tensor:
    theta2 = (omega * omega).sum(-1)
    theta = _safe_theta(theta2)
    b = torch.where(
        theta2 < _SMALL,
        0.5 - theta2 / 24.0 + theta2**2 / 720.0,
        (1 - torch.cos(theta)) / (theta * theta),
    )
    c = torch.where(
        theta2 < _SMALL,
        1.0 / 6.0 - theta2 / 120.0 + theta2**2 / 5040.0,
        (theta - torch.sin(theta)) / (theta**3),
    )
    K = _skew(omega)
    eye = torch.eye(3, dtype=omega.dtype)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    quat: torch.Tensor  # (x, y, z, w)
    trans: torch.Tensor

    @staticmethod
    def identity(dtype=torch.float64) -> "Pose":
        return Pose(torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=dtype), torch.zeros(3, dtype=dtype))

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T.detach() if isinstance(T, torch.Tensor) else T, dtype=np.float64)
        return Pose(matrix_to_quat(T[:3, :3]), torch.as_tensor(T[:3, 3].copy()))

    @staticmethod
    def from_quat_trans(quat, trans) -> "Pose":
        q = _as_tensor(quat)
        return Pose(q / torch.linalg.norm(q), _as_tensor(trans))

    def rotation(self) -> torch.Tensor:
        return quat_to_matrix(self.quat)

    def matrix(self) -> torch.Tensor:
        T = torch.eye(4, dtype=self.trans.dtype)
        T = T.clone()
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.trans
        return T

    def detach(self) -> "Pose":
        return Pose(self.quat.detach().clone(), self.trans.detach().clone())

    def numpy(self) -> np.ndarray:
        return self.matrix().detach().cpu().numpy()

    def to(self, dtype) -> "Pose":
        return Pose(self.quat.to(dtype), self.trans.to(dtype))


def transform_point(pose: Pose, point) -> torch.Tensor:
    """Apply ``R @ p + t`` to one point or a batch of points (..., 3)."""
    p = _as_tensor(point, pose.trans)
    return p @ pose.rotation().transpose(-1, -2) + pose.trans


def compose(a: Pose, b: Pose) -> Pose:
    """Transform that applies ``b`` first and then ``a``."""
    q = _quat_mul(a.quat, b.quat)
    q = q / torch.linalg.norm(q)
    return Pose(q, a.rotation() @ b.trans + a.trans)


def inverse(pose: Pose) -> Pose:
    qi = pose.quat * torch.tensor([-1.0, -1.0, -1.0, 1.0], dtype=pose.quat.dtype)
    return Pose(qi, -(quat_to_matrix(qi) @ pose.trans))


def se3_exp(twist) -> Pose:
    """Twist ``(omega, rho)`` to a pose; rotation part first."""
    twist = _as_tensor(twist)
    omega, rho = twist[..., :3], twist[..., 3:]
    q = _axis_angle_to_quat(omega)
    return Pose(q, _left_jacobian(omega) @ rho)


def se3_log(pose: Pose) -> torch.Tensor:
    omega = so3_log(pose.rotation())
    rho = torch.linalg.solve(_left_jacobian(omega.to(pose.trans.dtype)), pose.trans)
    return torch.cat([omega.to(pose.trans.dtype), rho])


def apply_delta(pose: Pose, delta) -> Pose:
    """Left-multiplied local update ``exp(delta) o pose``, renormalised."""
    delta = _as_tensor(delta, pose.trans)
    return compose(se3_exp(delta), pose)


def constant_speed_guess(pose_prev: Pose, pose_prev2: Pose) -> Pose:
    """Extrapolate the last relative motion one more step."""
    step = compose(pose_prev, inverse(pose_prev2))
    return compose(step, pose_prev)


def project(point_cam, K: Intrinsics) -> torch.Tensor:
    p = _as_tensor(point_cam)
    z = p[..., 2]
    if bool((z <= 0).any()):
        raise CameraError("point is behind the camera (non-positive depth)")
    return torch.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], -1)


def backproject(pixel, depth, K: Intrinsics) -> torch.Tensor:
    uv = _as_tensor(pixel)
    d = _as_tensor(depth, uv)
    if bool((d <= 0).any()):
        raise CameraError("depth must be positive")
    x = (uv[..., 0] - K.cx) / K.fx
    y = (uv[..., 1] - K.cy) / K.fy
    return torch.stack([x * d, y * d, d * torch.ones_like(x)], -1)


def pixel_rays(pose: Pose, K: Intrinsics, pixels) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space origins and unnormalised directions (unit camera z) for pixels (N, 2)."""
    uv = _as_tensor(pixels, pose.trans)
    dirs_cam = torch.stack(
        [(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, torch.ones_like(uv[:, 0])], -1
    )
    dirs = dirs_cam @ pose.rotation().transpose(0, 1)
    origins = pose.trans.expand_as(dirs)
    return origins, dirs
