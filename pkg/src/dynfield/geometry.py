"""Pinhole camera model: world-to-image projection, per-pixel ray
generation, and stratified depth sampling along rays.

All geometry math runs in float64 regardless of the active numeric profile;
callers cast at the tensor boundary. Poses store the world-to-camera
transform; the camera-to-world form is derived where needed, never stored.
Continuous image coordinates use the pixel-center convention: integer pixel
(u, v) covers [u, u+1) x [v, v+1) and its center is (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dynfield import diffmath as dm
from dynfield.diffmath import DTensor

_MIN_DEPTH = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: p_cam = R @ p_world + T."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        T = np.asarray(self.T, dtype=np.float64)
        if R.shape != (3, 3) or T.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and 3-vector, got {R.shape}, {T.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("pose rotation is not orthonormal (RtR differs from I by > 1e-6)")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError(f"pose rotation must have determinant +1, got {np.linalg.det(R)}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    def camera_center(self) -> np.ndarray:
        return -self.R.T @ self.T


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    z_near: float
    z_far: float

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64)
        direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        if not (0 < self.z_near < self.z_far):
            raise ValueError(f"need 0 < z_near < z_far, got [{self.z_near}, {self.z_far}]")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True)
class ImageCoord:
    u: float
    v: float


def project_point(p, K: Intrinsics, pose: Pose) -> tuple[ImageCoord, float, bool]:
    """Project one world point; the flag is False at or behind the camera plane."""
    uv, z, valid = project_points(np.asarray(p, dtype=np.float64)[None, :], K, pose)
    return ImageCoord(float(uv[0, 0]), float(uv[0, 1])), float(z[0]), bool(valid[0])


def project_points(points: np.ndarray, K: Intrinsics, pose: Pose
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection of (P, 3) world points.

    Returns continuous pixel coordinates (P, 2) as (u, v), camera depth
    (P,), and a validity mask; coordinates of invalid points are computed
    against a depth floor so the output stays finite, but only the mask
    should decide whether a point is usable.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"expected (P, 3) points, got {points.shape}")
    cam = points @ pose.R.T + pose.T
    z = cam[:, 2]
    valid = z > _MIN_DEPTH
    safe_z = np.maximum(z, _MIN_DEPTH)
    u = K.fx * cam[:, 0] / safe_z + K.cx
    v = K.fy * cam[:, 1] / safe_z + K.cy
    return np.stack([u, v], axis=1), z, valid


def project_points_diff(points: DTensor, K: Intrinsics, pose: Pose
                        ) -> tuple[DTensor, DTensor]:
    """Projection through the autodiff graph: (P, 3) -> ((P, 2) uv, (P, 1) z).

    All points must be strictly in front of the camera; the reciprocal of
    depth is taken as exp(-log z), which requires z > 0.
    """
    dtype = points.dtype
    r_t = DTensor(np.asarray(pose.R.T, dtype=dtype))
    t = DTensor(np.asarray(pose.T, dtype=dtype))
    cam = dm.add(dm.matmul(points, r_t), t)
    x = dm.slice_axis(cam, 1, 0, 1)
    y = dm.slice_axis(cam, 1, 1, 2)
    z = dm.slice_axis(cam, 1, 2, 3)
    inv_z = dm.exp(dm.mul(dm.log(z), -1.0))
    u = dm.add(dm.mul(dm.mul(x, inv_z), float(K.fx)), float(K.cx))
    v = dm.add(dm.mul(dm.mul(y, inv_z), float(K.fy)), float(K.cy))
    return dm.concat([u, v], axis=1), z


def generate_rays(K: Intrinsics, pose: Pose, pixel: tuple[int, int],
                  bounds: tuple[float, float]) -> Ray:
    """Ray through the center of integer pixel (u, v)."""
    origins, dirs = generate_rays_batch(K, pose, np.asarray([pixel], dtype=np.int64))
    return Ray(origins[0], dirs[0], bounds[0], bounds[1])


def generate_rays_batch(K: Intrinsics, pose: Pose, pixels: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Rays for (R, 2) integer pixels as (u, v); returns origins and unit directions."""
    pixels = np.asarray(pixels)
    center = pose.camera_center()
    x = (pixels[:, 0] + 0.5 - K.cx) / K.fx
    y = (pixels[:, 1] + 0.5 - K.cy) / K.fy
    cam_dirs = np.stack([x, y, np.ones_like(x, dtype=np.float64)], axis=1)
    world_dirs = cam_dirs @ pose.R  # == (R^T @ d) per ray
    world_dirs /= np.linalg.norm(world_dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(center, world_dirs.shape).copy()
    return origins, world_dirs


def stratified_samples(ray: Ray, n_samples: int, jitter: bool = False,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Depths t_1..t_n along one ray; see sample_depths for the batched form."""
    return sample_depths(ray.z_near, ray.z_far, n_samples, 1, jitter, rng)[0]


def sample_depths(z_near: float, z_far: float, n_samples: int, n_rays: int,
                  jitter: bool = False, rng: np.random.Generator | None = None
                  ) -> np.ndarray:
    """(R, n) strictly increasing depths, one value per equal-width bin.

    Bin i spans [z_near + i*delta, z_near + (i+1)*delta) with
    delta = (z_far - z_near) / n. Without jitter each t_i is the bin
    midpoint; with jitter it is drawn uniformly inside the bin.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n_samples}")
    delta = (z_far - z_near) / n_samples
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an explicit generator")
        offsets = rng.random((n_rays, n_samples))
    else:
        offsets = np.full((n_rays, n_samples), 0.5)
    return z_near + (np.arange(n_samples) + offsets) * delta
