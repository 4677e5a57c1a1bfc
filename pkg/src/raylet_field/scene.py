"""Geometric domain types: point clouds, Gaussians, pinhole cameras, rays and raylets.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` (batches ``(N, 3)``) in
world-space meters. Cameras follow the OpenCV axis convention: ``+x`` right,
``+y`` down, ``+z`` forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidParameterError, PixelRangeError


def _as_vec3(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,):
        raise InvalidParameterError(f"{name} must have 3 components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidParameterError(f"{name} must be finite")
    return a


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(q)):
        raise InvalidParameterError("quaternion must be finite and non-zero")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def build_covariance(scale, rotation) -> np.ndarray:
    """Return ``R diag(scale**2) R^T`` for a scale 3-vector and (w, x, y, z) quaternion.

    Works on single Gaussians or stacked ``(N, 3)`` / ``(N, 4)`` batches.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
        raise InvalidParameterError("Gaussian scales must be positive and finite")
    R = quaternion_to_rotation(rotation)
    M = R * scale[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    # exact symmetry regardless of rounding in the product above
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin, "ray origin")
        d = _as_vec3(self.direction, "ray direction")
        n = np.linalg.norm(d)
        if n == 0:
            raise InvalidParameterError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Raylet:
    """A ray segment starting near a surface.

    ``start`` equals ``parent_origin + t_start * direction``; ``source_index``
    names the virtual ball or Gaussian that produced it.
    """

    start: np.ndarray
    direction: np.ndarray
    t_start: float
    source_index: int

    @classmethod
    def on_ray(cls, ray: Ray, t: float, source_index: int) -> "Raylet":
        return cls(ray.at(t), ray.direction, float(t), int(source_index))

    def as_vector(self) -> np.ndarray:
        """The 6-vector (start, direction) fed to the field."""
        return np.concatenate([self.start, self.direction])


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray
    attributes: Optional[np.ndarray] = None
    attribute_names: Tuple[str, ...] = ()
    ball_radii: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise InvalidParameterError(f"positions must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidParameterError("positions must be finite")
        object.__setattr__(self, "positions", p)
        if self.attributes is not None:
            a = np.asarray(self.attributes, dtype=np.float64)
            if a.ndim == 1:
                a = a[:, None]
            if a.shape[0] != len(p):
                raise InvalidParameterError("attribute rows must match point count")
            object.__setattr__(self, "attributes", a)
        if self.ball_radii is not None:
            r = np.asarray(self.ball_radii, dtype=np.float64)
            if r.shape != (len(p),) or np.any(r <= 0):
                raise InvalidParameterError("ball radii must be positive, one per point")
            object.__setattr__(self, "ball_radii", r)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale, self.rotation)


@dataclass(frozen=True)
class GaussianSet:
    """Structure-of-arrays storage for a 3D Gaussian scene.

    Quaternions are normalized on construction. ``rotations_matrix`` and
    ``covariances`` are cached derived values.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    attributes: Optional[np.ndarray] = None
    attribute_names: Tuple[str, ...] = ()
    rotations_matrix: np.ndarray = field(init=False, repr=False, compare=False)
    covariances: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        if n == 0:
            raise InvalidParameterError("a GaussianSet must be non-empty")
        s = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(n, 3)
        q = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        o = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise InvalidParameterError("Gaussian scales must be positive and finite")
        if np.any(o < 0) or np.any(o > 1):
            raise InvalidParameterError("opacities must lie in [0, 1]")
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(qn == 0):
            raise InvalidParameterError("zero quaternion")
        q = q / qn
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "rotations", q)
        object.__setattr__(self, "opacities", o)
        if self.attributes is not None:
            a = np.asarray(self.attributes, dtype=np.float64).reshape(n, -1)
            object.__setattr__(self, "attributes", a)
        object.__setattr__(self, "rotations_matrix", quaternion_to_rotation(q))
        object.__setattr__(self, "covariances", build_covariance(s, q))

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i], self.scales[i], self.rotations[i], float(self.opacities[i]))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianSet":
        return cls(
            np.array([g.mean for g in gaussians]),
            np.array([g.scale for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-from-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidParameterError("image size must be positive")
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidParameterError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _as_vec3(self.translation, "translation"))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def world_from_camera(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def camera_from_world(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.T
        M[:3, 3] = -self.rotation.T @ self.translation
        return M

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, world_from_camera) -> "Camera":
        M = np.asarray(world_from_camera, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, width, height, M[:3, :3], M[:3, 3])

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with principal point at the image center."""
        eye = _as_vec3(eye, "eye")
        z = _as_vec3(target, "target") - eye
        z /= np.linalg.norm(z)
        up = _as_vec3(up, "up")
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        return cls(fx, fy, width / 2.0, height / 2.0, width, height, R, eye)

    def camera_directions(self, uv) -> np.ndarray:
        """Unnormalized camera-frame directions for continuous pixel coordinates."""
        uv = np.asarray(uv, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def directions(self, uv) -> np.ndarray:
        """Unit world-space directions for an ``(..., 2)`` array of pixel coordinates."""
        d = self.camera_directions(uv) @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_centers(self) -> np.ndarray:
        """``(H*W, 2)`` continuous coordinates ``(u + 0.5, v + 0.5)``, row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)

    def pixel_rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions of every pixel-center ray, row-major."""
        d = self.directions(self.pixel_centers())
        return np.broadcast_to(self.center, d.shape).copy(), d

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def project(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and camera-frame depth z."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z


def generate_ray(camera: Camera, pixel) -> Ray:
    """Ray from the camera center through continuous pixel coordinates ``(u, v)``."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise PixelRangeError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    return Ray(camera.center, camera.directions(np.array([u, v])))


def _direction_of(d):
    return d.direction if isinstance(d, Ray) else np.asarray(d, dtype=np.float64)


def distance_to_depth(D, direction, camera: Camera):
    """Convert ray-surface distance to camera z-depth; ``direction`` is a unit vector or a :class:`Ray`."""
    D = np.asarray(D, dtype=np.float64)
    if np.any(D <= 0):
        raise InvalidParameterError("ray distance must be positive")
    cos = _direction_of(direction) @ camera.forward
    return D * cos


def depth_to_distance(z, direction, camera: Camera):
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidParameterError("depth must be positive")
    cos = _direction_of(direction) @ camera.forward
    return z / cos
