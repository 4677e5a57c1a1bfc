"""Per-view rendering of ray-distance and normal maps from a scene and a field.

A *field* is any object with ``predict(origins, directions, t, sources)``
returning per-raylet ``(d, s)`` arrays and a ``blend_mode`` attribute; both
:class:`~raylet_field.field.RayletFieldModel` and the analytic
:class:`~raylet_field.synth.OracleField` qualify.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .field import blend_distance
from .sampling import CandidateBatch, SceneModel, build_tile_index, frozen_candidates
from .scene import Camera

MIN_DISTANCE = 1e-6
NORMAL_STEP = 1e-4


@dataclass
class DepthMap:
    """Ray-surface distances (H, W) with a validity mask; invalid pixels hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ShapeError("depth values and mask must be matching 2D arrays")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def to_z_depth(self, camera: Camera) -> np.ndarray:
        """Camera z-depth per pixel (0 where invalid)."""
        d = camera.directions(camera.pixel_centers()).reshape(self.height, self.width, 3)
        return np.where(self.valid, self.values * (d @ camera.forward), 0.0)

    @classmethod
    def from_z_depth(cls, z, camera: Camera) -> "DepthMap":
        z = np.asarray(z, dtype=np.float64)
        d = camera.directions(camera.pixel_centers()).reshape(z.shape + (3,))
        valid = np.isfinite(z) & (z > 0)
        return cls(np.where(valid, z / (d @ camera.forward), 0.0), valid)


@dataclass
class NormalMap:
    normals: np.ndarray
    valid: np.ndarray

    @property
    def height(self):
        return self.normals.shape[0]

    @property
    def width(self):
        return self.normals.shape[1]


def _blend_rays(field, origins, directions, cand_t, index, mask, mode=None):
    rows, cols = np.nonzero(mask)
    R, T = mask.shape
    t = cand_t[rows, cols]
    o, d = origins[rows], directions[rows]
    dd, ss = field.predict(o, d, t, index[rows, cols])
    starts = o + t[:, None] * d
    values = np.zeros((R, T))
    scores = np.zeros((R, T))
    values[rows, cols] = np.linalg.norm(starts - o, axis=1) + dd
    scores[rows, cols] = ss
    D, _ = blend_distance(values, scores, mask, mode or field.blend_mode, cand_t)
    return D


def pixel_candidates(scene: SceneModel, camera: Camera, T: int, tile_px: int = 16) -> CandidateBatch:
    return build_tile_index(camera, scene, tile_px).pixel_candidates(T)


def render_distance(scene: SceneModel, field, camera: Camera, T_test: int, tile_px: int = 16,
                    candidates: Optional[CandidateBatch] = None) -> DepthMap:
    """Blend up to ``T_test`` raylets per pixel; pixels without candidates are invalid."""
    layout = getattr(field, "layout", None)
    if layout is not None and getattr(field, "scene", scene) is not scene and len(field.scene) != len(scene):
        raise ShapeError("field was built for a different scene")
    cand = candidates if candidates is not None else pixel_candidates(scene, camera, T_test, tile_px)
    if cand.T > T_test:
        cand = cand.truncated(T_test)
    o, d = camera.pixel_rays()
    D = _blend_rays(field, o, d, cand.t, cand.index, cand.mask)
    valid = cand.count > 0
    D = np.where(valid, np.maximum(np.nan_to_num(D, nan=MIN_DISTANCE), MIN_DISTANCE), 0.0)
    return DepthMap(D.reshape(camera.height, camera.width), valid.reshape(camera.height, camera.width))


# ---------------------------------------------------------------- normals


def spherical_angles(dir_cam: np.ndarray):
    """(theta, phi) with direction = (sin t cos p, cos t, sin t sin p) in the camera frame."""
    theta = np.arccos(np.clip(dir_cam[..., 1], -1.0, 1.0))
    phi = np.arctan2(dir_cam[..., 2], dir_cam[..., 0])
    return theta, phi


def spherical_direction(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1)


def spherical_point(D, theta, phi):
    """Surface point relative to the camera center in the camera-aligned spherical frame."""
    return np.asarray(D)[..., None] * spherical_direction(theta, phi)


def normal_from_derivatives(D, dD_dtheta, dD_dphi, theta, phi):
    """Unit normal from the cross product of the surface tangents in (phi, theta)."""
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    d_phi = np.stack([(dD_dphi * cp - D * sp) * st, dD_dphi * ct, (dD_dphi * sp + D * cp) * st], axis=-1)
    d_theta = np.stack([(dD_dtheta * st + D * ct) * cp, dD_dtheta * ct - D * st, (dD_dtheta * st + D * ct) * sp], axis=-1)
    n = np.cross(d_phi, d_theta)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def derive_normals(scene: SceneModel, field, camera: Camera, origins, directions, cand: CandidateBatch, step: float = NORMAL_STEP):
    """World-space unit normals for rays with candidates, plus a stability mask.

    The candidate set of each ray is frozen; the ray is rotated by +-``step``
    radians in theta and phi, the same primitives are re-intersected and the
    blended distance is differenced centrally. A probe on which any frozen
    primitive stops qualifying marks the ray unstable.
    """
    R = len(origins)
    mask = cand.mask
    dir_cam = directions @ camera.rotation
    theta, phi = spherical_angles(dir_cam)
    D0 = _blend_rays(field, origins, directions, cand.t, cand.index, mask)
    stable = cand.count > 0
    probes = {}
    for name, dth, dph in (("t+", step, 0), ("t-", -step, 0), ("p+", 0, step), ("p-", 0, -step)):
        dirs = spherical_direction(theta + dth, phi + dph) @ camera.rotation.T
        t, ok = frozen_candidates(scene, origins, dirs, cand.index, mask)
        stable &= ok
        probes[name] = _blend_rays(field, origins, dirs, t, cand.index, mask)
    dD_dtheta = (probes["t+"] - probes["t-"]) / (2 * step)
    dD_dphi = (probes["p+"] - probes["p-"]) / (2 * step)
    n_cam = normal_from_derivatives(D0, dD_dtheta, dD_dphi, theta, phi)
    n = n_cam @ camera.rotation.T
    flip = np.sum(n * directions, axis=1) > 0
    n[flip] *= -1
    stable &= np.all(np.isfinite(n), axis=1)
    return np.where(stable[:, None], n, 0.0), stable


def analytic_normal(scene: SceneModel, field, camera: Camera, pixel, T: int = 5, step: float = NORMAL_STEP):
    """Normal at one continuous pixel coordinate, or ``None`` when unstable or discarded."""
    uv = np.asarray(pixel, dtype=np.float64).reshape(1, 2)
    d = camera.directions(uv)
    o = camera.center[None]
    cand = scene.candidates(o, d, T)
    n, ok = derive_normals(scene, field, camera, o, d, cand, step)
    return n[0] if ok[0] else None


def render_normals(scene: SceneModel, field, camera: Camera, T_test: int, tile_px: int = 16,
                   step: float = NORMAL_STEP, candidates: Optional[CandidateBatch] = None) -> NormalMap:
    cand = candidates if candidates is not None else pixel_candidates(scene, camera, T_test, tile_px)
    if cand.T > T_test:
        cand = cand.truncated(T_test)
    o, d = camera.pixel_rays()
    n, ok = derive_normals(scene, field, camera, o, d, cand, step)
    H, W = camera.height, camera.width
    return NormalMap(n.reshape(H, W, 3), ok.reshape(H, W))


def angular_error_deg(a, b) -> np.ndarray:
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))
