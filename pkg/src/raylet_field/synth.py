"""Analytic oracle scenes: planes, spheres and box rooms with exact ray distances.

They supply ground-truth depth maps, point clouds sampled on their surfaces,
and :class:`OracleField`, a drop-in field that answers every raylet with
its exact signed distance to the first surface hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError
from .scene import Camera, GaussianSet, PointCloud, Ray


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = _unit(np.cross(n, a))
    return u, np.cross(n, u)


@dataclass(frozen=True)
class Plane:
    """Infinite plane; ``half_extent`` bounds the square patch used for sampling."""

    point: Tuple[float, float, float]
    normal: Tuple[float, float, float]
    half_extent: float = 1.0

    @property
    def n(self):
        return _unit(self.normal)

    def area(self):
        return (2 * self.half_extent) ** 2

    def intersect(self, o, d):
        n = self.n
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - o) @ n) / denom
        return np.where((t > 0) & (denom != 0), t, np.inf)

    def residual(self, x):
        return np.abs((x - np.asarray(self.point)) @ self.n)

    def normal_at(self, x):
        return np.broadcast_to(self.n, np.shape(x)).copy()

    def sample(self, n, rng):
        u, v = _basis(self.n)
        a = rng.uniform(-self.half_extent, self.half_extent, (n, 2))
        return np.asarray(self.point, dtype=np.float64) + a[:, :1] * u + a[:, 1:] * v


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float

    def area(self):
        return 4 * math.pi * self.radius**2

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def residual(self, x):
        return np.abs(np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius)

    def normal_at(self, x):
        v = x - np.asarray(self.center)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def sample(self, n, rng):
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v


@dataclass(frozen=True)
class BoxInterior:
    """The six faces of an axis-aligned box, normals pointing inward."""

    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]

    def _faces(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        for axis in range(3):
            for bound, sign in ((lo, 1.0), (hi, -1.0)):
                yield axis, bound[axis], sign

    def area(self):
        e = np.asarray(self.hi, float) - np.asarray(self.lo, float)
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        best = np.full(np.shape(o)[:-1], np.inf)
        tol = 1e-12 * (1 + np.max(np.abs(hi - lo)))
        for axis, val, _ in self._faces():
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (val - o[..., axis]) / d[..., axis]
                x = o + t[..., None] * d
            inside = np.all((x >= lo - tol) | (np.arange(3) == axis), axis=-1) & np.all(
                (x <= hi + tol) | (np.arange(3) == axis), axis=-1
            )
            ok = (t > 0) & inside & np.isfinite(t)
            best = np.where(ok & (t < best), t, best)
        return best

    def residual(self, x):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        tol = 1e-9
        r = np.minimum(np.abs(x - lo), np.abs(x - hi)).min(axis=-1)
        inside = np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
        return np.where(inside, r, np.inf)

    def normal_at(self, x):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        d = np.concatenate([np.abs(x - lo), np.abs(x - hi)], axis=-1)
        k = np.argmin(d, axis=-1)
        normals = np.concatenate([np.eye(3), -np.eye(3)])
        return normals[k]

    def sample(self, n, rng):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        faces = list(self._faces())
        e = hi - lo
        areas = np.array([np.prod(np.delete(e, ax)) for ax, _, _ in faces])
        which = rng.choice(len(faces), size=n, p=areas / areas.sum())
        pts = lo + rng.uniform(size=(n, 3)) * e
        for f, (ax, val, _) in enumerate(faces):
            pts[which == f, ax] = val
        return pts


Primitive = Union[Plane, Sphere, BoxInterior]


@dataclass(frozen=True)
class AnalyticScene:
    primitives: Tuple[Primitive, ...]

    def ray_distances(self, origins, directions) -> np.ndarray:
        """First positive hit distance per ray, ``inf`` on a miss."""
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(directions, dtype=np.float64)
        best = np.full(o.shape[:-1], np.inf)
        for p in self.primitives:
            best = np.minimum(best, p.intersect(o, d))
        return best

    def residual(self, x) -> np.ndarray:
        """Distance-like residual of the closest primitive's implicit equation."""
        x = np.asarray(x, dtype=np.float64)
        return np.min([p.residual(x) for p in self.primitives], axis=0)

    def normal_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        res = np.stack([p.residual(x) for p in self.primitives])
        k = np.argmin(res, axis=0)
        normals = np.stack([p.normal_at(x) for p in self.primitives])
        return np.take_along_axis(normals, k[None, ..., None], 0)[0]

    @property
    def centroid(self) -> np.ndarray:
        spheres = [p for p in self.primitives if isinstance(p, Sphere)]
        if spheres:
            return np.mean([s.center for s in spheres], axis=0)
        boxes = [p for p in self.primitives if isinstance(p, BoxInterior)]
        if boxes:
            return np.mean([(np.asarray(b.lo) + np.asarray(b.hi)) / 2 for b in boxes], axis=0)
        return np.mean([p.point for p in self.primitives], axis=0)

    def to_dict(self):
        out = []
        for p in self.primitives:
            if isinstance(p, Plane):
                out.append({"type": "plane", "point": list(p.point), "normal": list(p.normal), "half_extent": p.half_extent})
            elif isinstance(p, Sphere):
                out.append({"type": "sphere", "center": list(p.center), "radius": p.radius})
            else:
                out.append({"type": "box", "lo": list(p.lo), "hi": list(p.hi)})
        return {"primitives": out}

    @classmethod
    def from_dict(cls, data) -> "AnalyticScene":
        prims = []
        for p in data["primitives"]:
            kind = p["type"]
            if kind == "plane":
                prims.append(Plane(tuple(p["point"]), tuple(p["normal"]), p.get("half_extent", 1.0)))
            elif kind == "sphere":
                prims.append(Sphere(tuple(p["center"]), p["radius"]))
            elif kind == "box":
                prims.append(BoxInterior(tuple(p["lo"]), tuple(p["hi"])))
            else:
                raise InvalidParameterError(f"unknown primitive {kind!r}")
        return cls(tuple(prims))


def exact_ray_distance(scene: AnalyticScene, ray: Ray) -> Optional[float]:
    """First-hit distance along ``ray``, or ``None`` on a miss."""
    t = float(scene.ray_distances(ray.origin[None], ray.direction[None])[0])
    return t if math.isfinite(t) else None


# ---------------------------------------------------------------- preset scenes


def plane_scene(z: float = 2.0, half_extent: float = 2.0) -> AnalyticScene:
    return AnalyticScene((Plane((0.0, 0.0, z), (0.0, 0.0, -1.0), half_extent),))


def sphere_scene(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> AnalyticScene:
    return AnalyticScene((Sphere(tuple(center), radius),))


def box_scene(lo=(-1.5, -1.5, 0.0), hi=(1.5, 1.5, 2.4)) -> AnalyticScene:
    return AnalyticScene((BoxInterior(tuple(lo), tuple(hi)),))


def sphere_in_box(radius: float = 0.5, center=(0.0, 0.0, 0.8), lo=(-1.5, -1.5, 0.0), hi=(1.5, 1.5, 2.4)) -> AnalyticScene:
    """Indoor analogue: a ball floating inside a closed room."""
    return AnalyticScene((BoxInterior(tuple(lo), tuple(hi)), Sphere(tuple(center), radius)))


PRESETS = {"plane": plane_scene, "sphere": sphere_scene, "box": box_scene, "sphere_in_box": sphere_in_box}


# ---------------------------------------------------------------- sampling


def sample_points(scene: AnalyticScene, n: int, seed: int = 0) -> PointCloud:
    """``n`` points uniformly distributed by area over all primitives."""
    if n < 2:
        raise InvalidParameterError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    areas = np.array([p.area() for p in scene.primitives], dtype=np.float64)
    counts = rng.multinomial(n, areas / areas.sum())
    pts = [p.sample(c, rng) for p, c in zip(scene.primitives, counts) if c]
    return PointCloud(np.concatenate(pts))


def make_gaussians(scene: AnalyticScene, n: int, seed: int = 0, opacity: float = 0.9) -> GaussianSet:
    """Isotropic Gaussians on surface samples, scale = half the nearest-neighbour distance."""
    cloud = sample_points(scene, n, seed)
    p = cloud.positions
    d, _ = cKDTree(p).query(p, k=2)
    scale = np.maximum(d[:, 1] / 2.0, 1e-4)
    return GaussianSet(
        p, np.repeat(scale[:, None], 3, axis=1), np.tile([1.0, 0.0, 0.0, 0.0], (len(p), 1)), np.full(len(p), opacity)
    )


# ---------------------------------------------------------------- cameras and views


def default_intrinsics(width: int, height: int, fov_deg: float = 60.0):
    f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return f, f


def orbit_cameras(scene: AnalyticScene, count: int, radius: float, resolution=(160, 120), seed: int = 0,
                  target=None, elevation=(-20.0, 40.0), azimuth0: float = 0.0, fov_deg: float = 60.0,
                  jitter: float = 0.5) -> List[Camera]:
    """Cameras spaced around a circle of ``radius`` about ``target`` (default the scene centroid).

    Azimuths start at ``azimuth0`` degrees and are evenly spaced with seeded
    jitter; elevations are drawn uniformly from ``elevation`` (degrees).
    """
    if count < 1:
        raise InvalidParameterError("count must be >= 1")
    rng = np.random.default_rng(seed)
    target = scene.centroid if target is None else np.asarray(target, dtype=np.float64)
    W, H = resolution
    fx, fy = default_intrinsics(W, H, fov_deg)
    cams = []
    for i in range(count):
        az = math.radians(azimuth0) + 2 * math.pi * (i + (jitter * rng.uniform(-0.5, 0.5) if count > 1 else 0.0)) / count
        el = math.radians(rng.uniform(*elevation)) if count > 1 else math.radians(0.5 * (elevation[0] + elevation[1]))
        eye = target + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, target, fx, fy, W, H))
    return cams


def render_oracle_views(scene: AnalyticScene, cameras: Sequence[Camera]):
    """Exact ray-distance maps (``DepthMap``) for each camera."""
    from .render import DepthMap

    out = []
    for cam in cameras:
        o, d = cam.pixel_rays()
        D = scene.ray_distances(o, d)
        valid = np.isfinite(D)
        out.append(DepthMap(np.where(valid, D, 0.0).reshape(cam.height, cam.width), valid.reshape(cam.height, cam.width)))
    return out


class OracleField:
    """Field stub returning the exact signed distance from each raylet start to the first hit.

    The parent ray is recovered as ``start - t * direction``; the score is 0
    for every raylet, so softmax blending averages exact values. Where the
    parent ray misses every primitive (silhouettes of the ball union) the
    stub answers ``d = 0``.
    """

    blend_mode = "softmax"

    def __init__(self, scene: AnalyticScene):
        self.scene = scene

    def predict(self, origins, directions, t, sources=None):
        D = self.scene.ray_distances(origins, directions)
        d = np.where(np.isfinite(D), D - t, 0.0)
        return d, np.zeros_like(t)
