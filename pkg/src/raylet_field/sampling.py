"""Raylet candidate sampling on virtual balls and 3D Gaussians.

Two routes produce candidates for a batch of rays:

* the exhaustive scan, which tests every primitive against every ray, and
* :class:`TileIndex`, which bins primitives into screen tiles of one camera
  and tests each pixel ray only against the primitives registered in its tile.

Both routes share the per-(ray, primitive) kernels below, so they compute
bit-identical keys and differ only in which primitives they visit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGaussianError,
    DegenerateRadiusError,
    InsufficientPointsError,
    InvalidParameterError,
)
from .scene import Camera, GaussianSet, PointCloud, Ray, Raylet

log = logging.getLogger(__name__)

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
MAX_CONDITION = 1e12

# pairs evaluated per kernel call; bounds peak memory of the dense blocks
_PAIR_BUDGET = 1 << 21


@dataclass(frozen=True)
class VirtualBallSet:
    centers: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return len(self.centers)


@dataclass(frozen=True)
class RayletCandidate:
    raylet: Raylet
    rank_key: float
    source_index: int


@dataclass
class CandidateBatch:
    """Top-T candidates for R rays, padded with ``index == -1``.

    ``key`` is the perpendicular distance (balls) or alpha-blending
    contribution (Gaussians). Valid entries occupy the first ``count[r]``
    columns of each row, in rank order.
    """

    index: np.ndarray
    t: np.ndarray
    key: np.ndarray
    count: np.ndarray

    @classmethod
    def empty(cls, n_rays: int, T: int) -> "CandidateBatch":
        return cls(
            np.full((n_rays, T), -1, dtype=np.int64),
            np.zeros((n_rays, T)),
            np.zeros((n_rays, T)),
            np.zeros(n_rays, dtype=np.int64),
        )

    @property
    def T(self) -> int:
        return self.index.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return self.index >= 0

    def starts(self, origins, directions) -> np.ndarray:
        """``(R, T, 3)`` raylet start points ``origin + t * direction``."""
        return origins[:, None, :] + self.t[..., None] * directions[:, None, :]

    def for_ray(self, r: int, ray: Ray) -> List[RayletCandidate]:
        out = []
        for k in range(int(self.count[r])):
            j = int(self.index[r, k])
            out.append(RayletCandidate(Raylet.on_ray(ray, self.t[r, k], j), float(self.key[r, k]), j))
        return out

    def truncated(self, T: int) -> "CandidateBatch":
        return CandidateBatch(
            self.index[:, :T].copy(), self.t[:, :T].copy(), self.key[:, :T].copy(),
            np.minimum(self.count, T),
        )


# ---------------------------------------------------------------- virtual balls


def deduplicate_points(positions: np.ndarray):
    """Drop repeated points (first occurrence kept). Returns (unique positions, kept indices)."""
    _, first = np.unique(positions, axis=0, return_index=True)
    keep = np.sort(first)
    if len(keep) < len(positions):
        log.warning("dropped %d duplicate points before computing ball radii", len(positions) - len(keep))
    return positions[keep], keep


def _pair_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def compute_ball_radii(cloud) -> VirtualBallSet:
    """Virtual ball per point with radius equal to its exact nearest-neighbour distance.

    A k-d tree proposes the neighbours; distances are recomputed with the
    same expression a brute-force scan uses, so radii match it bitwise.
    """
    p = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(p)
    if n < 2:
        raise InsufficientPointsError(f"need at least 2 points for ball radii, got {n}")
    k = min(n, 4)
    _, idx = cKDTree(p).query(p, k=k)
    d = _pair_distance(p[:, None, :], p[idx])
    d[idx == np.arange(n)[:, None]] = np.inf
    radii = d.min(axis=1)
    if np.any(radii == 0):
        raise DegenerateRadiusError("cloud contains duplicate points; deduplicate first")
    return VirtualBallSet(p, radii)


def _ball_pairs(o, d, centers, radii):
    """Dense (R, M) foot parameter, squared perpendicular distance and hit mask."""
    cx, cy, cz = centers[:, 0], centers[:, 1], centers[:, 2]
    ox, oy, oz = o[:, 0:1], o[:, 1:2], o[:, 2:3]
    dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    t = (cx - ox) * dx + (cy - oy) * dy + (cz - oz) * dz
    ex = cx - (ox + t * dx)
    ey = cy - (oy + t * dy)
    ez = cz - (oz + t * dz)
    perp2 = ex * ex + ey * ey + ez * ez
    hit = (perp2 <= radii * radii) & (t > 0)
    return t, perp2, hit


def _select_top(rows, cols, t, key, n_rays, T, descending=False) -> CandidateBatch:
    """Keep the T best hits per row ordered by (key, t, col); ``cols`` are global indices."""
    out = CandidateBatch.empty(n_rays, T)
    if len(rows) == 0:
        return out
    primary = -key if descending else key
    order = np.lexsort((cols, t, primary, rows))
    rows, cols, t, key = rows[order], cols[order], t[order], key[order]
    starts = np.searchsorted(rows, np.arange(n_rays))
    rank = np.arange(len(rows)) - starts[rows]
    keep = rank < T
    r, k = rows[keep], rank[keep]
    out.index[r, k] = cols[keep]
    out.t[r, k] = t[keep]
    out.key[r, k] = key[keep]
    out.count[:] = np.bincount(r, minlength=n_rays)
    return out


def _chunks(n_rays, n_prims):
    step = max(1, _PAIR_BUDGET // max(1, n_prims))
    for s in range(0, n_rays, step):
        yield s, min(n_rays, s + step)


def ball_hits(origins, directions, balls: VirtualBallSet, subset: Optional[np.ndarray] = None):
    """Sparse list of intersected balls: (ray rows, ball indices, t_foot, perpendicular distance)."""
    centers, radii = balls.centers, balls.radii
    if subset is not None:
        centers, radii = centers[subset], radii[subset]
    R = [], [], [], []
    for s, e in _chunks(len(origins), len(centers)):
        t, perp2, hit = _ball_pairs(origins[s:e], directions[s:e], centers, radii)
        r, c = np.nonzero(hit)
        R[0].append(r + s)
        R[1].append(c if subset is None else subset[c])
        R[2].append(t[r, c])
        R[3].append(np.sqrt(perp2[r, c]))
    if not R[0]:
        return (np.zeros(0, np.int64),) * 2 + (np.zeros(0),) * 2
    return tuple(np.concatenate(x) for x in R)


def ball_candidates(origins, directions, balls: VirtualBallSet, T: int, subset=None) -> CandidateBatch:
    """Exhaustive (or subset-restricted) top-T ball feet for a batch of rays."""
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    rows, cols, t, perp = ball_hits(origins, directions, balls, subset)
    return _select_top(rows, cols, t, perp, len(origins), T)


def ray_ball_feet(ray: Ray, balls: VirtualBallSet, T: int) -> List[RayletCandidate]:
    """Candidates from the T intersected balls closest to the ray, nearest first.

    An empty list means the ray misses every ball and is discarded.
    """
    batch = ball_candidates(ray.origin[None], ray.direction[None], balls, T)
    return batch.for_ray(0, ray)


# ---------------------------------------------------------------- Gaussians


def _check_conditioning(scales):
    s = np.asarray(scales).reshape(-1, 3)
    cond = (s.max(axis=1) / s.min(axis=1)) ** 2
    if np.any(cond > MAX_CONDITION):
        raise DegenerateGaussianError(f"covariance condition number {cond.max():.3g} exceeds {MAX_CONDITION:g}")


def _gaussian_pairs(o, d, gs: GaussianSet, sel):
    """Dense (R, M) peak parameter t and squared Mahalanobis distance at the peak.

    Works in each Gaussian's whitened frame: with ``a = S^-1 R^T (mu - o)``
    and ``b = S^-1 R^T d`` the peak is ``t = a.b / b.b``, identical to
    ``d^T Sigma^-1 (mu - o) / d^T Sigma^-1 d``.
    """
    mu = gs.means[sel]
    Rm = gs.rotations_matrix[sel]
    s = gs.scales[sel]
    rx = mu[:, 0] - o[:, 0:1]
    ry = mu[:, 1] - o[:, 1:2]
    rz = mu[:, 2] - o[:, 2:3]
    dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    ab = np.zeros(rx.shape)
    bb = np.zeros(rx.shape)
    a_cols, b_cols = [], []
    for j in range(3):
        inv = 1.0 / s[:, j]
        a = (Rm[:, 0, j] * rx + Rm[:, 1, j] * ry + Rm[:, 2, j] * rz) * inv
        b = (Rm[:, 0, j] * dx + Rm[:, 1, j] * dy + Rm[:, 2, j] * dz) * inv
        ab += a * b
        bb += b * b
        a_cols.append(a)
        b_cols.append(b)
    t = ab / bb
    m2 = np.zeros(rx.shape)
    for a, b in zip(a_cols, b_cols):
        e = a - t * b
        m2 += e * e
    return t, m2


def gaussian_alpha(opacity, m2):
    return np.minimum(ALPHA_MAX, opacity * np.exp(-0.5 * m2))


def gaussian_hits(origins, directions, gs: GaussianSet, subset: Optional[np.ndarray] = None):
    """Sparse list of Gaussians in front of each ray with alpha >= 1/255: (rows, cols, t, alpha)."""
    sel = np.arange(len(gs)) if subset is None else subset
    out = [], [], [], []
    for s, e in _chunks(len(origins), len(sel)):
        t, m2 = _gaussian_pairs(origins[s:e], directions[s:e], gs, sel)
        alpha = gaussian_alpha(gs.opacities[sel], m2)
        hit = (t > 0) & (alpha >= ALPHA_MIN)
        r, c = np.nonzero(hit)
        out[0].append(r + s)
        out[1].append(sel[c])
        out[2].append(t[r, c])
        out[3].append(alpha[r, c])
    if not out[0]:
        return (np.zeros(0, np.int64),) * 2 + (np.zeros(0),) * 2
    return tuple(np.concatenate(x) for x in out)


def blending_weights(rows, cols, t, alpha, n_rays):
    """Front-to-back contributions ``alpha_i * prod_{j before i} (1 - alpha_j)``.

    Hits are ordered per ray by ascending t (then index). Returns the
    contributions aligned with the input order.
    """
    if len(rows) == 0:
        return np.zeros(0)
    order = np.lexsort((cols, t, rows))
    r_sorted = rows[order]
    starts = np.searchsorted(r_sorted, np.arange(n_rays))
    rank = np.arange(len(order)) - starts[r_sorted]
    width = int(rank.max()) + 1
    survive = np.ones((n_rays, width))
    survive[r_sorted, rank] = 1.0 - alpha[order]
    trans = np.cumprod(survive, axis=1)
    before = np.ones_like(trans)
    before[:, 1:] = trans[:, :-1]
    w = np.empty(len(order))
    w[order] = alpha[order] * before[r_sorted, rank]
    return w


def gaussian_candidates(origins, directions, gs: GaussianSet, T: int, subset=None) -> CandidateBatch:
    """Top-T Gaussian intersections per ray ranked by alpha-blending contribution."""
    if T < 1:
        raise InvalidParameterError("T must be >= 1")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    rows, cols, t, alpha = gaussian_hits(origins, directions, gs, subset)
    w = blending_weights(rows, cols, t, alpha, len(origins))
    return _select_top(rows, cols, t, w, len(origins), T, descending=True)


def ray_gaussian_t(ray: Ray, g) -> float:
    """Ray parameter of the peak of a Gaussian restricted to the ray."""
    gs = g if isinstance(g, GaussianSet) else GaussianSet(g.mean[None], g.scale[None], g.rotation[None], [g.opacity])
    _check_conditioning(gs.scales[:1])
    t, _ = _gaussian_pairs(ray.origin[None], ray.direction[None], gs, np.array([0]))
    return float(t[0, 0])


def gaussian_top_contributions(ray: Ray, gs: GaussianSet, T: int) -> List[RayletCandidate]:
    batch = gaussian_candidates(ray.origin[None], ray.direction[None], gs, T)
    return batch.for_ray(0, ray)


# ---------------------------------------------------------------- scene model


@dataclass(frozen=True)
class SceneModel:
    """Input scene: virtual balls over a point cloud, or a Gaussian set.

    ``positions`` (point coordinates or Gaussian means) are what the
    feature extractor searches for neighbours.
    """

    kind: str
    positions: np.ndarray
    balls: Optional[VirtualBallSet] = None
    gaussians: Optional[GaussianSet] = None
    attributes: Optional[np.ndarray] = None

    @classmethod
    def from_point_cloud(cls, cloud: PointCloud, deduplicate: bool = True) -> "SceneModel":
        positions, keep = cloud.positions, np.arange(len(cloud))
        if deduplicate:
            positions, keep = deduplicate_points(positions)
        if cloud.ball_radii is not None and len(keep) == len(cloud):
            balls = VirtualBallSet(positions, cloud.ball_radii)
        else:
            balls = compute_ball_radii(positions)
        attrs = None if cloud.attributes is None else cloud.attributes[keep]
        return cls("points", positions, balls=balls, attributes=attrs)

    @classmethod
    def from_gaussians(cls, gs: GaussianSet) -> "SceneModel":
        _check_conditioning(gs.scales)
        return cls("gaussians", gs.means, gaussians=gs, attributes=gs.attributes)

    def __len__(self):
        return len(self.positions)

    @property
    def opacities(self) -> Optional[np.ndarray]:
        return None if self.gaussians is None else self.gaussians.opacities

    def candidates(self, origins, directions, T: int, subset=None) -> CandidateBatch:
        if self.kind == "points":
            return ball_candidates(origins, directions, self.balls, T, subset)
        return gaussian_candidates(origins, directions, self.gaussians, T, subset)

    def candidates_multi(self, origins, directions, Ts) -> dict:
        """Exhaustive candidates for several T values from a single intersection pass."""
        origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if self.kind == "points":
            rows, cols, t, key = ball_hits(origins, directions, self.balls)
            desc = False
        else:
            rows, cols, t, alpha = gaussian_hits(origins, directions, self.gaussians)
            key = blending_weights(rows, cols, t, alpha, len(origins))
            desc = True
        return {T: _select_top(rows, cols, t, key, len(origins), T, descending=desc) for T in Ts}

    def bounding_spheres(self):
        """Centers and radii of spheres that contain every point a candidate can start at."""
        if self.kind == "points":
            return self.balls.centers, self.balls.radii
        gs = self.gaussians
        # alpha >= 1/255 needs Mahalanobis distance <= sqrt(2 ln(255 * opacity))
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.sqrt(np.maximum(2.0 * np.log(255.0 * gs.opacities), 0.0))
        k = np.where(gs.opacities * 255.0 >= 1.0, k * (1 + 1e-6) + 1e-9, -1.0)
        return gs.means, k * gs.scales.max(axis=1)


# ---------------------------------------------------------------- tiles


@dataclass(frozen=True)
class TileIndex:
    """Per-camera screen-tile buckets of primitives, stored CSR style.

    ``bucket(tile)`` lists, in ascending order, every primitive whose
    conservative screen footprint touches the tile.
    """

    camera: Camera
    scene: SceneModel
    tile_px: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray
    items: np.ndarray

    def bucket(self, tile: int) -> np.ndarray:
        return self.items[self.offsets[tile] : self.offsets[tile + 1]]

    def tile_of(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        tx = np.clip(np.floor(uv[:, 0] / self.tile_px).astype(np.int64), 0, self.tiles_x - 1)
        ty = np.clip(np.floor(uv[:, 1] / self.tile_px).astype(np.int64), 0, self.tiles_y - 1)
        return ty * self.tiles_x + tx

    def candidates(self, uv, T: int, directions=None) -> CandidateBatch:
        """Candidates for rays through continuous pixel coordinates inside the image."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        cam = self.camera
        if np.any(uv < 0) or np.any(uv[:, 0] >= cam.width) or np.any(uv[:, 1] >= cam.height):
            raise InvalidParameterError("tile queries must lie inside the image")
        if directions is None:
            directions = cam.directions(uv)
        origins = np.broadcast_to(cam.center, directions.shape)
        out = CandidateBatch.empty(len(uv), T)
        tiles = self.tile_of(uv)
        order = np.argsort(tiles, kind="stable")
        bounds = np.flatnonzero(np.diff(tiles[order])) + 1
        for group in np.split(order, bounds):
            if len(group) == 0:
                continue
            members = self.bucket(int(tiles[group[0]]))
            if len(members) == 0:
                continue
            sub = self.scene.candidates(origins[group], directions[group], T, subset=members)
            out.index[group] = sub.index
            out.t[group] = sub.t
            out.key[group] = sub.key
            out.count[group] = sub.count
        return out

    def pixel_candidates(self, T: int) -> CandidateBatch:
        return self.candidates(self.camera.pixel_centers(), T)


def _interval_ratio(lo, hi, zlo, zhi):
    """Bounds of X / Z for X in [lo, hi], Z in [zlo, zhi] with zlo > 0."""
    mn = np.where(lo >= 0, lo / zhi, lo / zlo)
    mx = np.where(hi >= 0, hi / zlo, hi / zhi)
    return mn, mx


def build_tile_index(camera: Camera, scene: SceneModel, tile_px: int = 16, margin_px: float = 1.0) -> TileIndex:
    """Bin each primitive's conservative screen bounding box into tiles.

    Primitives entirely behind the image plane are culled; primitives that
    straddle it get registered everywhere.
    """
    if tile_px < 1:
        raise InvalidParameterError("tile size must be >= 1 pixel")
    tiles_x = math.ceil(camera.width / tile_px)
    tiles_y = math.ceil(camera.height / tile_px)
    centers, radii = scene.bounding_spheres()
    pc = camera.to_camera(centers)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    alive = (radii >= 0) & (z + radii > 0)
    straddle = alive & (z - radii <= 1e-9 * np.maximum(1.0, np.abs(z)))
    bounded = alive & ~straddle

    tx0 = np.zeros(len(z), np.int64)
    tx1 = np.full(len(z), tiles_x - 1, np.int64)
    ty0 = np.zeros(len(z), np.int64)
    ty1 = np.full(len(z), tiles_y - 1, np.int64)

    b = bounded
    zlo, zhi = z[b] - radii[b], z[b] + radii[b]
    xmn, xmx = _interval_ratio(x[b] - radii[b], x[b] + radii[b], zlo, zhi)
    ymn, ymx = _interval_ratio(y[b] - radii[b], y[b] + radii[b], zlo, zhi)
    umn = camera.fx * xmn + camera.cx - margin_px
    umx = camera.fx * xmx + camera.cx + margin_px
    vmn = camera.fy * ymn + camera.cy - margin_px
    vmx = camera.fy * ymx + camera.cy + margin_px
    onscreen = (umx >= 0) & (umn < camera.width) & (vmx >= 0) & (vmn < camera.height)
    big = float(1 << 40)
    tx0[b] = np.floor(np.clip(umn, 0, big) / tile_px).astype(np.int64)
    tx1[b] = np.minimum(np.floor(np.clip(umx, 0, big) / tile_px).astype(np.int64), tiles_x - 1)
    ty0[b] = np.floor(np.clip(vmn, 0, big) / tile_px).astype(np.int64)
    ty1[b] = np.minimum(np.floor(np.clip(vmx, 0, big) / tile_px).astype(np.int64), tiles_y - 1)
    keep = alive.copy()
    keep[np.flatnonzero(b)[~onscreen]] = False

    prim = np.flatnonzero(keep)
    nx = tx1[prim] - tx0[prim] + 1
    ny = ty1[prim] - ty0[prim] + 1
    counts = nx * ny
    rep = np.repeat(np.arange(len(prim)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[prim][rep] + local % nx[rep]
    tile_y = ty0[prim][rep] + local // nx[rep]
    tile_id = tile_y * tiles_x + tile_x
    items = prim[rep]
    order = np.lexsort((items, tile_id))
    tile_id, items = tile_id[order], items[order]
    offsets = np.searchsorted(tile_id, np.arange(tiles_x * tiles_y + 1))
    return TileIndex(camera, scene, tile_px, tiles_x, tiles_y, offsets, items)


def frozen_candidates(scene: SceneModel, origins, directions, sources, mask):
    """Re-intersect each ray with a fixed set of primitives ``sources`` (R, T).

    Returns ``(t, still_hit)``: the new ray parameters and whether every
    source still qualifies as a candidate (ball hit or alpha >= 1/255, t > 0).
    Used to probe a ray's smooth neighbourhood without re-ranking.
    """
    o = np.asarray(origins, dtype=np.float64)[:, None, :]
    d = np.asarray(directions, dtype=np.float64)[:, None, :]
    src = np.where(mask, sources, 0)
    if scene.kind == "points":
        c = scene.balls.centers[src]
        r = scene.balls.radii[src]
        rel = c - o
        t = rel[..., 0] * d[..., 0] + rel[..., 1] * d[..., 1] + rel[..., 2] * d[..., 2]
        e = c - (o + t[..., None] * d)
        perp2 = e[..., 0] * e[..., 0] + e[..., 1] * e[..., 1] + e[..., 2] * e[..., 2]
        ok = (perp2 <= r * r) & (t > 0)
    else:
        gs = scene.gaussians
        Rm = gs.rotations_matrix[src]
        s = gs.scales[src]
        rel = gs.means[src] - o
        a = np.einsum("rtkj,rtk->rtj", Rm, rel) / s
        b = np.einsum("rtkj,rtk->rtj", Rm, np.broadcast_to(d, rel.shape)) / s
        t = np.sum(a * b, axis=-1) / np.sum(b * b, axis=-1)
        m2 = np.sum((a - t[..., None] * b) ** 2, axis=-1)
        ok = (t > 0) & (gaussian_alpha(gs.opacities[src], m2) >= ALPHA_MIN)
    still = np.all(ok | ~mask, axis=1)
    return np.where(mask, t, 0.0), still
