"""TSDF integration of distance maps and marching-cubes mesh extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from skimage.measure import marching_cubes

from .errors import InvalidParameterError, ShapeError
from .scene import Camera

DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ShapeError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ShapeError("need one normal per vertex")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        v, f = self.vertices, self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    def transformed(self, R, t) -> "TriangleMesh":
        R = np.asarray(R, dtype=np.float64)
        n = None if self.normals is None else self.normals @ R.T
        return TriangleMesh(self.vertices @ R.T + np.asarray(t, dtype=np.float64), self.triangles.copy(), n)


@dataclass
class TsdfVolume:
    """Voxel grid of truncated signed distances; voxel (i, j, k) sits at ``origin + (i, j, k) * voxel_size``."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: Optional[float] = None
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.voxel_size <= 0:
            raise InvalidParameterError("voxel size must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidParameterError("dims must be three positive integers")
        if self.truncation is None:
            self.truncation = 4.0 * self.voxel_size
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float, truncation: Optional[float] = None) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.floor((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, tuple(dims), truncation)

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation, self.tsdf.copy(), self.weight.copy())


def integrate(volume: TsdfVolume, depth, camera: Camera) -> TsdfVolume:
    """Fuse one ray-distance map into ``volume`` in place (and return it).

    Each voxel projecting onto a valid pixel in front of the camera takes
    ``sdf = z_surface - z_voxel``; voxels more than one truncation band
    behind the surface are left alone, the rest receive
    ``clip(sdf / truncation, -1, 1)`` as a running average with unit weight.
    """
    if (depth.height, depth.width) != (camera.height, camera.width):
        raise ShapeError("depth map and camera resolution differ")
    zmap = depth.to_z_depth(camera)
    valid_px = depth.valid
    if not valid_px.any():
        return volume
    trunc = volume.truncation
    tsdf = volume.tsdf.reshape(-1)
    weight = volume.weight.reshape(-1)
    nx, ny, nz = volume.dims
    idx_yz = np.indices((ny, nz)).reshape(2, -1)
    # one x-slab at a time keeps memory bounded on large grids
    for i in range(nx):
        pts = volume.origin + np.stack([np.full(idx_yz.shape[1], i), idx_yz[0], idx_yz[1]], axis=1) * volume.voxel_size
        u, v, z = camera.project(pts)
        ok = (z > 0) & np.isfinite(u) & np.isfinite(v)
        ok &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
        sel = np.flatnonzero(ok)
        px = np.floor(u[sel]).astype(np.int64)
        py = np.floor(v[sel]).astype(np.int64)
        hit = valid_px[py, px]
        sel, px, py = sel[hit], px[hit], py[hit]
        sdf = zmap[py, px] - z[sel]
        near = sdf >= -trunc
        sel, sdf = sel[near], sdf[near]
        val = np.clip(sdf / trunc, -1.0, 1.0)
        flat = i * ny * nz + sel
        w = weight[flat]
        tsdf[flat] = (tsdf[flat] * w + val) / (w + 1.0)
        weight[flat] = w + 1.0
    return volume


def fuse(depths: Sequence, cameras: Sequence[Camera], volume: TsdfVolume) -> TsdfVolume:
    for depth, cam in zip(depths, cameras):
        integrate(volume, depth, cam)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero iso-surface of the TSDF; cells touching unobserved voxels are skipped."""
    observed = volume.weight > 0
    if not observed.any() or min(volume.dims) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    field_ = np.where(observed, volume.tsdf, 1.0).astype(np.float64)
    if field_.min() > 0 or field_.max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    verts, faces, normals, _ = marching_cubes(field_, level=0.0, method="lorensen", allow_degenerate=True)
    # a cell is usable only if all eight corner voxels were observed
    ok_cell = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ok_cell &= observed[dx : dx + volume.dims[0] - 1, dy : dy + volume.dims[1] - 1, dz : dz + volume.dims[2] - 1]
    centroid = verts[faces].mean(axis=1)
    cell = np.clip(np.floor(centroid).astype(np.int64), 0, np.array(volume.dims) - 2)
    keep = ok_cell[cell[:, 0], cell[:, 1], cell[:, 2]]
    faces = faces[keep]
    world = volume.origin + verts * volume.voxel_size
    mesh = TriangleMesh(world, faces, -normals)
    area = mesh.areas()
    faces = faces[area > DEGENERATE_AREA]
    used = np.unique(faces)
    remap = np.full(len(world), -1, np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(world[used], remap[faces], -normals[used])
