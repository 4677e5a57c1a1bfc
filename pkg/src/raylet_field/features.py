"""Raylet feature assembly from the K nearest scene points.

Each neighbour contributes a row ``[xyz (3) | unit offset (3) | distance (1) | per-point feature (C)]``;
rows are stacked in ascending distance order and prefixed by the raylet's
start point and direction to form the network input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, InvalidParameterError, ShapeError

COINCIDENT_EPS = 1e-12

LAYOUTS = ("both", "xyz", "relative")


@dataclass(frozen=True)
class FeatureLayout:
    """Which neighbour fields enter the input vector (ablations xyz-only / relative-only / both)."""

    K: int = 5
    C: int = 32
    neighbors: str = "both"
    include_opacity: bool = False
    pe_freqs: int = 0

    def __post_init__(self):
        if self.K < 1 or self.C < 0 or self.pe_freqs < 0:
            raise InvalidParameterError("K must be >= 1, C and pe_freqs >= 0")
        if self.neighbors not in LAYOUTS:
            raise InvalidParameterError(f"neighbor layout must be one of {LAYOUTS}")

    @property
    def use_xyz(self) -> bool:
        return self.neighbors in ("both", "xyz")

    @property
    def use_relative(self) -> bool:
        return self.neighbors in ("both", "relative")

    @property
    def row_width(self) -> int:
        return 3 * self.use_xyz + 4 * self.use_relative + self.C + int(self.include_opacity)

    @property
    def ray_width(self) -> int:
        return 6 * (1 + 2 * self.pe_freqs)

    @property
    def in_dim(self) -> int:
        return self.ray_width + self.K * self.row_width

    @property
    def feature_offset(self) -> int:
        """Column of the first per-point feature inside a neighbour row."""
        return 3 * self.use_xyz + 4 * self.use_relative


@dataclass
class PerPointFeatures:
    """Per-point embedding table: ``none`` (C = 0), ``learnable`` or ``loaded`` from file."""

    mode: str
    values: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        if self.mode not in ("none", "learnable", "loaded"):
            raise InvalidParameterError(f"unknown feature mode {self.mode!r}")
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError("per-point features must be an N x C matrix")
        if self.mode == "none" and self.values.shape[1] != 0:
            raise ShapeError("mode 'none' requires C = 0")

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @classmethod
    def none(cls, n: int) -> "PerPointFeatures":
        return cls("none", np.zeros((n, 0)), False)

    @classmethod
    def learnable(cls, n: int, C: int = 32, seed: int = 0, scale: float = 0.01, dtype=np.float64):
        rng = np.random.default_rng(seed)
        return cls("learnable", (scale * rng.standard_normal((n, C))).astype(dtype), True)

    @classmethod
    def loaded(cls, values) -> "PerPointFeatures":
        return cls("loaded", np.asarray(values), False)


class NeighborIndex:
    """Exact K-nearest-neighbour search, ties broken by ascending point index.

    A k-d tree proposes a few extra neighbours; distances are recomputed
    exactly and re-sorted, and rows whose K-th distance is too close to the
    farthest proposal fall back to a linear scan.
    """

    def __init__(self, positions: np.ndarray, extra: int = 4):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        if len(self.positions) == 0:
            raise EmptyInputError("cannot search an empty scene")
        self.tree = cKDTree(self.positions)
        self.extra = extra

    def __len__(self):
        return len(self.positions)

    def _distances(self, q, idx):
        d = self.positions[idx] - q[:, None, :]
        return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])

    def query(self, queries, K: int):
        """Return ``(indices, distances)``, both ``(Q, K)``, nearest first."""
        if K < 1:
            raise InvalidParameterError("K must be >= 1")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        kk = min(n, K + self.extra)
        _, idx = self.tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        dist = self._distances(q, idx)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        k_eff = min(K, n)
        if kk < n:
            # a point the tree did not return could tie with the K-th neighbour
            slack = 1e-9 * (1.0 + dist[:, -1])
            unsure = np.flatnonzero(dist[:, k_eff - 1] >= dist[:, -1] - slack)
            for r in unsure:
                i, d = knn_linear(self.positions, q[r], k_eff)
                idx[r, :k_eff], dist[r, :k_eff] = i, d
        idx, dist = idx[:, :k_eff], dist[:, :k_eff]
        if k_eff < K:
            pad = K - k_eff
            idx = np.concatenate([idx, np.repeat(idx[:, -1:], pad, axis=1)], axis=1)
            dist = np.concatenate([dist, np.repeat(dist[:, -1:], pad, axis=1)], axis=1)
        return idx, dist


def knn_linear(positions: np.ndarray, query, K: int):
    """Linear-scan reference KNN for one query point."""
    d = positions - np.asarray(query, dtype=np.float64)
    dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    order = np.lexsort((np.arange(len(dist)), dist))[:K]
    return order, dist[order]


def knn(query, positions, K: int) -> np.ndarray:
    """Indices of the K nearest points to ``query`` (padded by repeating the farthest)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    idx, _ = NeighborIndex(positions).query(np.asarray(query)[None], K)
    return idx[0]


def positional_encoding(x: np.ndarray, freqs: int) -> np.ndarray:
    if freqs == 0:
        return x
    parts = [x]
    for k in range(freqs):
        parts += [np.sin((2.0**k) * x), np.cos((2.0**k) * x)]
    return np.concatenate(parts, axis=-1)


def assemble_batch(
    starts: np.ndarray,
    directions: np.ndarray,
    neighbors: np.ndarray,
    positions: np.ndarray,
    layout: FeatureLayout,
    features: Optional[np.ndarray] = None,
    opacities: Optional[np.ndarray] = None,
    dtype=np.float64,
) -> np.ndarray:
    """Network inputs ``(B, in_dim)`` for raylets with precomputed neighbour indices ``(B, K)``."""
    B, K = neighbors.shape
    if K != layout.K:
        raise ShapeError(f"expected {layout.K} neighbours, got {K}")
    C = 0 if features is None else features.shape[1]
    if C != layout.C:
        raise ShapeError(f"feature width {C} does not match layout C={layout.C}")
    if layout.include_opacity and opacities is None:
        raise ShapeError("layout asks for opacity but the scene has none")
    nb = positions[neighbors]
    off = nb - starts[:, None, :]
    dist = np.sqrt(off[..., 0] * off[..., 0] + off[..., 1] * off[..., 1] + off[..., 2] * off[..., 2])
    coincident = dist < COINCIDENT_EPS
    safe = np.where(coincident, 1.0, dist)
    unit = np.where(coincident[..., None], 0.0, off / safe[..., None])
    dist = np.where(coincident, 0.0, dist)
    parts = []
    if layout.use_xyz:
        parts.append(nb)
    if layout.use_relative:
        parts += [unit, dist[..., None]]
    if C:
        parts.append(features[neighbors])
    if layout.include_opacity:
        parts.append(opacities[neighbors][..., None])
    rows = np.concatenate([p.astype(dtype, copy=False) for p in parts], axis=-1) if parts else np.zeros((B, K, 0), dtype)
    ray = positional_encoding(np.concatenate([starts, directions], axis=1), layout.pe_freqs)
    return np.concatenate([ray.astype(dtype, copy=False), rows.reshape(B, -1)], axis=1)


@dataclass(frozen=True)
class RayletFeature:
    start: np.ndarray
    direction: np.ndarray
    block: np.ndarray
    neighbor_indices: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return self.block.reshape(-1)

    @property
    def vector(self) -> np.ndarray:
        """Full network input: start, direction, then the flattened neighbour block."""
        return np.concatenate([self.start, self.direction, self.flat])


def assemble_feature(raylet, scene_positions, feats: Optional[PerPointFeatures], K: int, layout: Optional[FeatureLayout] = None, opacities=None) -> RayletFeature:
    """Neighbour block for one raylet."""
    positions = np.asarray(scene_positions, dtype=np.float64).reshape(-1, 3)
    values = None if feats is None or feats.C == 0 else feats.values
    C = 0 if values is None else values.shape[1]
    if layout is None:
        layout = FeatureLayout(K=K, C=C)
    idx, _ = NeighborIndex(positions).query(raylet.start[None], K)
    x = assemble_batch(raylet.start[None], raylet.direction[None], idx, positions, layout, values, opacities)
    block = x[0, layout.ray_width :].reshape(K, layout.row_width)
    return RayletFeature(raylet.start, raylet.direction, block, idx[0])
