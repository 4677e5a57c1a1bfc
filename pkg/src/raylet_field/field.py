"""Raylet distance field: MLP, multi-raylet blending, l1 training with manual backprop.

The network maps ``start (3) + direction (3) + neighbour features`` to a
signed raylet distance ``d`` and a confidence score ``s``. A ray's distance is
the blend ``D = sum_t w_t (|p_cam - p_t| + d_t)`` with weights derived from
the scores.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import InvalidParameterError, NoSupervisionError, ShapeError
from .features import FeatureLayout, NeighborIndex, PerPointFeatures, assemble_batch
from .sampling import CandidateBatch, SceneModel, build_tile_index

log = logging.getLogger(__name__)

BLEND_MODES = ("softmax", "mean", "alpha", "sigmoid")


# ---------------------------------------------------------------- network


class Mlp:
    """Fully connected ReLU network ending in a linear 2-unit head.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; inputs are row vectors.
    """

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        if len(weights) != len(biases) or len(weights) < 2:
            raise ShapeError("an MLP needs matching weight/bias lists with at least 2 layers")
        if weights[-1].shape[1] != 2:
            raise ShapeError("the output layer must have width 2 (distance, score)")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, in_dim: int, hidden: int = 256, layers: int = 8, rng=None, dtype=np.float32, out_scale: float = 0.01):
        """Kaiming-uniform hidden layers, a small output layer and zero output bias.

        ``layers`` counts the hidden 256->256 blocks; together with the input
        and output projections the network has ``layers + 2`` linear maps.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        dims = [in_dim] + [hidden] * (layers + 1) + [2]
        W, b = [], []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = math.sqrt(6.0 / fi) * (out_scale if last else 1.0)
            W.append(rng.uniform(-bound, bound, (fi, fo)).astype(dtype))
            b.append(np.zeros(fo, dtype))
        return cls(W, b)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 2

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def params(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def astype(self, dtype) -> "Mlp":
        return Mlp([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Return ``(out, cache)``; ``out[:, 0]`` is d, ``out[:, 1]`` is s."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {x.shape}")
        acts = [x]
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == len(self.weights) - 1 else np.maximum(z, 0)
            if keep:
                acts.append(h)
        return h, (acts if keep else None)

    def backward(self, cache, dout: np.ndarray):
        """Gradients ``(dW list, db list, dx)`` for upstream gradient ``dout`` of shape (B, 2)."""
        acts = cache
        dW = [None] * len(self.weights)
        db = [None] * len(self.weights)
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            dW[i] = acts[i].T @ g
            db[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return dW, db, g


def forward(feature, w: Mlp) -> Tuple[float, float]:
    """Evaluate one raylet feature (a ``RayletFeature`` or a flat input vector)."""
    x = feature.vector if hasattr(feature, "vector") else np.asarray(feature)
    out, _ = w.forward(np.asarray(x, dtype=w.dtype).reshape(1, -1))
    return float(out[0, 0]), float(out[0, 1])


# ---------------------------------------------------------------- blending


@dataclass(frozen=True)
class BlendConfig:
    mode: str = "softmax"
    T_train: int = 5
    T_test: int = 5

    def __post_init__(self):
        if self.mode not in BLEND_MODES:
            raise InvalidParameterError(f"blend mode must be one of {BLEND_MODES}")
        if self.T_train < 1 or self.T_test < 1:
            raise InvalidParameterError("T must be positive")


def _front_to_back(mask, t):
    key = np.where(mask, t, np.inf)
    return np.argsort(key, axis=1, kind="stable")


def _row_sum(x):
    """Row sums taken in sorted order, so permuting a row cannot change the result."""
    return np.sort(x, axis=1).sum(axis=1, keepdims=True)


def blend_weights(scores, mask, mode: str, t=None) -> np.ndarray:
    """Convex weights ``(R, T)`` over the valid candidates of each row.

    Rows without candidates get all-zero weights. ``t`` (ray parameter of each
    start) orders candidates front to back in alpha mode.
    """
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    n = mask.sum(axis=1, keepdims=True)
    uniform = np.where(mask, 1.0 / np.maximum(n, 1), 0.0).astype(scores.dtype)
    if mode == "mean":
        return uniform
    if mode == "softmax":
        m = np.max(np.where(mask, scores, -np.inf), axis=1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, scores - m, 0.0)), 0.0)
        return e / np.maximum(_row_sum(e), np.finfo(scores.dtype).tiny)
    if mode == "sigmoid":
        a = np.where(mask, expit(scores), 0.0)
        S = _row_sum(a)
        return np.where(S > 0, a / np.where(S > 0, S, 1.0), uniform)
    if mode == "alpha":
        if t is None:
            raise InvalidParameterError("alpha blending needs the candidates' ray parameters")
        order = _front_to_back(mask, t)
        a = np.take_along_axis(np.where(mask, expit(scores), 0.0), order, 1)
        keep = np.take_along_axis(np.where(mask, expit(-scores), 1.0), order, 1)
        trans = np.cumprod(keep, axis=1)
        before = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
        u = a * before
        U = u.sum(axis=1, keepdims=True)
        w_sorted = u / np.where(U > 0, U, 1.0)
        w = np.empty_like(w_sorted)
        np.put_along_axis(w, order, w_sorted, 1)
        return np.where(U > 0, w, uniform)
    raise InvalidParameterError(f"unknown blend mode {mode!r}")


def blend_distance(values, scores, mask, mode: str, t=None):
    """Blended ray distance per row and the weights used. Rows without candidates give NaN."""
    w = blend_weights(scores, mask, mode, t)
    D = _row_sum(w * np.where(mask, values, 0.0))[:, 0]
    # a convex combination cannot leave [min, max]; clamp away rounding overshoot
    lo = np.min(np.where(mask, values, np.inf), axis=1)
    hi = np.max(np.where(mask, values, -np.inf), axis=1)
    D = np.where(np.any(mask, axis=1), np.clip(D, lo, hi), np.nan)
    return D, w


def blend_backward(values, scores, mask, mode: str, w, D, dD, t=None):
    """Gradients of ``sum_r dD[r] * D[r]`` w.r.t. per-candidate values and scores."""
    mask = np.asarray(mask, dtype=bool)
    dD = dD[:, None]
    dv = np.where(mask, w * dD, 0.0)
    resid = np.where(mask, values - np.nan_to_num(D)[:, None], 0.0)
    if mode == "mean":
        ds = np.zeros_like(dv)
    elif mode == "softmax":
        ds = w * resid * dD
    elif mode == "sigmoid":
        a = np.where(mask, expit(scores), 0.0)
        S = a.sum(axis=1, keepdims=True)
        ds = np.where(mask, a * expit(-scores) / np.where(S > 0, S, 1.0) * resid, 0.0) * dD
    elif mode == "alpha":
        ds = _alpha_score_grad(scores, mask, t, resid) * dD
    else:
        raise InvalidParameterError(f"unknown blend mode {mode!r}")
    return dv, np.where(mask, ds, 0.0)


def _alpha_score_grad(scores, mask, t, resid):
    """dD/ds for alpha blending, evaluated without dividing by (1 - alpha)."""
    order = _front_to_back(mask, t)
    s = np.take_along_axis(scores, order, 1)
    m = np.take_along_axis(mask, order, 1)
    r = np.take_along_axis(resid, order, 1)
    a = np.where(m, expit(s), 0.0)
    keep = np.where(m, expit(-s), 1.0)
    da_ds = a * keep
    trans = np.cumprod(keep, axis=1)
    before = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    U = (a * before).sum(axis=1)
    U = np.where(U > 0, U, 1.0)
    R, T = s.shape
    g = np.zeros_like(s)
    for k in range(T):
        # transmittance products that skip candidate k
        skip = keep.copy()
        skip[:, k] = 1.0
        tr = np.cumprod(skip, axis=1)
        bef = np.concatenate([np.ones_like(tr[:, :1]), tr[:, :-1]], axis=1)
        behind = np.sum((a * bef * r)[:, k + 1 :], axis=1)
        g[:, k] = (before[:, k] * r[:, k] - behind) / U * da_ds[:, k]
    out = np.empty_like(g)
    np.put_along_axis(out, order, g, 1)
    return out


def blend(candidates: Sequence[Tuple[object, float, float]], p_cam, cfg: BlendConfig = BlendConfig()) -> Optional[float]:
    """Blend ``(raylet, d, s)`` triples of one ray. ``None`` signals a discarded ray."""
    if len(candidates) == 0:
        return None
    p_cam = np.asarray(p_cam, dtype=np.float64)
    starts = np.array([np.asarray(c[0].start, dtype=np.float64) for c in candidates])
    values = np.linalg.norm(starts - p_cam, axis=1) + np.array([c[1] for c in candidates], dtype=np.float64)
    scores = np.array([c[2] for c in candidates], dtype=np.float64)
    t = np.array([getattr(c[0], "t_start", 0.0) for c in candidates], dtype=np.float64)
    mask = np.ones((1, len(candidates)), bool)
    D, _ = blend_distance(values[None], scores[None], mask, cfg.mode, t[None])
    return float(D[0])


# ---------------------------------------------------------------- loss


def loss_l1(D_pred, D_gt):
    """Absolute error and its subgradient (0 at equality). Non-positive targets give NaN (skip)."""
    D_pred = np.asarray(D_pred, dtype=np.float64)
    D_gt = np.asarray(D_gt, dtype=np.float64)
    ok = D_gt > 0
    diff = np.where(ok, D_pred - D_gt, np.nan)
    loss = np.abs(diff)
    grad = np.where(ok, np.sign(np.nan_to_num(diff)), np.nan)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------- model


class RayletFieldModel:
    """Trained field bound to one scene: network, per-point features and blending settings."""

    def __init__(self, mlp: Mlp, layout: FeatureLayout, features: PerPointFeatures, blend: BlendConfig, scene: SceneModel):
        if mlp.in_dim != layout.in_dim:
            raise ShapeError(f"network input width {mlp.in_dim} != feature layout width {layout.in_dim}")
        if features.C != layout.C:
            raise ShapeError(f"feature table has C={features.C}, layout expects {layout.C}")
        if len(features.values) != len(scene):
            raise ShapeError("feature table rows must match the scene size")
        self.mlp = mlp
        self.layout = layout
        self.features = features
        self.blend = blend
        self.scene = scene
        self._index = None

    @property
    def blend_mode(self) -> str:
        return self.blend.mode

    @property
    def neighbor_index(self) -> NeighborIndex:
        if self._index is None:
            self._index = NeighborIndex(self.scene.positions)
        return self._index

    def inputs(self, starts, directions, neighbors):
        return assemble_batch(
            starts, directions, neighbors, self.scene.positions, self.layout,
            self.features.values if self.layout.C else None,
            self.scene.opacities, dtype=self.mlp.dtype,
        )

    def predict(self, origins, directions, t, sources=None, chunk: int = 16384):
        """Signed raylet distances and scores for raylets starting at ``origin + t * direction``."""
        starts = origins + t[:, None] * directions
        d = np.empty(len(t))
        s = np.empty(len(t))
        for a in range(0, len(t), chunk):
            b = min(len(t), a + chunk)
            nb, _ = self.neighbor_index.query(starts[a:b], self.layout.K)
            out, _ = self.mlp.forward(self.inputs(starts[a:b], directions[a:b], nb))
            d[a:b], s[a:b] = out[:, 0], out[:, 1]
        return d, s


# ---------------------------------------------------------------- training data


@dataclass
class RayBatch:
    """Rays with precomputed candidates and neighbour indices, ready for the loss."""

    origins: np.ndarray
    directions: np.ndarray
    gt: np.ndarray
    cand_t: np.ndarray
    mask: np.ndarray
    neighbors: np.ndarray

    def __len__(self):
        return len(self.gt)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.gt[idx], self.cand_t[idx], self.mask[idx], self.neighbors[idx])


def prepare_rays(scene: SceneModel, views, T: int, K: int, tile_px: int = 16, index: Optional[NeighborIndex] = None) -> RayBatch:
    """Sample candidates for every pixel of every view and keep supervised, non-discarded rays.

    ``views`` holds ``(camera, depth_map)`` pairs where the depth map has
    ``values`` (H, W) ray distances and a ``valid`` mask.
    """
    index = index or NeighborIndex(scene.positions)
    chunks = []
    for cam, depth in views:
        tiles = build_tile_index(cam, scene, tile_px)
        cand = tiles.pixel_candidates(T)
        gt = np.asarray(depth.values, dtype=np.float64).reshape(-1)
        valid = np.asarray(depth.valid, dtype=bool).reshape(-1) & (gt > 0) & (cand.count > 0)
        rows = np.flatnonzero(valid)
        if len(rows) == 0:
            continue
        dirs = cam.directions(cam.pixel_centers()[rows])
        origins = np.broadcast_to(cam.center, dirs.shape).copy()
        c_t = cand.t[rows]
        mask = cand.index[rows] >= 0
        starts = origins[:, None, :] + c_t[..., None] * dirs[:, None, :]
        nb = np.zeros(mask.shape + (K,), np.int64)
        nb[mask], _ = index.query(starts[mask], K)
        chunks.append(RayBatch(origins, dirs, gt[rows], c_t, mask, nb))
    if not chunks:
        raise NoSupervisionError("no training ray has both ground truth and raylet candidates")
    return RayBatch(*(np.concatenate([getattr(c, f) for c in chunks]) for f in ("origins", "directions", "gt", "cand_t", "mask", "neighbors")))


def batch_forward_backward(model: RayletFieldModel, batch: RayBatch, need_grad: bool = True):
    """Mean l1 loss of a batch and, optionally, gradients for every parameter.

    Returns ``(loss, grads, D)`` where ``grads`` lists MLP parameters in
    ``mlp.params`` order followed by the feature table gradient (or ``None``
    when the table is frozen).
    """
    mask = batch.mask
    R, T = mask.shape
    rows, cols = np.nonzero(mask)
    starts = batch.origins[rows] + batch.cand_t[rows, cols][:, None] * batch.directions[rows]
    x = model.inputs(starts, batch.directions[rows], batch.neighbors[rows, cols])
    out, cache = model.mlp.forward(x, keep=need_grad)
    dtype = out.dtype
    cam_dist = np.linalg.norm(starts - batch.origins[rows], axis=1)
    values = np.zeros((R, T), dtype)
    scores = np.zeros((R, T), dtype)
    values[rows, cols] = cam_dist + out[:, 0]
    scores[rows, cols] = out[:, 1]
    t = batch.cand_t.astype(dtype)
    D, w = blend_distance(values, scores, mask, model.blend.mode, t)
    err, sign = loss_l1(D, batch.gt)
    loss = float(np.mean(err))
    if not need_grad:
        return loss, None, D
    dD = (sign / R).astype(dtype)
    dv, ds = blend_backward(values, scores, mask, model.blend.mode, w, D, dD, t)
    dout = np.stack([dv[rows, cols], ds[rows, cols]], axis=1).astype(dtype)
    dW, db, dx = model.mlp.backward(cache, dout)
    grads = [g for pair in zip(dW, db) for g in pair]
    table_grad = None
    if model.features.trainable and model.layout.C:
        lay = model.layout
        block = dx[:, lay.ray_width :].reshape(len(rows), lay.K, lay.row_width)
        f0 = lay.feature_offset
        table_grad = np.zeros_like(model.features.values)
        np.add.at(table_grad, batch.neighbors[rows, cols], block[..., f0 : f0 + lay.C])
    grads.append(table_grad)
    return loss, grads, D


# ---------------------------------------------------------------- optimisation


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_decay: bool = True
    batch_rays: int = 512
    epochs: int = 1
    max_steps: Optional[int] = None
    seed: int = 0
    K: int = 5
    C: int = 32
    neighbors: str = "both"
    include_opacity: bool = False
    pe_freqs: int = 0
    feature_mode: str = "learnable"
    blend: str = "softmax"
    T_train: int = 5
    T_test: int = 5
    hidden: int = 256
    layers: int = 8
    tile_px: int = 16
    dtype: str = "float32"
    out_scale: float = 0.01

    def __post_init__(self):
        for name in ("lr", "eps", "batch_rays", "epochs", "K", "T_train", "T_test", "hidden", "tile_px"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidParameterError("moment decays must lie in (0, 1)")
        if self.feature_mode == "none" and self.C:
            self.C = 0
        BlendConfig(self.blend, self.T_train, self.T_test)

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(self.K, self.C, self.neighbors, self.include_opacity, self.pe_freqs)

    @property
    def blend_config(self) -> BlendConfig:
        return BlendConfig(self.blend, self.T_train, self.T_test)

    def to_dict(self):
        return asdict(self)


class Adam:
    def __init__(self, params: List[np.ndarray], lr, beta1, beta2, eps):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: RayletFieldModel
    loss_trace: List[Tuple[int, float]] = field(default_factory=list)


def init_model(scene: SceneModel, cfg: TrainConfig, features: Optional[PerPointFeatures] = None) -> RayletFieldModel:
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    layout = cfg.layout
    if features is None:
        if cfg.feature_mode == "learnable" and cfg.C:
            features = PerPointFeatures.learnable(len(scene), cfg.C, seed=cfg.seed + 1, dtype=dtype)
        elif cfg.feature_mode == "loaded":
            raise InvalidParameterError("feature mode 'loaded' needs an embedding table")
        else:
            features = PerPointFeatures.none(len(scene))
    if features.values.dtype != dtype:
        features = PerPointFeatures(features.mode, features.values.astype(dtype), features.trainable)
    mlp = Mlp.init(layout.in_dim, cfg.hidden, cfg.layers, rng, dtype, cfg.out_scale)
    return RayletFieldModel(mlp, layout, features, cfg.blend_config, scene)


def train(scene: SceneModel, views, cfg: TrainConfig, rays: Optional[RayBatch] = None,
          features: Optional[PerPointFeatures] = None, callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit the field to ground-truth ray distances with Adam on l1 loss.

    ``views`` are ``(camera, depth_map)`` pairs; pass ``rays`` to reuse a
    prepared :class:`RayBatch`. Seeded runs are bit-reproducible.
    """
    model = init_model(scene, cfg, features)
    if rays is None:
        rays = prepare_rays(scene, views, cfg.T_train, cfg.K, cfg.tile_px)
    if len(rays) == 0:
        raise NoSupervisionError("every training ray was discarded")
    rng = np.random.default_rng(cfg.seed + 2)
    steps_per_epoch = math.ceil(len(rays) / cfg.batch_rays)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    params = model.mlp.params + [model.features.values]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    step = 0
    t0 = time.perf_counter()
    while step < total:
        perm = rng.permutation(len(rays))
        for s in range(0, len(rays), cfg.batch_rays):
            if step >= total:
                break
            batch = rays.subset(perm[s : s + cfg.batch_rays])
            loss, grads, _ = batch_forward_backward(model, batch)
            lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total)) if cfg.cosine_decay else cfg.lr
            opt.step(grads, lr)
            trace.append((step, loss))
            if callback is not None:
                callback(step, loss)
            step += 1
    log.info("trained %d steps on %d rays in %.1fs", total, len(rays), time.perf_counter() - t0)
    return TrainResult(model, trace)


def evaluate_rays(model: RayletFieldModel, rays: RayBatch, T: Optional[int] = None, chunk: int = 4096) -> np.ndarray:
    """Blended distance for prepared rays, optionally truncating to the first T candidates."""
    if T is not None:
        rays = RayBatch(rays.origins, rays.directions, rays.gt, rays.cand_t[:, :T], rays.mask[:, :T], rays.neighbors[:, :T])
    out = np.empty(len(rays))
    for a in range(0, len(rays), chunk):
        _, _, D = batch_forward_backward(model, rays.subset(slice(a, a + chunk)), need_grad=False)
        out[a : a + chunk] = D
    return out
