"""Ray-distance metrics, mesh metrics and median/spread scale alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConstantPredictionError, EmptyInputError, InvalidParameterError, ShapeError

RAY_COLUMNS = ("ade", "rmse", "abs_rel", "sq_rel", "delta")
RAY_HEADERS = ("ADE", "RMSE", "Abs-Rel", "Sq-Rel", "delta")
MESH_COLUMNS = (
    "accuracy", "completion", "chamfer_l1", "normal_accuracy", "normal_completion",
    "normal_consistency", "precision", "recall", "f1",
)


@dataclass(frozen=True)
class RayMetrics:
    ade: float
    rmse: float
    abs_rel: float
    sq_rel: float
    delta: float
    n_samples: int

    def row(self):
        return [getattr(self, c) for c in RAY_COLUMNS]


@dataclass(frozen=True)
class MeshMetrics:
    accuracy: float
    completion: float
    chamfer_l1: float
    normal_accuracy: float
    normal_completion: float
    normal_consistency: float
    precision: float
    recall: float
    f1: float
    threshold: float = 0.05

    def row(self):
        return [getattr(self, c) for c in MESH_COLUMNS]


def _pairs(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError("prediction and ground truth lengths differ")
    if len(gt) == 0:
        raise EmptyInputError("no samples to evaluate")
    return pred, gt


def ray_metrics(pred, gt, delta_thresh: float = 1.25) -> RayMetrics:
    """ADE, RMSE, Abs-Rel, Sq-Rel and the fraction with max ratio strictly below ``delta_thresh``."""
    pred, gt = _pairs(pred, gt)
    if np.any(~(gt > 0)):
        raise InvalidParameterError("ground-truth distances must be positive; exclude invalid pixels first")
    err = pred - gt
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(pred / gt, gt / pred)
    ratio = np.where(pred > 0, ratio, np.inf)
    return RayMetrics(
        ade=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        abs_rel=float(np.mean(np.abs(err) / gt)),
        sq_rel=float(np.mean(err * err / gt)),
        delta=float(np.mean(ratio < delta_thresh)),
        n_samples=len(gt),
    )


def median_spread(x):
    """Median and mean absolute deviation from the median."""
    m = float(np.median(x))
    return m, float(np.mean(np.abs(x - m)))


def scale_align(pred, gt) -> np.ndarray:
    """Shift and scale ``pred`` so its median and mean absolute spread match ``gt``."""
    pred, gt = _pairs(pred, gt)
    m_p, s_p = median_spread(pred)
    if s_p == 0:
        raise ConstantPredictionError("prediction has zero spread; cannot align")
    m_g, s_g = median_spread(gt)
    return (pred - m_p) / s_p * s_g + m_g


# ---------------------------------------------------------------- meshes


def sample_surface(vertices, triangles, n: int, seed: int = 0, vertex_normals=None):
    """Area-uniform surface samples and their normals (interpolated when vertex normals exist)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(f) == 0:
        raise EmptyInputError("mesh has no triangles")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    if area.sum() <= 0:
        raise EmptyInputError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    w0, w1, w2 = 1 - r1, r1 * (1 - r2), r1 * r2
    pts = w0[:, None] * a[tri] + w1[:, None] * b[tri] + w2[:, None] * c[tri]
    if vertex_normals is not None:
        vn = np.asarray(vertex_normals, dtype=np.float64)
        nrm = w0[:, None] * vn[f[tri, 0]] + w1[:, None] * vn[f[tri, 1]] + w2[:, None] * vn[f[tri, 2]]
    else:
        nrm = cross[tri]
    nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    return pts, nrm


def _nearest(src, dst):
    _, idx = cKDTree(dst).query(src, k=1)
    d = src - dst[idx]
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]), idx


def point_metrics(pred_pts, pred_normals, gt_pts, gt_normals, threshold: float = 0.05) -> MeshMetrics:
    """Surface metrics between two oriented point samplings (normals compared unsigned)."""
    pred_pts = np.asarray(pred_pts, dtype=np.float64)
    gt_pts = np.asarray(gt_pts, dtype=np.float64)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise EmptyInputError("both samplings must be non-empty")
    d_pred, i_pred = _nearest(pred_pts, gt_pts)
    d_gt, i_gt = _nearest(gt_pts, pred_pts)
    acc, comp = float(d_pred.mean()), float(d_gt.mean())
    n_acc = float(np.mean(np.abs(np.sum(pred_normals * gt_normals[i_pred], axis=1))))
    n_comp = float(np.mean(np.abs(np.sum(gt_normals * pred_normals[i_gt], axis=1))))
    precision = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MeshMetrics(acc, comp, (acc + comp) / 2, n_acc, n_comp, (n_acc + n_comp) / 2, precision, recall, f1, threshold)


def mesh_metrics(pred_mesh, gt_mesh, n_samples: int = 100_000, threshold: float = 0.05, seed: int = 0) -> MeshMetrics:
    """Sample both meshes with the same seeded sampler and compare the samplings."""
    if n_samples < 1:
        raise InvalidParameterError("n_samples must be >= 1")
    p_pts, p_n = sample_surface(pred_mesh.vertices, pred_mesh.triangles, n_samples, seed, pred_mesh.normals)
    g_pts, g_n = sample_surface(gt_mesh.vertices, gt_mesh.triangles, n_samples, seed, gt_mesh.normals)
    return point_metrics(p_pts, p_n, g_pts, g_n, threshold)


def format_table(headers, rows, floatfmt="{:.4f}") -> str:
    cells = [[str(h) for h in headers]] + [
        [floatfmt.format(v) if isinstance(v, float) else str(v) for v in r] for r in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
