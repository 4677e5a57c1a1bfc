import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from raylet_field.errors import ConstantPredictionError, EmptyInputError, InvalidParameterError, ShapeError
from raylet_field.fusion import TriangleMesh
from raylet_field.metrics import format_table, median_spread, mesh_metrics, point_metrics, ray_metrics, sample_surface, scale_align

from conftest import random_rotation


def square(z, n=4, size=1.0):
    g = np.linspace(0, size, n + 1)
    X, Y = np.meshgrid(g, g, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], 1)
    idx = np.arange(v.shape[0]).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    f = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(v, f, np.tile([0.0, 0.0, 1.0], (len(v), 1)))


class TestRayMetrics:
    def test_identity(self):
        m = ray_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert (m.ade, m.rmse, m.abs_rel, m.sq_rel, m.delta) == (0, 0, 0, 0, 1)

    def test_worked_example(self):
        m = ray_metrics([1.0, 2.0], [1.0, 3.0])
        assert m.ade == pytest.approx(0.5, abs=1e-15)
        assert m.rmse == pytest.approx(math.sqrt(0.5), abs=1e-15)
        assert m.abs_rel == pytest.approx(1 / 6, abs=1e-15)
        assert m.sq_rel == pytest.approx(1 / 6, abs=1e-15)
        assert m.delta == 0.5

    @pytest.mark.parametrize("pred,expected", [(1.0, 0.0), (1.1, 1.0), (1.3, 1.0), (1.6, 1.0), (1.7, 0.0)])
    def test_delta_threshold(self, pred, expected):
        assert ray_metrics([pred], [1.3]).delta == expected

    def test_strict_threshold(self):
        assert ray_metrics([1.25], [1.0]).delta == 0.0

    def test_non_positive_prediction_fails_delta(self):
        assert ray_metrics([0.0, -1.0], [1.0, 1.0]).delta == 0.0

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            ray_metrics([], [])
        with pytest.raises(ShapeError):
            ray_metrics([1.0], [1.0, 2.0])
        with pytest.raises(InvalidParameterError):
            ray_metrics([1.0], [0.0])

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 20, elements=st.floats(0.1, 10)), arrays(np.float64, 20, elements=st.floats(0.1, 10)))
    def test_bounds(self, pred, gt):
        m = ray_metrics(pred, gt)
        assert 0 <= m.ade <= m.rmse + 1e-12
        assert 0 <= m.delta <= 1


class TestScaleAlign:
    def test_recovers_affine(self, rng):
        gt = rng.uniform(1, 5, 101)
        np.testing.assert_allclose(scale_align(3 * gt + 7, gt), gt, atol=1e-12)

    def test_idempotent(self, rng):
        gt = rng.uniform(1, 5, 50)
        pred = rng.uniform(0, 2, 50)
        once = scale_align(pred, gt)
        np.testing.assert_allclose(scale_align(once, gt), once, atol=1e-12)

    def test_matches_statistics(self, rng):
        gt = rng.uniform(1, 5, 51)
        out = scale_align(rng.normal(size=51), gt)
        np.testing.assert_allclose(median_spread(out), median_spread(gt), atol=1e-12)

    def test_median_spread_example(self):
        assert median_spread(np.array([1.0, 2.0, 6.0])) == (2.0, 5 / 3)

    def test_constant(self):
        with pytest.raises(ConstantPredictionError):
            scale_align([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


class TestMeshMetrics:
    def test_parallel_squares(self):
        m = mesh_metrics(square(0.03), square(0.0), n_samples=5000, threshold=0.05)
        assert m.accuracy == pytest.approx(0.03, abs=1e-12)
        assert m.completion == pytest.approx(0.03, abs=1e-12)
        assert m.chamfer_l1 == pytest.approx(0.03, abs=1e-12)
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
        assert m.normal_consistency == pytest.approx(1.0)

    def test_parallel_squares_tight_threshold(self):
        m = mesh_metrics(square(0.03), square(0.0), n_samples=5000, threshold=0.01)
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_self_comparison(self):
        sq = square(0.0)
        m = mesh_metrics(sq, sq, n_samples=2000)
        assert m.chamfer_l1 == 0 and m.f1 == 1 and m.normal_consistency == pytest.approx(1.0)

    def test_rigid_invariance(self, rng):
        a, b = square(0.02), square(0.0, n=3)
        R, t = random_rotation(rng), rng.normal(size=3)
        m1 = mesh_metrics(a, b, n_samples=3000)
        m2 = mesh_metrics(a.transformed(R, t), b.transformed(R, t), n_samples=3000)
        np.testing.assert_allclose(m1.row(), m2.row(), atol=1e-9)

    def test_flipped_normals_do_not_matter(self):
        a = square(0.0)
        b = TriangleMesh(a.vertices, a.triangles, -a.normals)
        assert mesh_metrics(a, b, n_samples=1000).normal_consistency == pytest.approx(1.0)

    def test_empty_mesh(self):
        with pytest.raises(EmptyInputError):
            mesh_metrics(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), square(0.0))

    def test_sampler_area_weighting(self):
        # two triangles, areas 1 and 3
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
        pts, _ = sample_surface(v, [[0, 1, 2], [3, 4, 5]], 40000, seed=0)
        assert np.mean(pts[:, 0] >= 10) == pytest.approx(0.75, abs=0.01)

    def test_point_metrics_direct(self):
        p = np.array([[0, 0, 0.0], [1, 0, 0]])
        n = np.array([[0, 0, 1.0], [0, 0, 1.0]])
        m = point_metrics(p, n, p + [0, 0, 0.1], n, threshold=0.05)
        assert m.accuracy == pytest.approx(0.1) and m.precision == 0.0


def test_format_table():
    out = format_table(["a", "bb"], [[1.0, "x"]]).splitlines()
    assert out[0].split() == ["a", "bb"] and out[2].split() == ["1.0000", "x"]
