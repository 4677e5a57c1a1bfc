import numpy as np
import pytest

from raylet_field.render import (
    DepthMap, angular_error_deg, analytic_normal, normal_from_derivatives, render_distance, render_normals,
    spherical_angles, spherical_direction, spherical_point,
)
from raylet_field.sampling import SceneModel
from raylet_field.scene import Camera
from raylet_field.synth import (
    OracleField, box_scene, make_gaussians, orbit_cameras, plane_scene, render_oracle_views, sample_points, sphere_scene,
)


def facing(normals, directions):
    return np.where((np.sum(normals * directions, -1) > 0)[..., None], -normals, normals)


@pytest.fixture(scope="module")
def plane_setup():
    sc = plane_scene()
    scene = SceneModel.from_point_cloud(sample_points(sc, 4000, 0))
    cam = Camera.look_at((0.3, 0.2, 0), (0.3, 0.2, 2), 60, 60, 48, 36, up=(0, 1, 0))
    return sc, scene, cam


@pytest.fixture(scope="module")
def sphere_setup():
    sc = sphere_scene()
    scene = SceneModel.from_point_cloud(sample_points(sc, 4000, 0))
    cam = orbit_cameras(sc, 1, 3.0, (48, 36), seed=1)[0]
    return sc, scene, cam


class TestRenderDistance:
    @pytest.mark.parametrize("name", ["plane", "sphere", "box"])
    @pytest.mark.parametrize("encoding", ["points", "gaussians"])
    def test_oracle_closure(self, name, encoding):
        sc = {"plane": plane_scene, "sphere": sphere_scene, "box": box_scene}[name]()
        if encoding == "points":
            scene = SceneModel.from_point_cloud(sample_points(sc, 3000, 0))
        else:
            scene = SceneModel.from_gaussians(make_gaussians(sc, 3000, 0))
        radius = {"plane": 1.5, "sphere": 3.0, "box": 0.8}[name]
        target = (0, 0, 2) if name == "plane" else None
        cam = orbit_cameras(sc, 1, radius, (40, 30), seed=2, target=target, elevation=(-80, -80) if name == "plane" else (-20, 40))[0]
        dm = render_distance(scene, OracleField(sc), cam, 5)
        gt = render_oracle_views(sc, [cam])[0]
        both = dm.valid & gt.valid
        assert both.sum() > 100
        np.testing.assert_allclose(dm.values[both], gt.values[both], atol=1e-6)

    def test_camera_facing_away(self, plane_setup):
        sc, scene, _ = plane_setup
        cam = Camera.look_at((0, 0, 0), (0, 0, -2), 60, 60, 32, 24, up=(0, 1, 0))
        dm = render_distance(scene, OracleField(sc), cam, 5)
        assert not dm.valid.any()
        np.testing.assert_array_equal(dm.values, 0)

    def test_single_candidate_is_direct_evaluation(self, plane_setup):
        sc, scene, cam = plane_setup
        field = OracleField(sc)
        dm = render_distance(scene, field, cam, 1)
        cand = scene.candidates(*cam.pixel_rays(), 1)
        o, d = cam.pixel_rays()
        rows = np.flatnonzero(cand.mask[:, 0])
        t = cand.t[rows, 0]
        dd, _ = field.predict(o[rows], d[rows], t)
        np.testing.assert_allclose(dm.values.reshape(-1)[rows], t + dd, rtol=0, atol=1e-12)

    def test_positive_distances(self, sphere_setup):
        sc, scene, cam = sphere_setup
        dm = render_distance(scene, OracleField(sc), cam, 5)
        assert np.all(dm.values[dm.valid] > 0)

    def test_z_depth_round_trip(self, sphere_setup):
        sc, _, cam = sphere_setup
        gt = render_oracle_views(sc, [cam])[0]
        back = DepthMap.from_z_depth(gt.to_z_depth(cam), cam)
        np.testing.assert_allclose(back.values[gt.valid], gt.values[gt.valid], rtol=1e-12)


class TestNormals:
    def test_plane_exact(self, plane_setup):
        sc, scene, cam = plane_setup
        nm = render_normals(scene, OracleField(sc), cam, 5)
        assert nm.valid.mean() > 0.5
        err = angular_error_deg(nm.normals[nm.valid], np.array([0.0, 0.0, -1.0]))
        assert np.all(err < 0.1)

    def test_sphere_median(self, sphere_setup):
        sc, scene, cam = sphere_setup
        nm = render_normals(scene, OracleField(sc), cam, 5)
        gt = render_oracle_views(sc, [cam])[0]
        o, d = cam.pixel_rays()
        pts = o + gt.values.reshape(-1, 1) * d
        true = facing(sc.normal_at(pts), d).reshape(nm.normals.shape)
        use = nm.valid & gt.valid
        assert np.median(angular_error_deg(nm.normals[use], true[use])) < 1.0

    def test_unit_and_facing_camera(self, sphere_setup):
        sc, scene, cam = sphere_setup
        nm = render_normals(scene, OracleField(sc), cam, 5)
        dm = render_distance(scene, OracleField(sc), cam, 5)
        n = nm.normals[nm.valid]
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
        _, d = cam.pixel_rays()
        assert np.all(np.sum(n * d.reshape(nm.normals.shape)[nm.valid], axis=1) <= 0)
        assert np.all(dm.valid[nm.valid])
        np.testing.assert_array_equal(nm.normals[~nm.valid], 0)

    def test_single_pixel_matches_map(self, plane_setup):
        sc, scene, cam = plane_setup
        n = analytic_normal(scene, OracleField(sc), cam, (20.5, 15.5))
        assert n is not None
        assert angular_error_deg(n, np.array([0.0, 0.0, -1.0])) < 1e-6


class TestSphericalFrame:
    def test_round_trip(self, rng):
        d = rng.normal(size=(100, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        th, ph = spherical_angles(d)
        np.testing.assert_allclose(spherical_direction(th, ph), d, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(spherical_point(2.0, th, ph), axis=-1), 2.0)

    def test_sphere_centered_at_camera(self, rng):
        # constant distance means a sphere around the origin: normal is radial
        th = rng.uniform(0.3, 2.8, 50)
        ph = rng.uniform(-3, 3, 50)
        n = normal_from_derivatives(np.full(50, 2.0), np.zeros(50), np.zeros(50), th, ph)
        d = spherical_direction(th, ph)
        np.testing.assert_allclose(np.abs(np.sum(n * d, axis=1)), 1.0, atol=1e-12)
