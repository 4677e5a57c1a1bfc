import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raylet_field import io
from raylet_field.errors import ParseError
from raylet_field.features import FeatureLayout
from raylet_field.field import Mlp
from raylet_field.fusion import TriangleMesh, TsdfVolume
from raylet_field.render import DepthMap, NormalMap
from raylet_field.scene import Camera, GaussianSet, PointCloud

import fuzzing


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    def test_cloud_round_trip(self, tmp_path, rng, binary):
        cloud = PointCloud(rng.normal(size=(30, 3)), rng.uniform(size=(30, 2)), ("red", "confidence"))
        io.write_ply(tmp_path / "c.ply", cloud, binary=binary)
        back = io.read_ply(tmp_path / "c.ply")
        assert isinstance(back, PointCloud)
        np.testing.assert_array_equal(back.positions, cloud.positions)
        np.testing.assert_array_equal(back.attributes, cloud.attributes)
        assert back.attribute_names == cloud.attribute_names

    def test_gaussian_round_trip(self, tmp_path, rng):
        q = rng.normal(size=(12, 4))
        gs = GaussianSet(rng.normal(size=(12, 3)), rng.uniform(0.01, 0.2, (12, 3)), q, rng.uniform(0.05, 0.95, 12))
        io.write_ply(tmp_path / "g.ply", gs)
        back = io.read_ply(tmp_path / "g.ply")
        assert isinstance(back, GaussianSet)
        np.testing.assert_array_equal(back.means, gs.means)
        np.testing.assert_allclose(back.scales, gs.scales, rtol=1e-14)
        np.testing.assert_allclose(back.opacities, gs.opacities, rtol=1e-12)
        np.testing.assert_allclose(back.rotations, q / np.linalg.norm(q, axis=1, keepdims=True), atol=1e-15)

    def test_gaussian_activations(self):
        header = "ply\nformat ascii 1.0\nelement vertex 1\n" + "".join(
            f"property float {n}\n" for n in ("x", "y", "z", *io.GAUSSIAN_FIELDS, "f_rest_0", "label")
        ) + "end_header\n"
        gs = io.read_ply((header + "1 2 3 0 0 0.6931471805599453 0 0 0 2 0 0.5 7\n").encode())
        assert gs.opacities[0] == 0.5
        np.testing.assert_allclose(gs.scales[0], [1.0, 2.0, 1.0], rtol=1e-7)
        np.testing.assert_array_equal(gs.rotations[0], [0, 0, 1, 0])
        assert gs.attribute_names == ("label",)

    def test_minimal_ascii(self):
        data = b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n"
        cloud = io.read_ply(data)
        np.testing.assert_array_equal(cloud.positions, [[0, 0, 0], [1, 2, 3]])

    def test_big_endian_rejected(self):
        data = b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n" + b"\0" * 12
        with pytest.raises(ParseError):
            io.read_ply(data)

    @pytest.mark.parametrize("data", [b"", b"ply\n", b"plx\nformat ascii 1.0\nend_header\n",
                                      b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n"])
    def test_malformed(self, data):
        with pytest.raises(ParseError):
            io.read_ply(data)

    def test_truncated_binary(self, tmp_path, rng):
        io.write_ply(tmp_path / "c.ply", PointCloud(rng.normal(size=(10, 3))))
        data = (tmp_path / "c.ply").read_bytes()
        with pytest.raises(ParseError):
            io.read_ply(data[:-5])


class TestMesh:
    def mesh(self):
        return TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]], [[0, 1, 2], [1, 3, 2]])

    @pytest.mark.parametrize("name,writer", [("m.ply", io.write_mesh), ("b.ply", io.write_mesh_ply), ("m.obj", io.write_obj)])
    def test_round_trip(self, tmp_path, name, writer):
        m = self.mesh()
        writer(tmp_path / name, m)
        back = io.read_mesh(tmp_path / name)
        np.testing.assert_array_equal(back.vertices, m.vertices)
        np.testing.assert_array_equal(back.triangles, m.triangles)

    def test_obj_quad_fan(self, tmp_path):
        (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        m = io.read_mesh(tmp_path / "q.obj")
        np.testing.assert_array_equal(m.triangles, [[0, 1, 2], [0, 2, 3]])


class TestPfm:
    def test_bitwise_round_trip(self, tmp_path, rng):
        vals = rng.uniform(0.5, 5, (6, 9)).astype(np.float32).astype(np.float64)
        io.write_pfm(tmp_path / "d.pfm", DepthMap(vals, np.ones((6, 9), bool)))
        back = io.read_pfm(tmp_path / "d.pfm")
        np.testing.assert_array_equal(back.values, vals)
        assert back.valid.all()

    def test_zero_is_invalid(self, tmp_path):
        vals = np.array([[1.0, 2.0], [3.0, 4.0]])
        valid = np.array([[True, False], [True, True]])
        io.write_pfm(tmp_path / "d.pfm", DepthMap(vals, valid))
        back = io.read_pfm(tmp_path / "d.pfm")
        np.testing.assert_array_equal(back.valid, valid)
        assert back.values[0, 1] == 0

    def test_top_down_order(self):
        img = np.arange(6, dtype=np.float32).reshape(2, 3) + 1
        buf = io.pfm_bytes(img)
        # stored bottom row first
        assert np.frombuffer(buf[-24:], "<f4")[0] == 4.0
        np.testing.assert_array_equal(io.parse_pfm(buf), img)

    def test_normals(self, tmp_path, rng):
        n = rng.normal(size=(4, 5, 3)).astype(np.float32).astype(np.float64)
        valid = np.ones((4, 5), bool)
        valid[0, 0] = False
        io.write_pfm(tmp_path / "n.pfm", NormalMap(n, valid))
        back = io.read_pfm(tmp_path / "n.pfm")
        assert isinstance(back, NormalMap)
        np.testing.assert_array_equal(back.valid, valid)
        np.testing.assert_array_equal(back.normals[valid], n[valid])

    def test_big_endian_rejected(self):
        buf = io.pfm_bytes(np.ones((2, 2))).replace(b"-1.0", b"1.0")
        with pytest.raises(ParseError, match="big-endian"):
            io.parse_pfm(buf)

    def test_pgm16(self, tmp_path):
        io.write_pgm16(tmp_path / "d.pgm", DepthMap(np.array([[1.2345, 70.0]]), np.array([[True, True]])))
        data = (tmp_path / "d.pgm").read_bytes()
        assert data.startswith(b"P5\n2 1\n65535\n")
        np.testing.assert_array_equal(np.frombuffer(data[-4:], ">u2"), [1234, 65535])


class TestCamera:
    def test_round_trip(self, tmp_path):
        cam = Camera.look_at((1, 2, 3), (0, 0.5, 0), 120.5, 118, 80, 60, up=(0, 0, 1))
        io.write_camera(tmp_path / "c.json", cam)
        back = io.read_camera(tmp_path / "c.json")
        np.testing.assert_array_equal(back.world_from_camera, cam.world_from_camera)
        assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)

    @pytest.mark.parametrize("text", [b"[]", b"{}", b"{\"fx\": 1}", b"not json", b"\xff\xfe"])
    def test_invalid(self, text):
        with pytest.raises(ParseError):
            io.read_camera(text)


class TestBinaryFormats:
    def test_embeddings(self, rng):
        v = rng.normal(size=(7, 4)).astype(np.float32)
        np.testing.assert_array_equal(io.parse_embeddings(io.embeddings_bytes(v)), v)
        assert io.embeddings_bytes(v)[:6] == b"RLDF-F"

    def test_weights(self, tmp_path, rng):
        layout = FeatureLayout(3, 4)
        mlp = Mlp.init(layout.in_dim, 8, 2, rng)
        io.write_weights(tmp_path / "w.bin", mlp, layout, "alpha")
        head, back = io.read_weights(tmp_path / "w.bin")
        assert (head.in_dim, head.hidden, head.layers, head.C, head.K, head.blend) == (layout.in_dim, 8, 2, 4, 3, "alpha")
        for p, q in zip(mlp.params, back.params):
            np.testing.assert_array_equal(p.astype(np.float32), q)

    def test_volume(self, rng):
        vol = TsdfVolume(np.array([0.5, -1, 2]), 0.25, (3, 4, 5))
        vol.tsdf[:] = rng.uniform(-1, 1, vol.dims).astype(np.float32)
        vol.weight[:] = rng.integers(0, 5, vol.dims)
        back = io.parse_volume(io.volume_bytes(vol))
        np.testing.assert_array_equal(back.tsdf, vol.tsdf)
        np.testing.assert_array_equal(back.weight, vol.weight)
        np.testing.assert_array_equal(back.origin, vol.origin)
        assert (back.voxel_size, back.dims, back.truncation) == (0.25, (3, 4, 5), 1.0)

    @pytest.mark.parametrize("parser", [io.parse_embeddings, io.parse_weights, io.parse_volume])
    def test_wrong_magic(self, parser):
        with pytest.raises(ParseError):
            parser(b"RLDF-X" + b"\0" * 64)


class TestCsv:
    def test_write(self, tmp_path):
        io.write_csv(tmp_path / "m.csv", ["a", "b"], [[1.5, "x"]])
        assert (tmp_path / "m.csv").read_text().splitlines() == ["a,b", "1.5,x"]


class TestFuzz:
    def test_seed_files_are_valid(self):
        for name, bufs in fuzzing.seed_files().items():
            for buf in bufs:
                fuzzing.run_reader(name, buf)

    def test_corpus_only_raises_parse_errors(self):
        assert fuzzing.fuzz(300, seed=11) == []

    @settings(max_examples=200, deadline=None)
    @given(st.binary(max_size=300), st.sampled_from(["read_ply", "read_pfm", "read_camera", "read_embeddings", "read_weights", "read_volume"]))
    def test_arbitrary_bytes(self, data, reader):
        try:
            fuzzing.run_reader(reader, data)
        except ParseError:
            pass
