"""Cloud data model, RawBin/PLY loading, and patch sampling."""

import numpy as np
import pytest

from geopool.pointcloud import (ParseError, PointCloud, SensorId, SensorKind,
                                load_cloud, load_ply, load_rawbin, sample_patch,
                                save_rawbin)


def camera_cloud(rng, n, with_labels=True):
    return PointCloud(
        positions=rng.uniform(0, 2, size=(n, 3)).astype(np.float32),
        features=rng.uniform(0, 1, size=(n, 6)).astype(np.float32),
        sensor=SensorId(SensorKind.CameraLike, "desk0"),
        labels=rng.integers(0, 4, size=n) if with_labels else None,
    )


class TestPointCloudModel:
    def test_channel_count_enforced(self):
        with pytest.raises(ValueError):
            PointCloud(positions=np.zeros((2, 3)), features=np.zeros((2, 3)),
                       sensor=SensorId(SensorKind.CameraLike))

    def test_lidar_single_channel(self):
        pc = PointCloud(positions=np.zeros((2, 3)), features=np.zeros((2, 1)),
                        sensor=SensorId(SensorKind.LidarLike))
        assert pc.n == 2

    def test_label_length_enforced(self):
        with pytest.raises(ValueError):
            PointCloud(positions=np.zeros((2, 3)), features=np.zeros((2, 1)),
                       sensor=SensorId(SensorKind.LidarLike), labels=np.zeros(3))


class TestRawBin:
    def test_one_point_roundtrip(self, tmp_path):
        pc = PointCloud(positions=np.array([[1.5, -2.25, 0.125]]),
                        features=np.array([[0.5]]),
                        sensor=SensorId(SensorKind.LidarLike),
                        labels=np.array([3]))
        path = tmp_path / "one.bin"
        save_rawbin(pc, path)
        back = load_rawbin(path)
        np.testing.assert_array_equal(back.positions, pc.positions)
        np.testing.assert_array_equal(back.features, pc.features)
        np.testing.assert_array_equal(back.labels, [3])
        assert back.sensor.kind is SensorKind.LidarLike

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        pc = camera_cloud(rng, 257)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_rawbin(pc, p1)
        save_rawbin(load_rawbin(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_cloud(self, tmp_path):
        pc = PointCloud(positions=np.zeros((0, 3)), features=np.zeros((0, 6)),
                        sensor=SensorId(SensorKind.CameraLike))
        path = tmp_path / "empty.bin"
        save_rawbin(pc, path)
        back = load_rawbin(path)
        assert back.n == 0 and back.labels is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTME\0" + b"\x00" * 16)
        with pytest.raises(ParseError, match="byte 0"):
            load_rawbin(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        rng = np.random.default_rng(1)
        pc = camera_cloud(rng, 10)
        path = tmp_path / "t.bin"
        save_rawbin(pc, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:20])  # cuts into the positions block
        with pytest.raises(ParseError, match=r"truncated positions at byte 15"):
            load_rawbin(path)

    def test_trailing_data_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        pc = camera_cloud(rng, 3)
        path = tmp_path / "t.bin"
        save_rawbin(pc, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(ParseError, match="trailing data"):
            load_rawbin(path)

    def test_sniffing_dispatch(self, tmp_path):
        rng = np.random.default_rng(3)
        pc = camera_cloud(rng, 5)
        path = tmp_path / "c.bin"
        save_rawbin(pc, path)
        assert load_cloud(path).n == 5


PLY_RGB = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
0 0 0 255 0 0
1 0 0 0 255 0
0 1 0.5 0 0 255
"""


class TestPly:
    def test_rgb_fixture_normals_zero_filled(self, tmp_path):
        path = tmp_path / "tri.ply"
        path.write_text(PLY_RGB)
        pc = load_ply(path)
        assert pc.n == 3
        assert pc.sensor.kind is SensorKind.CameraLike
        np.testing.assert_allclose(pc.positions[2], [0, 1, 0.5])
        np.testing.assert_allclose(pc.features[:, :3], np.eye(3), atol=1e-7)
        np.testing.assert_array_equal(pc.features[:, 3:], np.zeros((3, 3)))
        assert "normals_zero_filled" in pc.flags

    def test_binary_little_endian_with_label(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\n"
                  b"element vertex 2\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"property float intensity\nproperty ushort label\n"
                  b"end_header\n")
        row = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("intensity", "<f4"), ("label", "<u2")])
        data = np.array([(1, 2, 3, 0.5, 7), (4, 5, 6, 0.25, 1)], dtype=row)
        path = tmp_path / "bin.ply"
        path.write_bytes(header + data.tobytes())
        pc = load_ply(path)
        assert pc.sensor.kind is SensorKind.LidarLike
        np.testing.assert_allclose(pc.features[:, 0], [0.5, 0.25])
        np.testing.assert_array_equal(pc.labels, [7, 1])

    def test_unknown_property_rejected_with_offset(self, tmp_path):
        path = tmp_path / "bad.ply"
        text = PLY_RGB.replace("property uchar red", "property uchar curvature")
        path.write_text(text)
        with pytest.raises(ParseError, match=r"curvature.*at byte \d+"):
            load_ply(path)

    def test_truncated_binary_payload(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\n"
                  b"element vertex 5\n"
                  b"property float x\nproperty float y\nproperty float z\n"
                  b"end_header\n")
        path = tmp_path / "short.ply"
        path.write_bytes(header + b"\x00" * 10)
        with pytest.raises(ParseError, match="truncated payload"):
            load_ply(path)


class TestSamplePatch:
    def test_small_cloud_returned_whole(self):
        rng = np.random.default_rng(4)
        pc = camera_cloud(rng, 50)
        assert sample_patch(pc, 100, seed=0) is pc

    def test_single_point_patch_is_center(self):
        rng = np.random.default_rng(5)
        pc = camera_cloud(rng, 30)
        patch = sample_patch(pc, 1, seed=9)
        center = np.random.default_rng(9).integers(0, 30)
        np.testing.assert_array_equal(patch.positions[0], pc.positions[center])

    def test_deterministic_and_subset(self):
        rng = np.random.default_rng(6)
        pc = camera_cloud(rng, 500)
        a = sample_patch(pc, 64, seed=3)
        b = sample_patch(pc, 64, seed=3)
        np.testing.assert_array_equal(a.positions, b.positions)
        # every patch row exists in the source
        src = {tuple(row) for row in pc.positions}
        assert all(tuple(row) in src for row in a.positions)

    def test_members_are_nearest_by_bruteforce(self):
        rng = np.random.default_rng(7)
        pc = camera_cloud(rng, 2000)
        k = 300
        patch = sample_patch(pc, k, seed=11)
        center = np.random.default_rng(11).integers(0, 2000)
        d2 = ((pc.positions - pc.positions[center]) ** 2).sum(axis=1)
        want = set(np.argsort(d2, kind="stable")[:k].tolist())
        got_rows = {tuple(r) for r in patch.positions}
        want_rows = {tuple(pc.positions[i]) for i in want}
        assert got_rows == want_rows
        assert patch.n == k
        assert patch.labels.shape == (k,)

    def test_empty_cloud_rejected(self):
        pc = PointCloud(positions=np.zeros((0, 3)), features=np.zeros((0, 6)),
                        sensor=SensorId(SensorKind.CameraLike))
        with pytest.raises(ValueError):
            sample_patch(pc, 10, seed=0)
