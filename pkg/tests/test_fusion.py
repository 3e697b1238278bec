import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navgym.fusion import (
    PointCloud,
    VirtualScanSpec,
    fuse_scans,
    load_pointcloud,
    load_scan_file,
    pointcloud_to_scan,
    save_scan_file,
)
from navgym.geometry import Scan, ScannerSpec

SPEC = ScannerSpec()
VSPEC = VirtualScanSpec()


def scan_of(values) -> Scan:
    return Scan(np.asarray(values, dtype=np.float64), SPEC.max_range)


class TestPointcloudToScan:
    def test_single_forward_point_center_bin(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.2]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert scan.ranges[540] == pytest.approx(1.0)
        others = np.delete(scan.ranges, 540)
        assert np.all(others == 20.0)

    def test_point_above_height_band_filtered(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 1.5]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert np.all(scan.ranges == 20.0)

    def test_point_below_height_band_filtered(self):
        cloud = PointCloud(np.array([[1.0, 0.0, -0.05]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert np.all(scan.ranges == 20.0)

    def test_per_bin_minimum(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.2], [2.0, 0.0, 0.2]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert scan.ranges[540] == pytest.approx(1.0)

    def test_min_depth_filter(self):
        cloud = PointCloud(np.array([[0.1, 0.0, 0.2]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert np.all(scan.ranges == 20.0)

    def test_outside_camera_fov_filtered(self):
        # bearing 60 degrees > the camera's 45-degree half angle
        x = np.cos(np.radians(60.0))
        y = np.sin(np.radians(60.0))
        cloud = PointCloud(np.array([[x, y, 0.2]]))
        scan = pointcloud_to_scan(cloud, VSPEC, SPEC)
        assert np.all(scan.ranges == 20.0)

    def test_empty_cloud_all_max_range(self):
        scan = pointcloud_to_scan(PointCloud(np.empty((0, 3))), VSPEC, SPEC)
        assert np.all(scan.ranges == 20.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pts = np.column_stack([
            rng.uniform(0.3, 5.0, 200),
            rng.uniform(-2.0, 2.0, 200),
            rng.uniform(0.0, 0.5, 200),
        ])
        a = pointcloud_to_scan(PointCloud(pts), VSPEC, SPEC)
        b = pointcloud_to_scan(PointCloud(pts[rng.permutation(200)]), VSPEC, SPEC)
        assert np.array_equal(a.ranges, b.ranges)

    def test_camera_fov_wider_than_laser_rejected(self):
        with pytest.raises(ValueError, match="fov"):
            pointcloud_to_scan(
                PointCloud(np.empty((0, 3))), VirtualScanSpec(fov=300.0), SPEC
            )

    def test_bad_height_band_rejected(self):
        with pytest.raises(ValueError, match="height_band"):
            VirtualScanSpec(height_band=(0.5, 0.1))


class TestFuseScans:
    def test_pointwise_min(self):
        a = scan_of(np.full(1081, 2.0))
        b = scan_of(np.full(1081, 1.5))
        fused = fuse_scans(a, b)
        assert np.all(fused.ranges == 1.5)

    def test_empty_cloud_identity(self):
        laser = scan_of(np.linspace(0.5, 20.0, 1081))
        virtual = pointcloud_to_scan(PointCloud(np.empty((0, 3))), VSPEC, SPEC)
        fused = fuse_scans(laser, virtual)
        assert np.array_equal(fused.ranges, laser.ranges)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            fuse_scans(scan_of(np.ones(1081)), Scan(np.ones(100), 20.0))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_fusion_properties(self, seed):
        rng = np.random.default_rng(seed)
        a = scan_of(rng.uniform(0, 20, 64))
        b = scan_of(rng.uniform(0, 20, 64))
        ab = fuse_scans(a, b)
        ba = fuse_scans(b, a)
        assert np.array_equal(ab.ranges, ba.ranges)  # commutative
        assert np.array_equal(fuse_scans(ab, ab).ranges, ab.ranges)  # idempotent
        assert np.all(ab.ranges <= a.ranges)
        assert np.all(ab.ranges <= b.ranges)


class TestFileFormats:
    def test_pointcloud_parsing(self):
        text = "# a cloud\n1.0 0.5 0.2\n\n2.0 -0.5 0.3  # trailing comment\n"
        cloud = load_pointcloud(text)
        assert cloud.points.shape == (2, 3)
        assert cloud.points[1].tolist() == [2.0, -0.5, 0.3]

    def test_pointcloud_bad_line(self):
        with pytest.raises(ValueError, match="line 2"):
            load_pointcloud("1 2 3\n4 5\n")

    def test_scan_file_round_trip(self, tmp_path):
        scan = scan_of(np.linspace(0.0, 20.0, 1081))
        path = tmp_path / "scan.txt"
        save_scan_file(scan, path)
        again = load_scan_file(path, max_range=20.0)
        assert np.array_equal(again.ranges, scan.ranges)
        assert len(path.read_text().splitlines()) == 1081
