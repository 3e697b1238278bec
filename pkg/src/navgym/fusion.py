"""Depth-camera / lidar fusion: height-filter a body-frame point cloud, project
it onto the laser's angular grid as a virtual 2D scan, and fuse by pointwise
minimum. Operates on recorded clouds; there is no camera model here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Scan, ScannerSpec


@dataclass
class PointCloud:
    """Points (x, y, z) in meters in the robot body frame: x forward, y left, z up."""

    points: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class VirtualScanSpec:
    """Camera-side parameters of the virtual scan."""

    fov: float = 90.0  # degrees, horizontal
    height_band: tuple[float, float] = (0.02, 0.42)  # keep points with z in this band
    min_depth: float = 0.2

    def __post_init__(self):
        if self.height_band[0] >= self.height_band[1]:
            raise ValueError("height_band must satisfy z_min < z_max")
        if self.fov <= 0.0:
            raise ValueError("fov must be positive")
        if self.min_depth < 0.0:
            raise ValueError("min_depth must be >= 0")


def pointcloud_to_scan(cloud: PointCloud, vspec: VirtualScanSpec, sspec: ScannerSpec) -> Scan:
    """Project a cloud into a virtual scan on the laser's full angular grid.

    Points outside the height band, nearer than min_depth, or outside the
    camera FOV never influence any bin. Bins with no points report max_range,
    so fusion is a plain elementwise minimum.
    """
    if vspec.fov > sspec.fov + 1e-9:
        raise ValueError("camera fov cannot exceed the laser fov")
    ranges = np.full(sspec.num_beams, sspec.max_range, dtype=np.float64)
    pts = cloud.points
    if pts.shape[0] == 0:
        return Scan(ranges, sspec.max_range)

    z = pts[:, 2]
    planar = np.hypot(pts[:, 0], pts[:, 1])
    bearing = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    keep = (
        (z >= vspec.height_band[0])
        & (z <= vspec.height_band[1])
        & (planar >= vspec.min_depth)
        & (np.abs(bearing) <= vspec.fov / 2.0)
    )
    if not keep.any():
        return Scan(ranges, sspec.max_range)

    bins = np.rint((bearing[keep] + sspec.fov / 2.0) / sspec.angular_step).astype(np.int64)
    bins = np.clip(bins, 0, sspec.num_beams - 1)
    np.minimum.at(ranges, bins, np.minimum(planar[keep], sspec.max_range))
    return Scan(ranges, sspec.max_range)


def fuse_scans(laser: Scan, virtual: Scan) -> Scan:
    """Pointwise minimum of two scans on the same angular grid."""
    if laser.num_beams != virtual.num_beams:
        raise ValueError(
            f"scan length mismatch: {laser.num_beams} vs {virtual.num_beams}"
        )
    if abs(laser.max_range - virtual.max_range) > 1e-9:
        raise ValueError("scans disagree on max_range")
    return Scan(np.minimum(laser.ranges, virtual.ranges), laser.max_range)


# --- File formats ------------------------------------------------------------


def load_pointcloud(text: str) -> PointCloud:
    """Parse a plain-text cloud: one 'x y z' triple per line, '#' comments."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 numbers, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"line {lineno}: bad number in {line!r}") from None
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def load_pointcloud_file(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as f:
        return load_pointcloud(f.read())


def save_scan_file(scan: Scan, path) -> None:
    """One range per line."""
    with open(path, "w", encoding="utf-8") as f:
        for r in scan.ranges:
            f.write(f"{float(r)!r}\n")


def load_scan_file(path, max_range: float = 20.0) -> Scan:
    with open(path, "r", encoding="utf-8") as f:
        values = [float(line) for line in f if line.strip()]
    return Scan(np.array(values, dtype=np.float64), max_range)


def scan_bearing_deg(sspec: ScannerSpec, index: int) -> float:
    """Bearing in degrees of a bin on the laser grid (0 = straight ahead)."""
    return -sspec.fov / 2.0 + index * sspec.angular_step
