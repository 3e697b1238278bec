"""Regenerates the fusion golden files in this directory.

Scenario: a box-shaped obstacle 1.5 m ahead whose top (0.15 m) is below the
lidar scan plane, so the laser sees clear space while the depth camera sees
the box. The expected fused scan is computed here with a deliberately naive
per-point loop (math.atan2, nearest-bin rounding), independent of the
vectorized pipeline under test.

Run from the repository root:  python tests/data/make_golden.py
"""

import math
from pathlib import Path

HERE = Path(__file__).parent

NUM_BEAMS = 1081
FOV = 270.0
STEP = 0.25
MAX_RANGE = 20.0
Z_MIN, Z_MAX = 0.02, 0.42
MIN_DEPTH = 0.2
CAMERA_FOV = 90.0

BOX_DEPTH = 1.5  # front face x
BOX_HALF_WIDTH = 0.4
BOX_HEIGHT = 0.15  # below the scan plane


def box_cloud():
    """Points on the front face of the box, written as the recorded cloud."""
    points = []
    ny, nz = 41, 7
    for iy in range(ny):
        y = -BOX_HALF_WIDTH + 2 * BOX_HALF_WIDTH * iy / (ny - 1)
        for iz in range(nz):
            z = BOX_HEIGHT * iz / (nz - 1)
            points.append((BOX_DEPTH, y, z))
    return points


def expected_fused(points, laser_ranges):
    fused = list(laser_ranges)
    for x, y, z in points:
        if not (Z_MIN <= z <= Z_MAX):
            continue
        planar = math.hypot(x, y)
        if planar < MIN_DEPTH:
            continue
        bearing = math.degrees(math.atan2(y, x))
        if abs(bearing) > CAMERA_FOV / 2.0:
            continue
        index = round((bearing + FOV / 2.0) / STEP)
        index = min(max(index, 0), NUM_BEAMS - 1)
        fused[index] = min(fused[index], planar)
    return fused


def main():
    points = box_cloud()
    with open(HERE / "box_cloud.txt", "w", encoding="utf-8") as f:
        f.write("# front face of a 0.15 m tall box 1.5 m ahead (below laser plane)\n")
        for x, y, z in points:
            f.write(f"{x!r} {y!r} {z!r}\n")

    laser = [MAX_RANGE] * NUM_BEAMS  # empty room at the scan plane
    fused = expected_fused(points, laser)
    with open(HERE / "fused_box_golden.txt", "w", encoding="utf-8") as f:
        for r in fused:
            f.write(f"{float(r)!r}\n")
    touched = sum(r < MAX_RANGE for r in fused)
    print(f"golden written: {touched} bins shortened by the box")


if __name__ == "__main__":
    main()
