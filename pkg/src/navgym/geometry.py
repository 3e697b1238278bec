"""Ray-obstacle intersection kernels and distance queries for the 2D lidar simulator.

Obstacles are line segments and circles. Every operation exists in two forms: a
scalar reference path (plain Python floats, one beam at a time) and a batched
path evaluating every beam against every obstacle in one compiled call. Both
paths share the same formulas and epsilons so their results agree to well below
a nanometer.

The batched kernels are numba-compiled with nogil=True: one scan is a single
machine-code call that releases the GIL, which is what lets dozens of agent
threads cast scans concurrently. A pure-numpy fallback keeps the library
functional (slower) when numba is unavailable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


# Threshold below which a denominator counts as parallel / degenerate.
# Shared by the scalar and batched paths so they classify edge cases identically.
_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Vec2:
    """A 2D point or direction in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Vec2 components must be finite, got ({self.x}, {self.y})")

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def scaled(self, s: float) -> "Vec2":
        return Vec2(self.x * s, self.y * s)

    def dot(self, other: "Vec2") -> float:
        return self.x * other.x + self.y * other.y

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Pose:
    """Robot pose: position plus heading, heading stored normalized to [-pi, pi)."""

    position: Vec2
    heading: float

    def __post_init__(self):
        if not math.isfinite(self.heading):
            raise ValueError("heading must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class Segment:
    a: Vec2
    b: Vec2

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError("segment endpoints must be distinct")


@dataclass(frozen=True)
class Circle:
    center: Vec2
    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0.0):
            raise ValueError("circle radius must be > 0")


Obstacle = Union[Segment, Circle]


@dataclass(frozen=True)
class ScannerSpec:
    """2D lidar geometry and noise model (defaults match a 1081-beam 270-degree unit)."""

    num_beams: int = 1081
    fov: float = 270.0  # degrees
    angular_step: float = 0.25  # degrees
    max_range: float = 20.0
    min_range: float = 0.06
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if abs((self.num_beams - 1) * self.angular_step - self.fov) > 1e-9:
            raise ValueError(
                f"(num_beams - 1) * angular_step must equal fov: "
                f"({self.num_beams} - 1) * {self.angular_step} != {self.fov}"
            )
        if not (0.0 <= self.min_range < self.max_range):
            raise ValueError("need 0 <= min_range < max_range")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")

    def beam_bearing(self, j: int, heading: float = 0.0) -> float:
        """Absolute bearing of beam j: heading - fov/2 + j * angular_step."""
        return heading + math.radians(-self.fov / 2.0 + j * self.angular_step)


@dataclass
class Scan:
    """One lidar sweep. Index 0 is the -fov/2 beam, the last index is +fov/2."""

    ranges: np.ndarray
    max_range: float

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.ranges.ndim != 1:
            raise ValueError("ranges must be a 1D array")

    @property
    def num_beams(self) -> int:
        return int(self.ranges.shape[0])


def ray_circle_intersect(origin: Vec2, direction: Vec2, circle: Circle) -> Optional[float]:
    """Distance along a unit-direction ray to a circle boundary, or None.

    Returns the smallest t >= 0; tangent contact counts as a hit. A ray
    starting inside the circle reports the exit distance.
    """
    fx = origin.x - circle.center.x
    fy = origin.y - circle.center.y
    b = 2.0 * (fx * direction.x + fy * direction.y)
    c = fx * fx + fy * fy - circle.radius * circle.radius
    disc = b * b - 4.0 * c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t1 = (-b - sq) / 2.0
    if t1 >= 0.0:
        return t1
    t2 = (-b + sq) / 2.0
    if t2 >= 0.0:
        return t2
    return None


def ray_segment_intersect(origin: Vec2, direction: Vec2, segment: Segment) -> Optional[float]:
    """Distance along a unit-direction ray to a closed segment, or None.

    Collinear overlap returns the nearest overlapped point's t.
    """
    ex = segment.b.x - segment.a.x
    ey = segment.b.y - segment.a.y
    aox = segment.a.x - origin.x
    aoy = segment.a.y - origin.y
    denom = direction.x * ey - direction.y * ex
    if abs(denom) <= _PARALLEL_EPS:
        # Parallel: a hit is only possible if the segment lies on the ray line.
        perp = aox * direction.y - aoy * direction.x
        if abs(perp) > _PARALLEL_EPS:
            return None
        ta = aox * direction.x + aoy * direction.y
        tb = (segment.b.x - origin.x) * direction.x + (segment.b.y - origin.y) * direction.y
        lo, hi = (ta, tb) if ta <= tb else (tb, ta)
        if hi < 0.0:
            return None
        return max(lo, 0.0)
    t = (aox * ey - aoy * ex) / denom
    s = (aox * direction.y - aoy * direction.x) / denom
    if t >= 0.0 and 0.0 <= s <= 1.0:
        return t
    return None


def distance_to_obstacle(point: Vec2, obstacle: Obstacle) -> tuple[float, bool]:
    """Distance from a point to the nearest boundary point of an obstacle.

    Returns (distance, inside): distance is always nonnegative (for a circle it
    is the distance to the boundary ring); inside is True when the point lies
    strictly inside a circle. Segments never contain anything.
    """
    if isinstance(obstacle, Circle):
        d = math.hypot(point.x - obstacle.center.x, point.y - obstacle.center.y)
        return abs(d - obstacle.radius), d < obstacle.radius
    ex = obstacle.b.x - obstacle.a.x
    ey = obstacle.b.y - obstacle.a.y
    px = point.x - obstacle.a.x
    py = point.y - obstacle.a.y
    u = (px * ex + py * ey) / (ex * ex + ey * ey)
    u = min(max(u, 0.0), 1.0)
    return math.hypot(px - u * ex, py - u * ey), False


@njit(cache=True, nogil=True)
def _raycast_kernel(ox, oy, heading, offsets, seg_a, seg_b, seg_e, circ_c, circ_r,
                    max_range, out):  # pragma: no cover - exercised via cast_scan
    for j in range(offsets.shape[0]):
        ang = heading + offsets[j]
        dx = math.cos(ang)
        dy = math.sin(ang)
        best = max_range
        for m in range(circ_c.shape[0]):
            fx = ox - circ_c[m, 0]
            fy = oy - circ_c[m, 1]
            b = 2.0 * (fx * dx + fy * dy)
            c = fx * fx + fy * fy - circ_r[m] * circ_r[m]
            disc = b * b - 4.0 * c
            if disc < 0.0:
                continue
            sq = math.sqrt(disc)
            t = (-b - sq) / 2.0
            if t < 0.0:
                t = (-b + sq) / 2.0
            if 0.0 <= t < best:
                best = t
        for m in range(seg_a.shape[0]):
            ex = seg_e[m, 0]
            ey = seg_e[m, 1]
            aox = seg_a[m, 0] - ox
            aoy = seg_a[m, 1] - oy
            denom = dx * ey - dy * ex
            if abs(denom) <= 1e-12:
                perp = aox * dy - aoy * dx
                if abs(perp) > 1e-12:
                    continue
                ta = aox * dx + aoy * dy
                tb = (seg_b[m, 0] - ox) * dx + (seg_b[m, 1] - oy) * dy
                lo = min(ta, tb)
                if max(ta, tb) < 0.0:
                    continue
                t = lo if lo > 0.0 else 0.0
            else:
                t = (aox * ey - aoy * ex) / denom
                s = (aox * dy - aoy * dx) / denom
                if t < 0.0 or s < 0.0 or s > 1.0:
                    continue
            if t < best:
                best = t
        out[j] = best if best > 0.0 else 0.0


@njit(cache=True, nogil=True)
def _clearance_kernel(x, y, seg_a, seg_e, circ_c, circ_r):  # pragma: no cover
    best = np.inf
    inside = False
    for m in range(seg_a.shape[0]):
        px = x - seg_a[m, 0]
        py = y - seg_a[m, 1]
        ex = seg_e[m, 0]
        ey = seg_e[m, 1]
        u = (px * ex + py * ey) / (ex * ex + ey * ey)
        if u < 0.0:
            u = 0.0
        elif u > 1.0:
            u = 1.0
        d = math.hypot(px - u * ex, py - u * ey)
        if d < best:
            best = d
    for m in range(circ_c.shape[0]):
        d = math.hypot(x - circ_c[m, 0], y - circ_c[m, 1])
        ring = abs(d - circ_r[m])
        if ring < best:
            best = ring
        if d < circ_r[m]:
            inside = True
    return best, inside


class PackedObstacles:
    """Obstacle list flattened into contiguous arrays for the batched kernels.

    Immutable once built; safe to share across threads. Building is cheap but
    not free, so long-lived callers (the simulator) pack once and reuse.
    """

    def __init__(self, obstacles: Sequence[Obstacle]):
        seg_a, seg_b, circ_c, circ_r = [], [], [], []
        for ob in obstacles:
            if isinstance(ob, Segment):
                seg_a.append((ob.a.x, ob.a.y))
                seg_b.append((ob.b.x, ob.b.y))
            elif isinstance(ob, Circle):
                circ_c.append((ob.center.x, ob.center.y))
                circ_r.append(ob.radius)
            else:
                raise TypeError(f"unsupported obstacle type: {type(ob).__name__}")
        self.seg_a = np.ascontiguousarray(np.array(seg_a, dtype=np.float64).reshape(-1, 2))
        self.seg_b = np.ascontiguousarray(np.array(seg_b, dtype=np.float64).reshape(-1, 2))
        self.seg_e = np.ascontiguousarray(self.seg_b - self.seg_a)
        self.circ_c = np.ascontiguousarray(np.array(circ_c, dtype=np.float64).reshape(-1, 2))
        self.circ_r = np.ascontiguousarray(np.array(circ_r, dtype=np.float64))
        self.num_segments = self.seg_a.shape[0]
        self.num_circles = self.circ_c.shape[0]

    def __len__(self) -> int:
        return self.num_segments + self.num_circles

    def clearance(self, x: float, y: float) -> tuple[float, bool]:
        """Min distance from (x, y) to any obstacle boundary, plus a containment flag."""
        if _HAVE_NUMBA:
            best, inside = _clearance_kernel(
                float(x), float(y), self.seg_a, self.seg_e, self.circ_c, self.circ_r
            )
            return float(best), bool(inside)
        return self._clearance_numpy(x, y)

    def _clearance_numpy(self, x: float, y: float) -> tuple[float, bool]:
        best = math.inf
        inside = False
        if self.num_segments:
            px = x - self.seg_a[:, 0]
            py = y - self.seg_a[:, 1]
            ex = self.seg_e[:, 0]
            ey = self.seg_e[:, 1]
            u = np.clip((px * ex + py * ey) / (ex * ex + ey * ey), 0.0, 1.0)
            d2 = (px - u * ex) ** 2 + (py - u * ey) ** 2
            best = math.sqrt(float(d2.min()))
        if self.num_circles:
            d = np.hypot(x - self.circ_c[:, 0], y - self.circ_c[:, 1])
            ring = np.abs(d - self.circ_r)
            best = min(best, float(ring.min()))
            inside = bool((d < self.circ_r).any())
        return best, inside


def pack_obstacles(obstacles: Sequence[Obstacle]) -> PackedObstacles:
    return PackedObstacles(obstacles)


@lru_cache(maxsize=32)
def _bearing_offsets(spec: ScannerSpec) -> np.ndarray:
    # per-beam bearing offsets relative to the heading, radians
    return np.radians(-spec.fov / 2.0 + spec.angular_step * np.arange(spec.num_beams))


def cast_scan(
    pose: Pose,
    obstacles: Union[Sequence[Obstacle], PackedObstacles],
    spec: ScannerSpec,
) -> Scan:
    """Cast every beam of the scanner against all obstacles (batched path).

    Beam j leaves at bearing heading - fov/2 + j * angular_step; its range is
    the nearest intersection distance, clamped to max_range (which is also the
    no-hit value).
    """
    packed = obstacles if isinstance(obstacles, PackedObstacles) else PackedObstacles(obstacles)
    offsets = _bearing_offsets(spec)
    if _HAVE_NUMBA:
        out = np.empty(spec.num_beams, dtype=np.float64)
        _raycast_kernel(
            pose.position.x, pose.position.y, pose.heading, offsets,
            packed.seg_a, packed.seg_b, packed.seg_e, packed.circ_c, packed.circ_r,
            spec.max_range, out,
        )
        return Scan(out, spec.max_range)
    return _cast_scan_numpy(pose, packed, spec)


def _cast_scan_numpy(pose: Pose, packed: PackedObstacles, spec: ScannerSpec) -> Scan:
    """Vectorized numpy implementation of the batched path (numba fallback)."""
    offsets = _bearing_offsets(spec)
    off_cos = np.cos(offsets)
    off_sin = np.sin(offsets)
    ch = math.cos(pose.heading)
    sh = math.sin(pose.heading)
    # angle-addition instead of per-beam trig on heading + offset
    dx = ch * off_cos - sh * off_sin
    dy = sh * off_cos + ch * off_sin
    n = spec.num_beams
    ox = pose.position.x
    oy = pose.position.y
    best = np.full(n, np.inf)

    if packed.num_circles:
        fx = ox - packed.circ_c[:, 0]  # (M,)
        fy = oy - packed.circ_c[:, 1]
        b = 2.0 * (dx[:, None] * fx[None, :] + dy[:, None] * fy[None, :])  # (N,M)
        c = fx * fx + fy * fy - packed.circ_r * packed.circ_r  # (M,)
        disc = b * b - 4.0 * c[None, :]
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / 2.0
        t2 = (-b + sq) / 2.0
        t = np.where(t1 >= 0.0, t1, np.where(t2 >= 0.0, t2, np.inf))
        t[disc < 0.0] = np.inf
        best = np.minimum(best, t.min(axis=1))

    if packed.num_segments:
        ex = packed.seg_e[:, 0]  # (M,)
        ey = packed.seg_e[:, 1]
        aox = packed.seg_a[:, 0] - ox
        aoy = packed.seg_a[:, 1] - oy
        denom = dx[:, None] * ey[None, :] - dy[:, None] * ex[None, :]  # (N,M)
        t_num = aox * ey - aoy * ex  # (M,), beam-independent
        s_num = aox[None, :] * dy[:, None] - aoy[None, :] * dx[:, None]
        parallel = np.abs(denom) <= _PARALLEL_EPS
        safe = np.where(parallel, 1.0, denom)
        t = t_num[None, :] / safe
        s = s_num / safe
        t = np.where((t >= 0.0) & (s >= 0.0) & (s <= 1.0) & ~parallel, t, np.inf)
        if parallel.any():
            # Collinear overlap: same handling as the scalar path.
            collinear = parallel & (np.abs(s_num) <= _PARALLEL_EPS)
            if collinear.any():
                ta = aox[None, :] * dx[:, None] + aoy[None, :] * dy[:, None]
                box = packed.seg_b[:, 0] - ox
                boy = packed.seg_b[:, 1] - oy
                tb = box[None, :] * dx[:, None] + boy[None, :] * dy[:, None]
                lo = np.minimum(ta, tb)
                hi = np.maximum(ta, tb)
                t_col = np.where(hi < 0.0, np.inf, np.maximum(lo, 0.0))
                t = np.where(collinear, t_col, t)
        best = np.minimum(best, t.min(axis=1))

    return Scan(np.clip(best, 0.0, spec.max_range), spec.max_range)


def cast_scan_scalar(
    pose: Pose,
    obstacles: Union[Sequence[Obstacle], PackedObstacles],
    spec: ScannerSpec,
) -> Scan:
    """Reference implementation of cast_scan: one beam, one obstacle at a time."""
    if isinstance(obstacles, PackedObstacles):
        raise TypeError("scalar path takes the plain obstacle list")
    ranges = np.empty(spec.num_beams, dtype=np.float64)
    for j in range(spec.num_beams):
        bearing = spec.beam_bearing(j, pose.heading)
        d = Vec2(math.cos(bearing), math.sin(bearing))
        best = spec.max_range
        for ob in obstacles:
            if isinstance(ob, Circle):
                t = ray_circle_intersect(pose.position, d, ob)
            else:
                t = ray_segment_intersect(pose.position, d, ob)
            if t is not None and t < best:
                best = t
        ranges[j] = max(best, 0.0)
    return Scan(ranges, spec.max_range)


def apply_noise(scan: Scan, sigma: float, rng: np.random.Generator) -> Scan:
    """Add independent N(0, sigma^2) to each range, clamped to [0, max_range]."""
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return Scan(scan.ranges.copy(), scan.max_range)
    noisy = scan.ranges + rng.normal(0.0, sigma, scan.ranges.shape)
    return Scan(np.clip(noisy, 0.0, scan.max_range), scan.max_range)
