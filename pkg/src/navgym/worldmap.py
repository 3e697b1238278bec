"""Map data model, the native map file format, SVG ingestion, and pose sampling.

Native map format (one document per map, '#' starts a comment):

    map { name: simple_room, bounds: [-5.0, -5.0, 5.0, 5.0] }
    segment x1 y1 x2 y2
    circle cx cy r
    spawn rect xmin ymin xmax ymax
    spawn disk cx cy r
    goal rect xmin ymin xmax ymax
    goal disk cx cy r

All lengths are meters in decimal notation. The header must be the first
non-comment line; unknown keywords are rejected.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Sequence, Union
from xml.etree import ElementTree

import numpy as np

from .geometry import (
    Circle,
    Obstacle,
    PackedObstacles,
    Pose,
    Segment,
    Vec2,
)


class MapError(Exception):
    """Base class for map loading/validation problems."""


class MapParseError(MapError):
    pass


class MapValidationError(MapError):
    pass


class SvgConvertError(MapError):
    pass


class InfeasibleRegionError(MapError):
    """Raised when rejection sampling cannot find a free pose."""


@dataclass(frozen=True)
class Rect:
    min: Vec2
    max: Vec2

    def __post_init__(self):
        if not (self.min.x < self.max.x and self.min.y < self.max.y):
            raise ValueError("rect min must be < max componentwise")

    def contains(self, x: float, y: float) -> bool:
        return self.min.x <= x <= self.max.x and self.min.y <= y <= self.max.y


@dataclass(frozen=True)
class Disk:
    center: Vec2
    radius: float

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0.0):
            raise ValueError("disk radius must be > 0")


Region = Union[Rect, Disk]


@dataclass
class WorldMap:
    """An immutable-by-convention world: obstacles plus spawn and goal regions."""

    name: str
    bounds: Rect
    obstacles: list[Obstacle]
    spawn_regions: list[Region]
    goal_regions: list[Region]
    _packed: Optional[PackedObstacles] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        _validate_map(self)

    @property
    def packed(self) -> PackedObstacles:
        """Obstacles flattened for the batched kernels (built lazily, cached)."""
        if self._packed is None:
            self._packed = PackedObstacles(self.obstacles)
        return self._packed


def _segment_intersects_rect(seg: Segment, rect: Rect) -> bool:
    # Liang-Barsky clip of the segment's parameter interval against the rect.
    x0, y0 = seg.a.x, seg.a.y
    dx, dy = seg.b.x - x0, seg.b.y - y0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x0 - rect.min.x),
        (dx, rect.max.x - x0),
        (-dy, y0 - rect.min.y),
        (dy, rect.max.y - y0),
    ):
        if p == 0.0:
            if q < 0.0:
                return False
            continue
        r = q / p
        if p < 0.0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return False
    return True


def _circle_intersects_rect(circle: Circle, rect: Rect) -> bool:
    cx = min(max(circle.center.x, rect.min.x), rect.max.x)
    cy = min(max(circle.center.y, rect.min.y), rect.max.y)
    return math.hypot(circle.center.x - cx, circle.center.y - cy) <= circle.radius


def _region_within_bounds(region: Region, bounds: Rect) -> bool:
    if isinstance(region, Rect):
        return (
            bounds.min.x <= region.min.x
            and bounds.min.y <= region.min.y
            and region.max.x <= bounds.max.x
            and region.max.y <= bounds.max.y
        )
    return (
        bounds.min.x <= region.center.x - region.radius
        and bounds.min.y <= region.center.y - region.radius
        and region.center.x + region.radius <= bounds.max.x
        and region.center.y + region.radius <= bounds.max.y
    )


def _validate_map(wmap: WorldMap) -> None:
    if not wmap.name:
        raise MapValidationError("map name must be nonempty")
    for i, ob in enumerate(wmap.obstacles):
        ok = (
            _segment_intersects_rect(ob, wmap.bounds)
            if isinstance(ob, Segment)
            else _circle_intersects_rect(ob, wmap.bounds)
        )
        if not ok:
            raise MapValidationError(f"obstacle {i} does not intersect map bounds")
    if not wmap.spawn_regions:
        raise MapValidationError("map needs at least one spawn region")
    if not wmap.goal_regions:
        raise MapValidationError("map needs at least one goal region")
    for kind, regions in (("spawn", wmap.spawn_regions), ("goal", wmap.goal_regions)):
        for i, region in enumerate(regions):
            if not _region_within_bounds(region, wmap.bounds):
                raise MapValidationError(f"{kind} region {i} lies outside map bounds")


_HEADER_RE = re.compile(
    r"^map\s*\{\s*name:\s*([A-Za-z0-9_.\-]+)\s*,\s*bounds:\s*\[([^\]]*)\]\s*\}$"
)


def _parse_floats(parts: Sequence[str], n: int, lineno: int, what: str) -> list[float]:
    if len(parts) != n:
        raise MapParseError(f"line {lineno}: {what} expects {n} numbers, got {len(parts)}")
    out = []
    for p in parts:
        try:
            out.append(float(p))
        except ValueError:
            raise MapParseError(f"line {lineno}: bad number {p!r} in {what}") from None
    return out


def _parse_region(parts: Sequence[str], lineno: int, keyword: str) -> Region:
    if not parts:
        raise MapParseError(f"line {lineno}: {keyword} needs a shape (rect|disk)")
    shape, rest = parts[0], parts[1:]
    try:
        if shape == "rect":
            x0, y0, x1, y1 = _parse_floats(rest, 4, lineno, f"{keyword} rect")
            return Rect(Vec2(x0, y0), Vec2(x1, y1))
        if shape == "disk":
            cx, cy, r = _parse_floats(rest, 3, lineno, f"{keyword} disk")
            return Disk(Vec2(cx, cy), r)
    except ValueError as e:
        raise MapValidationError(f"line {lineno}: {e}") from None
    raise MapParseError(f"line {lineno}: unknown {keyword} shape {shape!r}")


def load_map(document: str) -> WorldMap:
    """Parse a native map document, validating every invariant."""
    name = None
    bounds = None
    obstacles: list[Obstacle] = []
    spawns: list[Region] = []
    goals: list[Region] = []
    for lineno, raw in enumerate(document.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if bounds is None:
            m = _HEADER_RE.match(line)
            if m is None:
                raise MapParseError(
                    f"line {lineno}: expected header 'map {{ name: ..., bounds: [...] }}'"
                )
            name = m.group(1)
            vals = _parse_floats([v.strip() for v in m.group(2).split(",")], 4, lineno, "bounds")
            try:
                bounds = Rect(Vec2(vals[0], vals[1]), Vec2(vals[2], vals[3]))
            except ValueError as e:
                raise MapValidationError(f"line {lineno}: {e}") from None
            continue
        parts = line.split()
        keyword, rest = parts[0], parts[1:]
        try:
            if keyword == "segment":
                x1, y1, x2, y2 = _parse_floats(rest, 4, lineno, "segment")
                obstacles.append(Segment(Vec2(x1, y1), Vec2(x2, y2)))
            elif keyword == "circle":
                cx, cy, r = _parse_floats(rest, 3, lineno, "circle")
                obstacles.append(Circle(Vec2(cx, cy), r))
            elif keyword == "spawn":
                spawns.append(_parse_region(rest, lineno, "spawn"))
            elif keyword == "goal":
                goals.append(_parse_region(rest, lineno, "goal"))
            else:
                raise MapParseError(f"line {lineno}: unknown keyword {keyword!r}")
        except ValueError as e:
            raise MapValidationError(f"line {lineno}: {e}") from None
    if bounds is None:
        raise MapParseError("document has no map header")
    return WorldMap(name, bounds, obstacles, spawns, goals)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_map(wmap: WorldMap) -> str:
    """Serialize a map so that load_map(save_map(m)) reproduces m exactly."""
    b = wmap.bounds
    lines = [
        f"map {{ name: {wmap.name}, bounds: "
        f"[{_fmt(b.min.x)}, {_fmt(b.min.y)}, {_fmt(b.max.x)}, {_fmt(b.max.y)}] }}"
    ]
    for ob in wmap.obstacles:
        if isinstance(ob, Segment):
            lines.append(f"segment {_fmt(ob.a.x)} {_fmt(ob.a.y)} {_fmt(ob.b.x)} {_fmt(ob.b.y)}")
        else:
            lines.append(f"circle {_fmt(ob.center.x)} {_fmt(ob.center.y)} {_fmt(ob.radius)}")
    for keyword, regions in (("spawn", wmap.spawn_regions), ("goal", wmap.goal_regions)):
        for region in regions:
            if isinstance(region, Rect):
                lines.append(
                    f"{keyword} rect {_fmt(region.min.x)} {_fmt(region.min.y)} "
                    f"{_fmt(region.max.x)} {_fmt(region.max.y)}"
                )
            else:
                lines.append(
                    f"{keyword} disk {_fmt(region.center.x)} {_fmt(region.center.y)} "
                    f"{_fmt(region.radius)}"
                )
    return "\n".join(lines) + "\n"


def load_map_file(path) -> WorldMap:
    with open(path, "r", encoding="utf-8") as f:
        return load_map(f.read())


def save_map_file(wmap: WorldMap, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(save_map(wmap))


# --- SVG ingestion -----------------------------------------------------------

_IGNORED_SVG_TAGS = {"svg", "defs", "metadata", "title", "desc", "style", "namedview"}
_LAYER_NAMES = {"spawn", "goal"}


def _local_tag(element) -> str:
    tag = element.tag
    return tag.split("}", 1)[1] if "}" in tag else tag


def _layer_label(element) -> Optional[str]:
    for key, value in element.attrib.items():
        local = key.split("}", 1)[1] if "}" in key else key
        if local in ("label", "id") and value in _LAYER_NAMES:
            return value
    return None


def _attr_float(element, name: str, default: Optional[float] = None) -> float:
    raw = element.get(name)
    if raw is None:
        if default is None:
            raise SvgConvertError(f"<{_local_tag(element)}> is missing attribute {name!r}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise SvgConvertError(
            f"<{_local_tag(element)}> attribute {name}={raw!r} is not a plain number"
        ) from None


def _parse_points(element) -> list[tuple[float, float]]:
    raw = element.get("points", "")
    tokens = [t for t in re.split(r"[\s,]+", raw.strip()) if t]
    if len(tokens) < 4 or len(tokens) % 2:
        raise SvgConvertError(f"<{_local_tag(element)}> has a malformed points list")
    vals = [float(t) for t in tokens]
    return list(zip(vals[0::2], vals[1::2]))


def convert_svg(svg: str, pixels_per_meter: float, name: str = "svg_map") -> WorldMap:
    """Convert an SVG subset (line, polyline, polygon, rect, circle) to a map.

    Coordinates are scaled by 1/pixels_per_meter and the y axis is flipped
    (SVG y grows downward). Regions come from layers (<g>) labelled "spawn"
    and "goal": rects become Rect regions, circles become Disk regions.
    Anything outside the supported subset is an error, never silently dropped.
    """
    if pixels_per_meter <= 0:
        raise ValueError("pixels_per_meter must be > 0")
    try:
        root = ElementTree.fromstring(svg)
    except ElementTree.ParseError as e:
        raise SvgConvertError(f"malformed SVG: {e}") from None

    scale = 1.0 / pixels_per_meter

    def pt(x: float, y: float) -> Vec2:
        return Vec2(x * scale, -y * scale)

    obstacles: list[Obstacle] = []
    spawns: list[Region] = []
    goals: list[Region] = []

    def add_polyline(points: list[tuple[float, float]], closed: bool) -> None:
        if closed:
            points = points + [points[0]]
        for (x0, y0), (x1, y1) in zip(points, points[1:]):
            obstacles.append(Segment(pt(x0, y0), pt(x1, y1)))

    def walk(element, layer: Optional[str]) -> None:
        tag = _local_tag(element)
        if element.get("transform") is not None:
            raise SvgConvertError(f"unsupported SVG feature: transform on <{tag}>")
        if tag == "g":
            label = _layer_label(element)
            child_layer = label if label is not None else layer
            for child in element:
                walk(child, child_layer)
            return
        if tag in _IGNORED_SVG_TAGS:
            for child in element:
                walk(child, layer)
            return
        if tag == "line":
            if layer:
                raise SvgConvertError(f"<line> is not allowed inside the {layer!r} layer")
            obstacles.append(
                Segment(
                    pt(_attr_float(element, "x1", 0.0), _attr_float(element, "y1", 0.0)),
                    pt(_attr_float(element, "x2", 0.0), _attr_float(element, "y2", 0.0)),
                )
            )
        elif tag in ("polyline", "polygon"):
            if layer:
                raise SvgConvertError(f"<{tag}> is not allowed inside the {layer!r} layer")
            add_polyline(_parse_points(element), closed=(tag == "polygon"))
        elif tag == "rect":
            x = _attr_float(element, "x", 0.0)
            y = _attr_float(element, "y", 0.0)
            w = _attr_float(element, "width")
            h = _attr_float(element, "height")
            if w <= 0 or h <= 0:
                raise SvgConvertError("<rect> width and height must be > 0")
            if layer:
                # y flip swaps which corner is the minimum
                region = Rect(pt(x, y + h), pt(x + w, y))
                (spawns if layer == "spawn" else goals).append(region)
            else:
                add_polyline([(x, y), (x + w, y), (x + w, y + h), (x, y + h)], closed=True)
        elif tag == "circle":
            center = pt(_attr_float(element, "cx", 0.0), _attr_float(element, "cy", 0.0))
            r = _attr_float(element, "r") * scale
            if layer:
                (spawns if layer == "spawn" else goals).append(Disk(center, r))
            else:
                obstacles.append(Circle(center, r))
        else:
            raise SvgConvertError(f"unsupported SVG element: {tag!r}")

    for child in root:
        walk(child, None)

    if not spawns:
        raise SvgConvertError('SVG has no "spawn" layer with regions')
    if not goals:
        raise SvgConvertError('SVG has no "goal" layer with regions')

    bounds = _bbox_bounds(obstacles, spawns + goals)
    return WorldMap(name, bounds, obstacles, spawns, goals)


def _bbox_bounds(obstacles: Sequence[Obstacle], regions: Sequence[Region], pad: float = 0.5) -> Rect:
    xs: list[float] = []
    ys: list[float] = []
    for ob in obstacles:
        if isinstance(ob, Segment):
            xs += [ob.a.x, ob.b.x]
            ys += [ob.a.y, ob.b.y]
        else:
            xs += [ob.center.x - ob.radius, ob.center.x + ob.radius]
            ys += [ob.center.y - ob.radius, ob.center.y + ob.radius]
    for region in regions:
        if isinstance(region, Rect):
            xs += [region.min.x, region.max.x]
            ys += [region.min.y, region.max.y]
        else:
            xs += [region.center.x - region.radius, region.center.x + region.radius]
            ys += [region.center.y - region.radius, region.center.y + region.radius]
    if not xs:
        raise SvgConvertError("SVG contains no geometry")
    return Rect(Vec2(min(xs) - pad, min(ys) - pad), Vec2(max(xs) + pad, max(ys) + pad))


# --- Pose sampling -----------------------------------------------------------

_SAMPLE_CAP = 10_000


def sample_free_pose(
    wmap: WorldMap,
    regions: Sequence[Region],
    clearance: float,
    rng: np.random.Generator,
) -> Pose:
    """Uniform free pose inside a uniformly chosen region.

    Rejection-samples positions until every obstacle is at least `clearance`
    away (and the position is not inside a circle obstacle). Raises
    InfeasibleRegionError after 10,000 rejected samples.
    """
    if not regions:
        raise InfeasibleRegionError("no regions to sample from")
    packed = wmap.packed
    for _ in range(_SAMPLE_CAP):
        region = regions[int(rng.integers(len(regions)))] if len(regions) > 1 else regions[0]
        if isinstance(region, Rect):
            x = rng.uniform(region.min.x, region.max.x)
            y = rng.uniform(region.min.y, region.max.y)
        else:
            r = region.radius * math.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2.0 * math.pi)
            x = region.center.x + r * math.cos(phi)
            y = region.center.y + r * math.sin(phi)
        dist, inside = packed.clearance(x, y)
        if not inside and dist >= clearance:
            heading = rng.uniform(-math.pi, math.pi)
            return Pose(Vec2(x, y), heading)
    raise InfeasibleRegionError(
        f"region infeasible: no pose with clearance {clearance} m after {_SAMPLE_CAP} samples"
    )


def make_random_map(
    rng: np.random.Generator,
    num_obstacles: int,
    half_size: float = 5.0,
    name: str = "random",
) -> WorldMap:
    """Random mix of segments and circles inside a square; handy for geometry
    stress tests and benchmarks. Spawn/goal regions cover the shrunken interior
    (no feasibility guarantee on crowded maps)."""
    bounds = Rect(Vec2(-half_size, -half_size), Vec2(half_size, half_size))
    obstacles: list[Obstacle] = []
    lo = -0.9 * half_size
    hi = 0.9 * half_size
    for _ in range(num_obstacles):
        if rng.uniform() < 0.5:
            ax, ay = rng.uniform(lo, hi, 2)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            length = rng.uniform(0.3, 0.6 * half_size)
            bx = min(max(ax + length * math.cos(angle), -half_size), half_size)
            by = min(max(ay + length * math.sin(angle), -half_size), half_size)
            if (ax, ay) == (bx, by):
                bx += 0.1
            obstacles.append(Segment(Vec2(ax, ay), Vec2(bx, by)))
        else:
            cx, cy = rng.uniform(lo, hi, 2)
            obstacles.append(Circle(Vec2(cx, cy), rng.uniform(0.08, 0.8)))
    inner = Rect(Vec2(lo, lo), Vec2(hi, hi))
    return WorldMap(name, bounds, obstacles, [inner], [inner])


# --- Bundled maps ------------------------------------------------------------


def builtin_map_names() -> list[str]:
    files = resources.files("navgym.maps")
    return sorted(p.name[: -len(".map")] for p in files.iterdir() if p.name.endswith(".map"))


def load_builtin_map(name: str) -> WorldMap:
    try:
        text = resources.files("navgym.maps").joinpath(f"{name}.map").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MapError(f"no builtin map named {name!r}; available: {builtin_map_names()}") from None
    return load_map(text)


def resolve_map(name_or_path: str) -> WorldMap:
    """Load a map by builtin name or filesystem path."""
    import os

    if os.path.exists(name_or_path):
        return load_map_file(name_or_path)
    return load_builtin_map(name_or_path)
