"""
Planar polygon helpers: pixel-center rasterization, shoelace area and
centroid, interior points, rectangle clipping and a simplicity test.

Polygons are sequences of (x, y) vertices in continuous pixel coordinates,
where pixel (col, row) covers [col, col+1) x [row, row+1) and its center is
(col + 0.5, row + 0.5).
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import DegenerateGeometryError

Point = Tuple[float, float]
Polygon = Tuple[Point, ...]

AREA_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major per-pixel booleans of a width x height window."""
    bits: np.ndarray

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


def as_array(polygon: Sequence[Point]) -> np.ndarray:
    return np.asarray(polygon, dtype=float).reshape(-1, 2)


def signed_area(polygon: Sequence[Point]) -> float:
    pts = as_array(polygon)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(polygon: Sequence[Point]) -> float:
    return abs(signed_area(polygon))


def polygon_centroid(polygon: Sequence[Point]) -> Point:
    """Area centroid by the shoelace formula."""
    pts = as_array(polygon)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"polygon with {len(pts)} vertices has no area")
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * float(np.sum(cross))
    if abs(area) < AREA_EPS:
        raise DegenerateGeometryError("polygon has zero area")
    cx = float(np.sum((x + xn) * cross)) / (6.0 * area)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * area)
    return cx, cy


def _scanline_fill(pts: np.ndarray, x0: float, y0: float, width: int, height: int) -> np.ndarray:
    """
    Even-odd fill of pixel centers inside ``pts`` over a width x height window
    whose top-left corner sits at (x0, y0).
    """
    bits = np.zeros((height, width), dtype=bool)
    if len(pts) < 3 or width < 1 or height < 1:
        return bits
    xs = pts[:, 0] - x0
    ys = pts[:, 1] - y0
    row_lo = max(0, int(math.ceil(ys.min() - 0.5)))
    row_hi = min(height - 1, int(math.floor(ys.max() - 0.5)))
    if row_lo > row_hi:
        return bits

    yc = np.arange(row_lo, row_hi + 1, dtype=float)[:, None] + 0.5
    xi, yi = xs[None, :], ys[None, :]
    xj, yj = np.roll(xs, -1)[None, :], np.roll(ys, -1)[None, :]
    crosses = (yi > yc) != (yj > yc)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = xi + (yc - yi) * (xj - xi) / (yj - yi)

    # a crossing at x toggles every pixel whose center is at or right of x
    rows, edges = np.nonzero(crosses)
    cols = np.clip(np.ceil(xcross[rows, edges] - 0.5), 0, width).astype(np.int64)
    toggles = np.zeros((row_hi - row_lo + 1, width + 1), dtype=np.int64)
    np.add.at(toggles, (rows, cols), 1)
    bits[row_lo:row_hi + 1] = (np.cumsum(toggles, axis=1)[:, :width] % 2).astype(bool)
    return bits


def rasterize_into(target: np.ndarray, polygon: Sequence[Point], x0: int = 0, y0: int = 0) -> np.ndarray:
    """
    OR the pixel-center fill of ``polygon`` into ``target``, a boolean array
    whose pixel (0, 0) sits at source position (x0, y0). Only the polygon's
    bounding box is scanned.
    """
    pts = as_array(polygon)
    if len(pts) < 3:
        return target
    height, width = target.shape
    c_lo = max(0, int(math.floor(pts[:, 0].min())) - x0)
    c_hi = min(width, int(math.ceil(pts[:, 0].max())) - x0)
    r_lo = max(0, int(math.floor(pts[:, 1].min())) - y0)
    r_hi = min(height, int(math.ceil(pts[:, 1].max())) - y0)
    if c_lo >= c_hi or r_lo >= r_hi:
        return target
    window = _scanline_fill(pts, x0 + c_lo, y0 + r_lo, c_hi - c_lo, r_hi - r_lo)
    target[r_lo:r_hi, c_lo:c_hi] |= window
    return target


def rasterize_polygon(polygon: Sequence[Point], bounds) -> BinaryMask:
    """
    Mask of ``bounds`` size with a bit set iff the pixel center is inside the
    polygon (even-odd rule). Polygon coordinates are in source-image space.
    """
    bits = np.zeros((bounds.height, bounds.width), dtype=bool)
    rasterize_into(bits, polygon, bounds.x0, bounds.y0)
    return BinaryMask(bits)


def clip_polygon(polygon: Sequence[Point], x_min: float, y_min: float,
                 x_max: float, y_max: float) -> Polygon:
    """Sutherland-Hodgman clip of a polygon against an axis-aligned rectangle."""
    def clip_edge(points, inside, intersect):
        output = []
        if not points:
            return output
        prev = points[-1]
        prev_in = inside(prev)
        for cur in points:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif prev_in:
                output.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
        return output

    def at_x(x):
        def intersect(p, q):
            t = (x - p[0]) / (q[0] - p[0])
            return (x, p[1] + t * (q[1] - p[1]))
        return intersect

    def at_y(y):
        def intersect(p, q):
            t = (y - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), y)
        return intersect

    points = [(float(x), float(y)) for x, y in polygon]
    points = clip_edge(points, lambda p: p[0] >= x_min, at_x(x_min))
    points = clip_edge(points, lambda p: p[0] <= x_max, at_x(x_max))
    points = clip_edge(points, lambda p: p[1] >= y_min, at_y(y_min))
    points = clip_edge(points, lambda p: p[1] <= y_max, at_y(y_max))
    return tuple(points)


def _orientation(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def is_simple_polygon(polygon: Sequence[Point]) -> bool:
    """
    True when no two non-adjacent edges cross properly. Edges that only touch
    at a shared vertex position are accepted.
    """
    pts = as_array(polygon)
    n = len(pts)
    if n < 3:
        return False
    if n == 3:
        return polygon_area(polygon) > AREA_EPS
    starts = pts
    ends = np.roll(pts, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    # first and last edge share vertex 0
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    p1, p2, p3, p4 = starts[i], ends[i], starts[j], ends[j]
    d1 = _orientation(p3, p4, p1)
    d2 = _orientation(p3, p4, p2)
    d3 = _orientation(p1, p2, p3)
    d4 = _orientation(p1, p2, p4)
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    return not bool(np.any(crossing))


def point_in_polygon(x, y, polygon: Sequence[Point]):
    """Even-odd ray test; x and y may be numpy arrays of query points."""
    pts = as_array(polygon)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for (xi, yi), (xj, yj) in zip(pts, np.roll(pts, -1, axis=0)):
        crosses = (yi > y) != (yj > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = xi + (y - yi) * (xj - xi) / (yj - yi)
        inside ^= crosses & (x < xcross)
    return inside


def _line_crossings(pts: np.ndarray, y: float) -> np.ndarray:
    """Sorted x positions where the horizontal line at ``y`` crosses the boundary."""
    xi, yi = pts[:, 0], pts[:, 1]
    xj, yj = np.roll(xi, -1), np.roll(yi, -1)
    crosses = (yi > y) != (yj > y)
    xs = xi[crosses] + (y - yi[crosses]) * (xj[crosses] - xi[crosses]) / (yj[crosses] - yi[crosses])
    return np.sort(xs)


def interior_point(polygon: Sequence[Point]) -> Point:
    """
    A point inside the polygon: the area centroid when it is inside,
    otherwise the middle of the widest inside run of the horizontal line
    through the centroid (or through the bounding box middle).
    """
    pts = as_array(polygon)
    cx, cy = polygon_centroid(polygon)
    if bool(point_in_polygon(cx, cy, pts)):
        return cx, cy
    for y in (cy, (pts[:, 1].min() + pts[:, 1].max()) / 2.0):
        xs = _line_crossings(pts, y)
        if len(xs) >= 2:
            starts, ends = xs[0::2], xs[1::2]
            k = int(np.argmax(ends - starts))
            return float((starts[k] + ends[k]) / 2.0), float(y)
    raise DegenerateGeometryError("polygon has no interior point")
