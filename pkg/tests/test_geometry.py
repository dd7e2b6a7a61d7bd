import math
import sys

import numpy as np
import pytest

from mound_counter.errors import DegenerateGeometryError
from mound_counter.geometry import (
    clip_polygon,
    interior_point,
    is_simple_polygon,
    point_in_polygon,
    polygon_area,
    polygon_centroid,
    rasterize_polygon,
    signed_area,
)
from mound_counter.raster import PatchBounds, build_grid, iter_patches


def _bounds(width, height, x0=0, y0=0):
    return PatchBounds(x0=x0, y0=y0, width=width, height=height, row=0, col=0)


def _random_convex(rng, cx, cy, radius, n=None):
    n = n or int(rng.integers(3, 9))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    return tuple(zip(cx + radius * np.cos(angles), cy + radius * np.sin(angles)))


def _random_star(rng, cx, cy, radius):
    n = int(rng.integers(3, 12))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    radii = radius * rng.uniform(0.2, 1.0, size=n)
    return tuple(zip(cx + radii * np.cos(angles), cy + radii * np.sin(angles)))


def test_area_and_centroid():
    """Test shoelace area and centroid on known shapes."""
    square = ((0, 0), (1, 0), (1, 1), (0, 1))
    assert polygon_area(square) == 1.0
    assert polygon_centroid(square) == pytest.approx((0.5, 0.5))

    triangle = ((0, 0), (6, 0), (0, 6))
    assert polygon_centroid(triangle) == pytest.approx((2.0, 2.0))
    # orientation changes the sign of the area but not the centroid
    assert signed_area(triangle) == -signed_area(triangle[::-1])
    assert polygon_centroid(triangle[::-1]) == pytest.approx((2.0, 2.0))


def test_centroid_of_degenerate_polygon():
    """Test that a zero-area polygon has no centroid."""
    with pytest.raises(DegenerateGeometryError):
        polygon_centroid(((0, 0), (1, 1), (2, 2)))
    with pytest.raises(DegenerateGeometryError):
        polygon_centroid(((0, 0), (1, 1)))


def test_interior_point():
    """Convex shapes keep their centroid; concave ones get a point inside."""
    print("Testing interior points...")
    square = ((0, 0), (4, 0), (4, 4), (0, 4))
    assert interior_point(square) == pytest.approx((2.0, 2.0))

    bracket = ((0, 0), (20, 0), (20, 4), (4, 4), (4, 16), (20, 16), (20, 20), (0, 20))
    cx, cy = polygon_centroid(bracket)
    assert not point_in_polygon(cx, cy, bracket)
    x, y = interior_point(bracket)
    assert (x, y) == pytest.approx((2.0, 10.0))
    assert point_in_polygon(x, y, bracket)

    with pytest.raises(DegenerateGeometryError):
        interior_point(((0, 0), (1, 1), (2, 2)))
    print("Interior points verified")


def test_centroid_matches_sampling_oracle():
    """Irregular pentagon: centroid agrees with a dense point-sampling estimate."""
    pentagon = ((1.0, 0.5), (8.2, 1.1), (9.5, 6.3), (4.1, 9.0), (0.4, 5.2))
    step = 0.01
    xs, ys = np.meshgrid(np.arange(0, 10, step) + step / 2, np.arange(0, 10, step) + step / 2)
    inside = point_in_polygon(xs, ys, pentagon)
    estimate = (xs[inside].mean(), ys[inside].mean())
    cx, cy = polygon_centroid(pentagon)
    assert abs(cx - estimate[0]) < 1e-2 and abs(cy - estimate[1]) < 1e-2, \
        f"centroid {(cx, cy)} vs sampled {estimate}"
    assert inside.sum() * step * step == pytest.approx(polygon_area(pentagon), rel=1e-2)


def test_rasterize_simple_shapes():
    """Test full cover, disjoint and half-covered masks."""
    square = ((0, 0), (10, 0), (10, 10), (0, 10))
    assert rasterize_polygon(square, _bounds(10, 10)).count() == 100

    outside = ((20, 20), (30, 20), (25, 28))
    assert rasterize_polygon(outside, _bounds(10, 10)).count() == 0

    # the ten pixel centers on the hypotenuse are outside under the half-open crossing rule
    triangle = ((0, 0), (10, 0), (0, 10))
    mask = rasterize_polygon(triangle, _bounds(10, 10))
    assert mask.count() == 45
    assert mask.bits[0, 8] and not mask.bits[0, 9]


def test_rasterize_uses_bounds_offset():
    """Test that polygons in source coordinates are translated by the patch offset."""
    square = ((100, 50), (104, 50), (104, 53), (100, 53))
    mask = rasterize_polygon(square, _bounds(10, 10, x0=98, y0=48))
    assert mask.count() == 12
    assert mask.bits[2, 2] and mask.bits[4, 5] and not mask.bits[5, 2]


def test_rasterize_matches_point_in_polygon():
    """Fill and even-odd point test agree on every pixel center."""
    rng = np.random.default_rng(11)
    for _ in range(50):
        polygon = _random_star(rng, 20, 15, 14)
        mask = rasterize_polygon(polygon, _bounds(40, 30))
        cols, rows = np.meshgrid(np.arange(40) + 0.5, np.arange(30) + 0.5)
        expected = point_in_polygon(cols, rows, polygon)
        assert np.array_equal(mask.bits, expected)


def test_rasterization_area_convergence():
    """Convex polygons of at least 100 px area are rasterized within 5% of their area."""
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 20:
        polygon = _random_convex(rng, 50, 50, rng.uniform(15, 40))
        area = polygon_area(polygon)
        if area < 100:
            continue
        count = rasterize_polygon(polygon, _bounds(100, 100)).count()
        assert abs(count - area) / area <= 0.05, f"count {count} vs area {area:.1f}"
        checked += 1


def test_clip_conservation():
    """Fuzzed polygons: clipped per-patch pixel counts sum to the whole-image count."""
    print("Testing polygon clipping...")
    rng = np.random.default_rng(2024)
    grid = build_grid(64, 48, patch_size=16)
    whole = _bounds(64, 48)
    for _ in range(1000):
        radius = rng.uniform(2, 22)
        polygon = _random_star(rng, rng.uniform(radius, 64 - radius), rng.uniform(radius, 48 - radius), radius)
        total = rasterize_polygon(polygon, whole).count()
        parts = 0
        for b in iter_patches(grid):
            clipped = clip_polygon(polygon, b.x0, b.y0, b.x1, b.y1)
            if len(clipped) >= 3:
                parts += rasterize_polygon(clipped, b).count()
        assert parts == total, f"clipped parts {parts} != whole {total}"
    print("Polygon clipping verified")


def test_clip_polygon_cases():
    """Test clipping fully inside, fully outside and straddling polygons."""
    square = ((2.0, 2.0), (4.0, 2.0), (4.0, 4.0), (2.0, 4.0))
    assert clip_polygon(square, 0, 0, 10, 10) == square
    assert clip_polygon(square, 5, 5, 10, 10) == ()
    half = clip_polygon(((0, 0), (10, 0), (10, 4), (0, 4)), 5, 0, 20, 20)
    assert polygon_area(half) == pytest.approx(20.0)


def test_simple_polygon_detection():
    """Test the proper-crossing simplicity check."""
    assert is_simple_polygon(((0, 0), (4, 0), (4, 4), (0, 4)))
    assert not is_simple_polygon(((0, 0), (4, 4), (4, 0), (0, 4))), "bow-tie must be rejected"
    assert not is_simple_polygon(((0, 0), (1, 1), (2, 2))), "collinear triangle has no area"
    assert not is_simple_polygon(((0, 0), (1, 0)))
    # concave but simple
    assert is_simple_polygon(((0, 0), (6, 0), (6, 6), (3, 2), (0, 6)))


if __name__ == "__main__":
    try:
        test_area_and_centroid()
        test_centroid_of_degenerate_polygon()
        test_interior_point()
        test_centroid_matches_sampling_oracle()
        test_rasterize_simple_shapes()
        test_rasterize_uses_bounds_offset()
        test_rasterize_matches_point_in_polygon()
        test_rasterization_area_convergence()
        test_clip_conservation()
        test_clip_polygon_cases()
        test_simple_polygon_detection()
        print("\nAll geometry tests passed!")
    except Exception as e:
        print(f"\nTests failed: {e}")
        sys.exit(1)
