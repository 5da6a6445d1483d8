import math

import numpy as np
import pytest

from src.models.data_models import DistanceMode
from src.models.errors import ConfigError, ContractViolation, GeometryError
from src.models.layout_db import LayoutDB, Polygon, RasterTile, Rect
from src.services.fixtures import random_layout
from src.services.geometry import (
    NO_COMPLEMENT,
    decompose_rectangles,
    distance_transform,
    polygon_area,
    rasterize_layers,
    rasterize_tile,
    required_halo_px,
    snap_outward,
    tile_windows,
)


def brute_force_sq(bits: np.ndarray, mode: DistanceMode) -> np.ndarray:
    """Squared distance of every measured pixel to the nearest pixel of the other set."""
    measured = bits if mode == DistanceMode.INTERIOR else ~bits
    out = np.zeros(bits.shape, dtype=np.int64)
    sources = np.argwhere(measured)
    targets = np.argwhere(~measured)
    for start in range(0, len(sources), 256):
        chunk = sources[start:start + 256]
        diff = chunk[:, None, :] - targets[None, :, :]
        out[chunk[:, 0], chunk[:, 1]] = (diff * diff).sum(axis=2).min(axis=1)
    return out


def staircase(widths, heights, layer=1):
    """Descending staircase ring: column i spans widths[i] at height heights[i]."""
    xs = np.concatenate([[0], np.cumsum(widths)])
    ring = [(0, 0), (int(xs[-1]), 0)]
    for i in range(len(widths) - 1, 0, -1):
        ring.append((int(xs[i + 1]), int(heights[i])))
        ring.append((int(xs[i]), int(heights[i])))
    ring.append((int(xs[1]), int(heights[0])))
    ring.append((0, int(heights[0])))
    return Polygon.from_points(ring, layer)


class TestPolygonArea:
    def test_unit_square(self):
        assert polygon_area(Polygon.rect(0, 0, 1000, 1000, 1)) == 1_000_000

    def test_l_shape(self, l_shape):
        assert polygon_area(l_shape) == 1_500_000

    def test_translation_invariant(self, l_shape):
        assert polygon_area(l_shape.translated(123_456, -98_765)) == polygon_area(l_shape)

    def test_large_coordinates_do_not_overflow(self):
        big = 2 ** 40
        assert polygon_area(Polygon.rect(big, big, big + 3 * 10 ** 6, big + 10 ** 6, 1)) == 3 * 10 ** 12

    def test_staircase_matches_decomposition(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 8))
            widths = rng.integers(1, 5000, size=n)
            heights = np.sort(rng.choice(np.arange(1, 20_000), size=n, replace=False))[::-1]
            poly = staircase(widths, heights)
            expected = int((widths * heights).sum())
            pieces = decompose_rectangles(poly)
            assert polygon_area(poly) == expected
            assert sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in pieces) == expected

    def test_degenerate_ring_rejected(self):
        with pytest.raises(GeometryError):
            polygon_area(Polygon(((0, 0), (10, 0), (10, 10)), 1))


class TestRasterize:
    def test_aligned_square(self, square_db):
        tile = rasterize_tile(square_db, 1, Rect(0, 0, 2000, 2000), 100)
        assert tile.bits.shape == (20, 20)
        assert tile.bits[:10, :10].all()
        assert tile.bits.sum() == 100

    def test_center_tie_rule(self):
        # Edges at x = 50 and x = 250 pass through pixel centers.
        db = LayoutDB(Rect(0, 0, 1000, 1000), {1: [Polygon.rect(50, 50, 250, 250, 1)]})
        bits = rasterize_tile(db, 1, Rect(0, 0, 1000, 1000), 100).bits
        expected = np.zeros((10, 10), dtype=bool)
        expected[0:2, 0:2] = True
        np.testing.assert_array_equal(bits, expected)

    def test_unknown_layer_is_empty(self, square_db):
        tile = rasterize_tile(square_db, 7, Rect(0, 0, 2000, 2000), 100)
        assert not tile.bits.any()

    def test_invalid_pixel_size(self, square_db):
        with pytest.raises(ConfigError):
            rasterize_tile(square_db, 1, Rect(0, 0, 1000, 1000), 300)
        with pytest.raises(ConfigError):
            rasterize_tile(square_db, 1, Rect(0, 0, 1000, 1000), 0)

    def test_window_outside_die(self, square_db):
        with pytest.raises(ContractViolation):
            rasterize_tile(square_db, 1, Rect(5000, 5000, 6000, 6000), 100)

    def test_halo_padding(self, square_db):
        tile = rasterize_tile(square_db, 1, Rect(1000, 0, 2000, 1000), 100, halo=3)
        assert tile.bits.shape == (16, 16)
        assert tile.core_window == Rect(1000, 0, 2000, 1000)
        assert not tile.core.any()
        # the square shows up in the left halo
        assert tile.bits[3:13, :3].all()

    def test_area_within_perimeter_bound(self, rng):
        pixel = 100
        for _ in range(50):
            x0, y0 = (int(v) for v in rng.integers(0, 20_000, size=2))
            w, h = (int(v) for v in rng.integers(150, 20_000, size=2))
            db = LayoutDB(Rect(0, 0, 50_000, 50_000), {1: [Polygon.rect(x0, y0, x0 + w, y0 + h, 1)]})
            bits = rasterize_tile(db, 1, Rect(0, 0, 50_000, 50_000), pixel).bits
            error = abs(int(bits.sum()) * pixel * pixel - w * h)
            assert error <= 2 * pixel * 2 * (w + h)

    def test_polygon_matches_its_decomposition(self, l_shape):
        window = Rect(0, 0, 2000, 2000)
        db = LayoutDB(Rect(0, 0, 2000, 2000), {1: [l_shape]})
        rects = [Polygon.rect(*box, layer=1) for box in decompose_rectangles(l_shape)]
        split = LayoutDB(Rect(0, 0, 2000, 2000), {1: rects})
        for pixel in (50, 100, 250):
            np.testing.assert_array_equal(rasterize_tile(db, 1, window, pixel).bits,
                                          rasterize_tile(split, 1, window, pixel).bits)

    def test_tiling_independent(self):
        db = random_layout(seed=3)
        pixel = 500
        whole = rasterize_layers(db, db.layer_ids, Rect(0, 0, 100_000, 100_000), pixel).bits
        quads = [[rasterize_layers(db, db.layer_ids, Rect(x, y, x + 50_000, y + 50_000), pixel).bits
                  for x in (0, 50_000)] for y in (0, 50_000)]
        np.testing.assert_array_equal(np.block(quads), whole)

    def test_deterministic(self):
        db = random_layout(seed=11)
        a = rasterize_layers(db, db.layer_ids, Rect(0, 0, 100_000, 100_000), 250).bits
        b = rasterize_layers(db, db.layer_ids, Rect(0, 0, 100_000, 100_000), 250).bits
        np.testing.assert_array_equal(a, b)

    def test_coverage_rounds_outward(self):
        db = LayoutDB(Rect(0, 0, 1000, 1000), {1: [Polygon.rect(150, 150, 250, 350, 1)]})
        sampled = rasterize_layers(db, [1], Rect(0, 0, 1000, 1000), 100).bits
        covered = rasterize_layers(db, [1], Rect(0, 0, 1000, 1000), 100, coverage=True).bits
        assert covered[1:4, 1:3].all()
        assert covered.sum() == 6
        assert not (sampled & ~covered).any()

    def test_extra_boxes(self, square_db):
        extra = np.array([[1000, 1000, 1500, 1500]])
        bits = rasterize_layers(square_db, [1], Rect(0, 0, 2000, 2000), 100, extra_boxes=extra).bits
        assert bits.sum() == 125


class TestDistanceTransform:
    def test_single_pixel_exterior(self):
        bits = np.zeros((11, 11), dtype=bool)
        bits[5, 5] = True
        dm = distance_transform(RasterTile((0, 0), 25, bits), DistanceMode.EXTERIOR)
        d = dm.distance_nm()
        assert d[5, 5] == 0.0
        for r, c in ((4, 5), (6, 5), (5, 4), (5, 6)):
            assert d[r, c] == 25.0
        assert d[4, 4] == pytest.approx(25.0 * math.sqrt(2.0), rel=1e-15)
        assert dm.sq_px[0, 0] == 50

    def test_half_plane_interior(self):
        bits = np.zeros((30, 8), dtype=bool)
        bits[10:, :] = True
        d = distance_transform(RasterTile((0, 0), 40, bits), DistanceMode.INTERIOR).distance_nm()
        for k in range(1, 6):
            np.testing.assert_array_equal(d[10 + k - 1, :], k * 40.0)
        assert not d[:10].any()

    def test_no_complement(self):
        bits = np.ones((4, 4), dtype=bool)
        dm = distance_transform(RasterTile((0, 0), 10, bits), DistanceMode.INTERIOR)
        assert (dm.sq_px == NO_COMPLEMENT).all()
        assert np.isinf(dm.distance_nm()).all()

    def test_empty_measured_set(self):
        bits = np.zeros((4, 4), dtype=bool)
        dm = distance_transform(RasterTile((0, 0), 10, bits), DistanceMode.INTERIOR)
        assert not dm.sq_px.any()

    @pytest.mark.parametrize('mode', [DistanceMode.INTERIOR, DistanceMode.EXTERIOR])
    def test_matches_brute_force(self, rng, mode):
        for _ in range(5):
            bits = rng.random((64, 64)) < rng.uniform(0.1, 0.9)
            dm = distance_transform(RasterTile((0, 0), 25, bits), mode)
            np.testing.assert_array_equal(dm.sq_px, brute_force_sq(bits, mode))

    @pytest.mark.slow
    def test_matches_brute_force_hundred_bitmaps(self, rng):
        for i in range(100):
            mode = DistanceMode.INTERIOR if i % 2 else DistanceMode.EXTERIOR
            bits = rng.random((64, 64)) < rng.uniform(0.05, 0.95)
            dm = distance_transform(RasterTile((0, 0), 25, bits), mode)
            np.testing.assert_array_equal(dm.sq_px, brute_force_sq(bits, mode))

    def test_halo_too_narrow(self):
        tile = RasterTile((0, 0), 10, np.zeros((10, 10), dtype=bool), halo=1)
        with pytest.raises(ContractViolation):
            distance_transform(tile, DistanceMode.EXTERIOR, max_distance_nm=100.0)

    def test_halo_sufficient(self):
        halo = required_halo_px(100.0, 10)
        assert halo == 11
        tile = RasterTile((0, 0), 10, np.zeros((30, 30), dtype=bool), halo=halo)
        distance_transform(tile, DistanceMode.EXTERIOR, max_distance_nm=100.0)


class TestTiling:
    def test_windows_partition_extent(self):
        extent = Rect(0, 0, 10_500, 7_000)
        windows = tile_windows(extent, 4_000)
        assert sum(w.area for w in windows) == extent.area
        for i, a in enumerate(windows):
            assert extent.contains_rect(a)
            for b in windows[i + 1:]:
                assert not a.intersects(b)

    def test_snap_outward(self):
        assert snap_outward(Rect(150, -50, 950, 1001), 100, (0, 0)) == Rect(100, -100, 1000, 1100)
        assert snap_outward(Rect(0, 0, 1000, 1000), 100, (0, 0)) == Rect(0, 0, 1000, 1000)

    def test_required_halo(self):
        assert required_halo_px(0.0, 25) == 1
        assert required_halo_px(500.0, 25) == 21
        assert required_halo_px(510.0, 25) == 22
