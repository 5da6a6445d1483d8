import numpy as np
import pytest

from src.models.errors import GeometryError
from src.models.layout_db import LayoutDB, Polygon, RasterTile, Rect


class TestPolygon:
    def test_closing_vertex_and_orientation_normalized(self):
        clockwise = Polygon.from_points([(0, 0), (0, 10), (10, 10), (10, 0), (0, 0)], 2)
        assert clockwise == Polygon.rect(0, 0, 10, 10, 2)

    def test_ring_starts_at_lowest_left_vertex(self):
        poly = Polygon.from_points([(10, 10), (0, 10), (0, 0), (10, 0)], 1)
        assert poly.vertices[0] == (0, 0)

    def test_collinear_vertices_merged(self):
        poly = Polygon.from_points([(0, 0), (500, 0), (1000, 0), (1000, 1000), (0, 1000)], 1)
        assert poly.is_rect
        assert len(poly.vertices) == 4

    def test_non_rectilinear_rejected(self):
        with pytest.raises(GeometryError):
            Polygon.from_points([(0, 0), (10, 5), (10, 10), (0, 10)], 1)

    def test_self_intersection_rejected(self):
        with pytest.raises(GeometryError):
            Polygon.from_points([(0, 0), (3, 0), (3, 1), (1, 1), (1, -1), (0, -1)], 1)

    def test_zero_area_rejected(self):
        with pytest.raises(GeometryError):
            Polygon.rect(0, 0, 0, 10, 1)

    def test_negative_layer_rejected(self):
        with pytest.raises(GeometryError):
            Polygon.rect(0, 0, 10, 10, -1)

    def test_bbox(self, l_shape):
        assert l_shape.bbox == Rect(0, 0, 2000, 1000)
        assert not l_shape.is_rect

    def test_translated(self, l_shape):
        moved = l_shape.translated(100, -50)
        assert moved.bbox == Rect(100, -50, 2100, 950)


class TestLayoutDB:
    def test_counts(self, l_shape):
        db = LayoutDB(Rect(0, 0, 5000, 5000), {1: [l_shape], 3: [Polygon.rect(0, 0, 10, 10, 3)]})
        assert db.layer_ids == [1, 3]
        assert db.polygon_count == 2
        assert db.vertex_count == 10
        assert db.total_area() == 1_500_100
        assert db.total_area(3) == 100

    def test_validate_rejects_shape_outside_die(self):
        db = LayoutDB(Rect(0, 0, 100, 100), {1: [Polygon.rect(50, 50, 150, 80, 1)]})
        with pytest.raises(GeometryError):
            db.validate()

    def test_validate_rejects_mislabeled_layer(self):
        db = LayoutDB(Rect(0, 0, 100, 100), {1: [Polygon.rect(0, 0, 10, 10, 2)]})
        with pytest.raises(GeometryError):
            db.validate()

    def test_canonical_sorts_and_drops_empty_layers(self):
        a = Polygon.rect(50, 0, 60, 10, 1)
        b = Polygon.rect(0, 0, 10, 10, 1)
        db = LayoutDB(Rect(0, 0, 100, 100), {2: [], 1: [a, b]}).canonical()
        assert list(db.layers) == [1]
        assert db.layers[1] == [b, a]

    def test_unknown_layer_is_empty(self):
        db = LayoutDB(Rect(0, 0, 100, 100))
        assert db.polygons(4) == []
        boxes, is_rect = db.layer_arrays(4)
        assert boxes.shape == (0, 4)
        assert is_rect.shape == (0,)

    def test_layer_arrays(self, l_shape):
        db = LayoutDB(Rect(0, 0, 5000, 5000), {1: [Polygon.rect(0, 0, 10, 20, 1), l_shape]})
        boxes, is_rect = db.layer_arrays(1)
        np.testing.assert_array_equal(boxes, [[0, 0, 10, 20], [0, 0, 2000, 1000]])
        np.testing.assert_array_equal(is_rect, [True, False])

    def test_with_polygons_leaves_original(self):
        db = LayoutDB(Rect(0, 0, 100, 100), {1: [Polygon.rect(0, 0, 10, 10, 1)]})
        grown = db.with_polygons(5, [Polygon.rect(20, 20, 30, 30, 5)])
        assert db.layer_ids == [1]
        assert grown.layer_ids == [1, 5]
        assert grown.without_layer(5).layers == db.layers


class TestRasterTile:
    def test_core_and_window(self):
        bits = np.zeros((14, 12), dtype=bool)
        tile = RasterTile(origin=(-200, -100), pixel_size=100, bits=bits, halo=2)
        assert tile.core.shape == (10, 8)
        assert tile.core_window == Rect(0, 100, 800, 1100)
