"""Layout models: rectilinear polygons, the layered layout database and raster tiles.

All coordinates are exact integer nanometers. Polygons are normalized on
construction (closing vertex dropped, collinear vertices merged,
counter-clockwise orientation, ring starting at the lowest-left vertex) so
that two polygons describing the same shape compare equal.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.models.errors import GeometryError


Point = Tuple[int, int]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in nanometers."""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def is_empty(self) -> bool:
        return self.x1 <= self.x0 or self.y1 <= self.y0

    def contains_rect(self, other: 'Rect') -> bool:
        """Check whether other lies inside this rectangle (boundaries included)."""
        return (self.x0 <= other.x0 and other.x1 <= self.x1
                and self.y0 <= other.y0 and other.y1 <= self.y1)

    def contains_point(self, x: float, y: float) -> bool:
        """Closed containment test used for user-supplied coordinates."""
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def intersects(self, other: 'Rect') -> bool:
        return (self.x0 < other.x1 and other.x0 < self.x1
                and self.y0 < other.y1 and other.y0 < self.y1)

    def expanded(self, margin: int) -> 'Rect':
        return Rect(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def _drop_collinear(ring: List[Point]) -> List[Point]:
    """Remove vertices lying on a straight run (including zero-area spikes)."""
    changed = True
    while changed and len(ring) >= 3:
        changed = False
        n = len(ring)
        keep = []
        for i in range(n):
            a, b, c = ring[i - 1], ring[i], ring[(i + 1) % n]
            if (a[0] == b[0] == c[0]) or (a[1] == b[1] == c[1]):
                changed = True
                continue
            keep.append(b)
        if changed:
            ring = keep
    return ring


def _twice_signed_area(ring: Sequence[Point]) -> int:
    total = 0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return total


def _check_simple(ring: Sequence[Point]) -> None:
    """Raise GeometryError if non-adjacent edges of a rectilinear ring touch or cross."""
    n = len(ring)
    if n <= 4:
        return
    pts = np.asarray(ring, dtype=np.int64)
    nxt = np.roll(pts, -1, axis=0)
    idx = np.arange(n)
    horizontal = pts[:, 1] == nxt[:, 1]
    h_idx = idx[horizontal]
    v_idx = idx[~horizontal]

    hy = pts[h_idx, 1]
    hx0 = np.minimum(pts[h_idx, 0], nxt[h_idx, 0])
    hx1 = np.maximum(pts[h_idx, 0], nxt[h_idx, 0])
    vx = pts[v_idx, 0]
    vy0 = np.minimum(pts[v_idx, 1], nxt[v_idx, 1])
    vy1 = np.maximum(pts[v_idx, 1], nxt[v_idx, 1])

    touch = ((hx0[:, None] <= vx[None, :]) & (vx[None, :] <= hx1[:, None])
             & (vy0[None, :] <= hy[:, None]) & (hy[:, None] <= vy1[None, :]))
    diff = np.abs(h_idx[:, None] - v_idx[None, :])
    adjacent = (diff == 1) | (diff == n - 1)
    if np.any(touch & ~adjacent):
        raise GeometryError("polygon is self-intersecting")

    # Parallel edges of the same orientation are never adjacent in a reduced ring.
    same_line = hy[:, None] == hy[None, :]
    overlap = (hx0[:, None] <= hx1[None, :]) & (hx0[None, :] <= hx1[:, None])
    np.fill_diagonal(same_line, False)
    if np.any(same_line & overlap):
        raise GeometryError("polygon is self-touching")
    same_col = vx[:, None] == vx[None, :]
    overlap = (vy0[:, None] <= vy1[None, :]) & (vy0[None, :] <= vy1[:, None])
    np.fill_diagonal(same_col, False)
    if np.any(same_col & overlap):
        raise GeometryError("polygon is self-touching")


@dataclass(frozen=True)
class Polygon:
    """Closed rectilinear ring on one layer, stored without the closing vertex."""
    vertices: Tuple[Point, ...]
    layer: int

    @classmethod
    def from_points(cls, points: Iterable[Sequence[int]], layer: int) -> 'Polygon':
        """Build a normalized polygon, validating the rectilinear ring.

        Args:
            points: Ring vertices; a repeated closing vertex is accepted.
            layer: Non-negative layer id.

        Returns:
            Normalized Polygon.

        Raises:
            GeometryError: If the ring is degenerate, non-rectilinear or
                           self-intersecting.
        """
        if layer < 0:
            raise GeometryError(f"negative layer id {layer}")
        ring: List[Point] = []
        for p in points:
            q = (int(p[0]), int(p[1]))
            if not ring or ring[-1] != q:
                ring.append(q)
        while len(ring) > 1 and ring[0] == ring[-1]:
            ring.pop()
        if len(ring) < 4:
            raise GeometryError(f"polygon needs at least 4 distinct vertices, got {len(ring)}")
        n = len(ring)
        for i in range(n):
            (x0, y0), (x1, y1) = ring[i], ring[(i + 1) % n]
            if x0 != x1 and y0 != y1:
                raise GeometryError(
                    f"non-rectilinear edge ({x0},{y0})-({x1},{y1})"
                )
        ring = _drop_collinear(ring)
        if len(ring) < 4:
            raise GeometryError("polygon has zero area")
        area2 = _twice_signed_area(ring)
        if area2 == 0:
            raise GeometryError("polygon has zero area")
        if area2 < 0:
            ring.reverse()
        start = min(range(len(ring)), key=lambda i: ring[i])
        ring = ring[start:] + ring[:start]
        _check_simple(ring)
        return cls(tuple(ring), layer)

    @classmethod
    def rect(cls, x0: int, y0: int, x1: int, y1: int, layer: int) -> 'Polygon':
        """Rectangle polygon; corners may be given in any order."""
        xa, xb = sorted((int(x0), int(x1)))
        ya, yb = sorted((int(y0), int(y1)))
        if xa == xb or ya == yb:
            raise GeometryError(f"rectangle ({x0},{y0})-({x1},{y1}) has zero area")
        if layer < 0:
            raise GeometryError(f"negative layer id {layer}")
        return cls(((xa, ya), (xb, ya), (xb, yb), (xa, yb)), layer)

    @property
    def bbox(self) -> Rect:
        xs = [v[0] for v in self.vertices]
        ys = [v[1] for v in self.vertices]
        return Rect(min(xs), min(ys), max(xs), max(ys))

    @property
    def is_rect(self) -> bool:
        return len(self.vertices) == 4

    @property
    def sort_key(self) -> Tuple:
        box = self.bbox
        return (self.layer, box.x0, box.y0, box.x1, box.y1, self.vertices)

    def translated(self, dx: int, dy: int) -> 'Polygon':
        return Polygon.from_points([(x + dx, y + dy) for x, y in self.vertices], self.layer)


@dataclass
class LayoutDB:
    """Layered polygon database with die bounds, coordinates in nanometers."""
    die_bbox: Rect
    layers: Dict[int, List[Polygon]] = field(default_factory=dict)
    unit_per_db: int = 1  # nanometers per database unit of the source file
    _arrays: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    @property
    def layer_ids(self) -> List[int]:
        return sorted(self.layers)

    def polygons(self, layer: int) -> List[Polygon]:
        """Polygons of a layer; an unknown layer yields an empty list."""
        return list(self.layers.get(layer, []))

    @property
    def polygon_count(self) -> int:
        return sum(len(polys) for polys in self.layers.values())

    @property
    def vertex_count(self) -> int:
        return sum(len(p.vertices) for polys in self.layers.values() for p in polys)

    def validate(self) -> None:
        """Check that every polygon lies inside the die.

        Raises:
            GeometryError: On an empty die or a polygon outside it.
        """
        if self.die_bbox.is_empty():
            raise GeometryError("die bounding box is empty")
        if self.unit_per_db <= 0:
            raise GeometryError(f"invalid database unit {self.unit_per_db} nm")
        for layer, polys in self.layers.items():
            if layer < 0:
                raise GeometryError(f"negative layer id {layer}")
            for poly in polys:
                if poly.layer != layer:
                    raise GeometryError(f"polygon tagged layer {poly.layer} stored under {layer}")
                if not self.die_bbox.contains_rect(poly.bbox):
                    raise GeometryError(
                        f"polygon on layer {layer} at {poly.bbox.as_tuple()} lies outside the die"
                    )

    def canonical(self) -> 'LayoutDB':
        """Copy with empty layers dropped and polygons sorted by sort_key."""
        layers = {
            layer: sorted(polys, key=lambda p: p.sort_key)
            for layer, polys in sorted(self.layers.items()) if polys
        }
        return LayoutDB(die_bbox=self.die_bbox, layers=layers, unit_per_db=self.unit_per_db)

    def with_polygons(self, layer: int, polygons: Iterable[Polygon]) -> 'LayoutDB':
        """Copy with polygons appended to a layer."""
        layers = {k: list(v) for k, v in self.layers.items()}
        layers.setdefault(layer, []).extend(polygons)
        return LayoutDB(die_bbox=self.die_bbox, layers=layers, unit_per_db=self.unit_per_db)

    def without_layer(self, layer: int) -> 'LayoutDB':
        layers = {k: list(v) for k, v in self.layers.items() if k != layer}
        return LayoutDB(die_bbox=self.die_bbox, layers=layers, unit_per_db=self.unit_per_db)

    def layer_arrays(self, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        """Bounding boxes (n, 4) as int64 and a rectangle mask for one layer.

        The arrays are cached; the database must not be mutated afterwards.
        """
        cached = self._arrays.get(layer)
        if cached is None:
            polys = self.layers.get(layer, [])
            boxes = np.array([p.bbox.as_tuple() for p in polys], dtype=np.int64).reshape(-1, 4)
            is_rect = np.array([p.is_rect for p in polys], dtype=bool)
            cached = (boxes, is_rect)
            self._arrays[layer] = cached
        return cached

    def total_area(self, layer: Optional[int] = None) -> int:
        """Sum of polygon areas (overlaps counted twice)."""
        from src.services.geometry import polygon_area
        layers = [layer] if layer is not None else self.layer_ids
        return sum(polygon_area(p) for l in layers for p in self.layers.get(l, []))


@dataclass(eq=False)
class RasterTile:
    """Occupancy bitmap of one tile, padded by a halo on every side.

    bits is indexed [row, column]; row 0 is the lowest y. origin is the
    lower-left corner of the padded bitmap.
    """
    origin: Tuple[int, int]
    pixel_size: int
    bits: np.ndarray
    halo: int = 0  # padding pixels on each side

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def core(self) -> np.ndarray:
        """Bitmap without the halo."""
        h = self.halo
        return self.bits[h:self.height - h, h:self.width - h]

    @property
    def core_window(self) -> Rect:
        x0 = self.origin[0] + self.halo * self.pixel_size
        y0 = self.origin[1] + self.halo * self.pixel_size
        return Rect(x0, y0,
                    x0 + (self.width - 2 * self.halo) * self.pixel_size,
                    y0 + (self.height - 2 * self.halo) * self.pixel_size)
