"""Geometry core: exact polygon area, tile rasterization and Euclidean distance transforms.

Rasterization samples pixel centers. A pixel is set when its center lies
inside a polygon, where "inside" is the half-open box rule: a center on a
polygon's lower or left boundary is inside, one on the upper or right
boundary is outside. All index arithmetic is integer.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.models.data_models import DistanceMode
from src.models.errors import ConfigError, ContractViolation, GeometryError
from src.models.layout_db import LayoutDB, Polygon, RasterTile, Rect

logger = logging.getLogger(__name__)

# Squared distance reported when the tile holds no pixel of the complementary set.
NO_COMPLEMENT = np.iinfo(np.int64).max


def polygon_area(polygon: Polygon) -> int:
    """Exact shoelace area in nm^2.

    Python integers are unbounded, so products of large nanometer
    coordinates cannot overflow.

    Raises:
        GeometryError: If the ring has fewer than 4 vertices or zero area.
    """
    verts = polygon.vertices
    if len(verts) < 4:
        raise GeometryError(f"polygon needs at least 4 vertices, got {len(verts)}")
    twice = 0
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        twice += int(x0) * int(y1) - int(x1) * int(y0)
    if twice == 0:
        raise GeometryError("polygon has zero area")
    return abs(twice) // 2


def first_center_index(coords, origin: int, pixel_size: int):
    """Index of the first pixel whose center is >= coord.

    Pixel i has its center at origin + (i + 0.5) * pixel_size; working with
    doubled coordinates keeps the comparison exact.
    """
    num = 2 * (np.asarray(coords, dtype=np.int64) - origin) - pixel_size
    den = 2 * pixel_size
    return -((-num) // den)


def required_halo_px(reach_nm: float, pixel_size: int) -> int:
    """Halo width (pixels) that keeps distances exact up to reach_nm, plus one pixel."""
    if reach_nm <= 0:
        return 1
    return int(math.ceil(reach_nm / pixel_size)) + 1


def require_halo(halo_px: int, pixel_size: int, reach_nm: float) -> None:
    """Raise ContractViolation when a tile's halo is narrower than a model's reach."""
    needed = required_halo_px(reach_nm, pixel_size)
    if halo_px < needed:
        raise ContractViolation(
            f"halo of {halo_px} px ({halo_px * pixel_size} nm) is narrower than the "
            f"{needed} px needed for a reach of {reach_nm:g} nm"
        )


def _check_window(window: Rect, pixel_size: int) -> None:
    if pixel_size <= 0:
        raise ConfigError(f"pixel size must be positive, got {pixel_size}")
    if window.is_empty():
        raise ConfigError(f"empty tile window {window.as_tuple()}")
    if window.width % pixel_size or window.height % pixel_size:
        raise ConfigError(
            f"pixel size {pixel_size} nm does not divide tile {window.width}x{window.height} nm"
        )


def intersecting_mask(boxes: np.ndarray, window: Rect) -> np.ndarray:
    """Boolean mask of the boxes (n, 4) that overlap a window with positive area."""
    return ((boxes[:, 0] < window.x1) & (boxes[:, 2] > window.x0)
            & (boxes[:, 1] < window.y1) & (boxes[:, 3] > window.y0))


def paint_rects(bits: np.ndarray, boxes: np.ndarray, window: Rect, pixel_size: int) -> None:
    """Set the pixels of axis-aligned boxes (n, 4) inside a window's bitmap."""
    if len(boxes) == 0:
        return
    height, width = bits.shape
    c0 = np.clip(first_center_index(boxes[:, 0], window.x0, pixel_size), 0, width)
    c1 = np.clip(first_center_index(boxes[:, 2], window.x0, pixel_size), 0, width)
    r0 = np.clip(first_center_index(boxes[:, 1], window.y0, pixel_size), 0, height)
    r1 = np.clip(first_center_index(boxes[:, 3], window.y0, pixel_size), 0, height)
    keep = (c1 > c0) & (r1 > r0)
    for a, b, c, d in zip(r0[keep], r1[keep], c0[keep], c1[keep]):
        bits[a:b, c:d] = True


def paint_polygon(bits: np.ndarray, polygon: Polygon, window: Rect, pixel_size: int) -> None:
    """Set the pixels of a general rectilinear polygon (even-odd on vertical edges)."""
    height, width = bits.shape
    box = polygon.bbox
    c_lo = int(np.clip(first_center_index(box.x0, window.x0, pixel_size), 0, width))
    c_hi = int(np.clip(first_center_index(box.x1, window.x0, pixel_size), 0, width))
    r_lo = int(np.clip(first_center_index(box.y0, window.y0, pixel_size), 0, height))
    r_hi = int(np.clip(first_center_index(box.y1, window.y0, pixel_size), 0, height))
    if c_hi <= c_lo or r_hi <= r_lo:
        return
    toggles = np.zeros((r_hi - r_lo, c_hi - c_lo), dtype=np.uint8)
    verts = polygon.vertices
    n = len(verts)
    for i in range(n):
        (xa, ya), (xb, yb) = verts[i], verts[(i + 1) % n]
        if xa != xb:
            continue
        lo, hi = (ya, yb) if ya < yb else (yb, ya)
        r0 = int(np.clip(first_center_index(lo, window.y0, pixel_size), r_lo, r_hi)) - r_lo
        r1 = int(np.clip(first_center_index(hi, window.y0, pixel_size), r_lo, r_hi)) - r_lo
        c = int(first_center_index(xa, window.x0, pixel_size)) - c_lo
        c = max(c, 0)
        if r1 > r0 and c < toggles.shape[1]:
            toggles[r0:r1, c] ^= 1
    inside = np.bitwise_xor.accumulate(toggles, axis=1).astype(bool)
    bits[r_lo:r_hi, c_lo:c_hi] |= inside


def decompose_rectangles(polygon: Polygon) -> List[Tuple[int, int, int, int]]:
    """Split a rectilinear polygon into disjoint horizontal slab rectangles."""
    verts = polygon.vertices
    n = len(verts)
    edges = []
    for i in range(n):
        (xa, ya), (xb, yb) = verts[i], verts[(i + 1) % n]
        if xa == xb:
            edges.append((xa, min(ya, yb), max(ya, yb)))
    ys = sorted({y for _, y in verts})
    rects = []
    for ya, yb in zip(ys, ys[1:]):
        xs = sorted(x for x, lo, hi in edges if lo <= ya and hi >= yb)
        for x0, x1 in zip(xs[0::2], xs[1::2]):
            rects.append((x0, ya, x1, yb))
    return rects


def paint_cover_rects(bits: np.ndarray, boxes: np.ndarray, window: Rect, pixel_size: int) -> None:
    """Set every pixel that overlaps a box with positive area (outward rounding)."""
    if len(boxes) == 0:
        return
    height, width = bits.shape
    c0 = np.clip((boxes[:, 0] - window.x0) // pixel_size, 0, width)
    c1 = np.clip(-((window.x0 - boxes[:, 2]) // pixel_size), 0, width)
    r0 = np.clip((boxes[:, 1] - window.y0) // pixel_size, 0, height)
    r1 = np.clip(-((window.y0 - boxes[:, 3]) // pixel_size), 0, height)
    keep = (c1 > c0) & (r1 > r0)
    for a, b, c, d in zip(r0[keep], r1[keep], c0[keep], c1[keep]):
        bits[a:b, c:d] = True


def rasterize_layers(db: LayoutDB, layers: Iterable[int], window: Rect, pixel_size: int,
                     halo: int = 0, extra_boxes: Optional[np.ndarray] = None,
                     coverage: bool = False) -> RasterTile:
    """Rasterize the union of several layers (plus optional extra boxes) over a tile.

    With coverage=True every pixel touched by a shape with positive area is
    set instead of center sampling; the result is a superset of the shapes.

    Args:
        db: Layout database.
        layers: Layer ids; unknown layers contribute nothing.
        window: Core tile window, nm.
        pixel_size: Pixel edge, nm; must divide the window size.
        halo: Padding in pixels added on every side of the window.
        extra_boxes: Additional (n, 4) boxes, e.g. dummy squares.
        coverage: Paint touched pixels rather than sampled centers.

    Returns:
        RasterTile covering the padded window.

    Raises:
        ConfigError: On an invalid pixel size.
        ContractViolation: If the window does not overlap the die.
    """
    _check_window(window, pixel_size)
    if halo < 0:
        raise ConfigError(f"halo must be >= 0, got {halo}")
    if not window.intersects(db.die_bbox):
        raise ContractViolation(f"tile {window.as_tuple()} lies outside the die")
    padded = window.expanded(halo * pixel_size)
    bits = np.zeros((padded.height // pixel_size, padded.width // pixel_size), dtype=bool)
    for layer in layers:
        boxes, is_rect = db.layer_arrays(layer)
        if len(boxes) == 0:
            continue
        hit = intersecting_mask(boxes, padded)
        polys = db.layers[layer]
        if coverage:
            paint_cover_rects(bits, boxes[hit & is_rect], padded, pixel_size)
            for i in np.nonzero(hit & ~is_rect)[0]:
                pieces = np.asarray(decompose_rectangles(polys[i]), dtype=np.int64).reshape(-1, 4)
                paint_cover_rects(bits, pieces, padded, pixel_size)
        else:
            paint_rects(bits, boxes[hit & is_rect], padded, pixel_size)
            for i in np.nonzero(hit & ~is_rect)[0]:
                paint_polygon(bits, polys[i], padded, pixel_size)
    if extra_boxes is not None and len(extra_boxes):
        extra_boxes = np.asarray(extra_boxes, dtype=np.int64).reshape(-1, 4)
        extra_boxes = extra_boxes[intersecting_mask(extra_boxes, padded)]
        painter = paint_cover_rects if coverage else paint_rects
        painter(bits, extra_boxes, padded, pixel_size)
    return RasterTile(origin=(padded.x0, padded.y0), pixel_size=pixel_size, bits=bits, halo=halo)


def rasterize_tile(db: LayoutDB, layer: int, window: Rect, pixel_size: int,
                   halo: int = 0) -> RasterTile:
    """Rasterize one layer over a tile window (center sampling, deterministic)."""
    return rasterize_layers(db, [layer], window, pixel_size, halo)


@dataclass(eq=False)
class DistanceMap:
    """Squared pixel-center distances to the nearest pixel of the complementary set."""
    sq_px: np.ndarray          # int64, pixel units squared
    pixel_size: int
    halo: int
    mode: DistanceMode
    origin: Tuple[int, int] = (0, 0)

    def distance_nm(self) -> np.ndarray:
        """Float distances in nm; +inf where the tile holds no complementary pixel."""
        out = np.sqrt(self.sq_px.astype(np.float64)) * self.pixel_size
        out[self.sq_px == NO_COMPLEMENT] = np.inf
        return out

    @property
    def core(self) -> np.ndarray:
        h = self.halo
        rows, cols = self.sq_px.shape
        return self.sq_px[h:rows - h, h:cols - h]


def distance_transform(tile: RasterTile, mode: DistanceMode,
                       max_distance_nm: Optional[float] = None) -> DistanceMap:
    """Exact Euclidean distance transform of a raster tile.

    Interior mode measures set pixels against the background, exterior mode
    measures background pixels against the set; pixels of the other side get
    distance 0. Squared distances are rebuilt in integer arithmetic from the
    nearest-pixel indices returned by scipy, so they are exact.

    Args:
        tile: Raster tile including its halo.
        mode: INTERIOR or EXTERIOR.
        max_distance_nm: Largest distance the caller will use; checked
                         against the tile's halo.

    Raises:
        ContractViolation: If the halo is too narrow for max_distance_nm.
    """
    if max_distance_nm is not None:
        require_halo(tile.halo, tile.pixel_size, max_distance_nm)
    measured = tile.bits if mode == DistanceMode.INTERIOR else ~tile.bits
    if not measured.any():
        sq = np.zeros(measured.shape, dtype=np.int64)
    elif measured.all():
        sq = np.full(measured.shape, NO_COMPLEMENT, dtype=np.int64)
    else:
        indices = ndimage.distance_transform_edt(
            measured, return_distances=False, return_indices=True
        )
        rows, cols = np.indices(measured.shape, dtype=np.int64)
        dy = indices[0].astype(np.int64) - rows
        dx = indices[1].astype(np.int64) - cols
        sq = dy * dy + dx * dx
    return DistanceMap(sq_px=sq, pixel_size=tile.pixel_size, halo=tile.halo,
                       mode=mode, origin=tile.origin)


def tile_windows(extent: Rect, tile_size: int) -> List[Rect]:
    """Split an extent into tiles of tile_size (last row/column truncated), row-major from the bottom."""
    if tile_size <= 0:
        raise ConfigError(f"tile size must be positive, got {tile_size}")
    windows = []
    for y0 in range(extent.y0, extent.y1, tile_size):
        for x0 in range(extent.x0, extent.x1, tile_size):
            windows.append(Rect(x0, y0, min(x0 + tile_size, extent.x1), min(y0 + tile_size, extent.y1)))
    return windows


def snap_outward(rect: Rect, step: int, origin: Tuple[int, int]) -> Rect:
    """Grow a rectangle so its edges sit on multiples of step measured from origin."""
    ox, oy = origin
    x0 = ox + ((rect.x0 - ox) // step) * step
    y0 = oy + ((rect.y0 - oy) // step) * step
    x1 = ox + -((-(rect.x1 - ox)) // step) * step
    y1 = oy + -((-(rect.y1 - oy)) // step) * step
    return Rect(x0, y0, x1, y1)


def boxes_in_window(boxes: np.ndarray, window: Rect) -> np.ndarray:
    """Rows of boxes (n, 4) that overlap a window."""
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    return boxes[intersecting_mask(boxes, window)]


