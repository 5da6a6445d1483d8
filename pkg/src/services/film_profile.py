"""Film profile models: dielectric elevation over features and volumetric pattern density.

Pattern density of a cell is the dielectric volume above the open-field
level divided by (step height x cell area). Distances to a feature edge
are taken as pixel-center distance minus half a pixel, so a pixel next to
an edge sits half a pixel from it.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from src.models.data_models import (
    DensityGrid,
    DistanceMode,
    ElevationTile,
    FilmKind,
    FilmStack,
    GridKind,
    StepSpec,
)
from src.models.errors import CmpToolkitError, ConfigError, ContractViolation
from src.models.layout_db import LayoutDB, RasterTile, Rect
from src.services.geometry import (
    DistanceMap,
    distance_transform,
    rasterize_layers,
    require_halo,
    required_halo_px,
    snap_outward,
    tile_windows,
)

logger = logging.getLogger(__name__)


class FilmProfileError(CmpToolkitError):
    """Exception raised for film model and density scan errors."""
    pass


# ============================================================
# Elevation models
# ============================================================

def elevation_layout(tile: RasterTile, step: StepSpec) -> ElevationTile:
    """Bare mask: full step height on feature pixels, no film."""
    return ElevationTile(tile.origin, tile.pixel_size, tile.halo, step.step_height,
                         tile.bits.astype(np.float64) * step.step_height)


def elevation_conformal(feature_dt: DistanceMap, step: StepSpec, t_dep: float) -> ElevationTile:
    """Conformal film: the feature set dilated by t_dep, at full step height.

    Args:
        feature_dt: Exterior distance map of the feature raster.
        step: Step geometry.
        t_dep: Deposition thickness, nm.

    Raises:
        ContractViolation: If the map's halo is narrower than t_dep.
    """
    if feature_dt.mode != DistanceMode.EXTERIOR:
        raise ContractViolation("conformal model needs an exterior distance map")
    p = feature_dt.pixel_size
    require_halo(feature_dt.halo, p, t_dep)
    sq = feature_dt.sq_px
    # edge distance sqrt(sq)*p - p/2 <= t_dep, squared without the root
    covered = (sq == 0) | (4.0 * sq.astype(np.float64) * p * p <= (2.0 * t_dep + p) ** 2)
    elevation = covered.astype(np.float64) * step.step_height
    return ElevationTile(feature_dt.origin, p, feature_dt.halo, step.step_height, elevation,
                         reach_nm=float(t_dep))


def elevation_hdp(feature_dt: DistanceMap, step: StepSpec, facet_angle_deg: float) -> ElevationTile:
    """HDP film: faceted caps, elevation = min(step, edge distance * tan(theta)) on features.

    Raises:
        ContractViolation: If the map's halo is narrower than step/tan(theta).
    """
    if feature_dt.mode != DistanceMode.INTERIOR:
        raise ContractViolation("HDP model needs an interior distance map")
    if not 0.0 < facet_angle_deg < 90.0:
        raise ConfigError(f"facet angle must lie in (0, 90), got {facet_angle_deg}")
    p = feature_dt.pixel_size
    tan_theta = math.tan(math.radians(facet_angle_deg))
    reach = step.step_height / tan_theta
    require_halo(feature_dt.halo, p, reach)
    sq = feature_dt.sq_px
    edge = np.sqrt(sq.astype(np.float64)) * p - 0.5 * p
    elevation = np.where(sq > 0, np.minimum(step.step_height, np.maximum(edge, 0.0) * tan_theta), 0.0)
    return ElevationTile(feature_dt.origin, p, feature_dt.halo, step.step_height, elevation,
                         reach_nm=reach)


def disk_footprint(radius_nm: float, pixel_size: int) -> np.ndarray:
    """Boolean disk of pixel offsets whose center distance is <= radius."""
    r = int(math.floor(radius_nm / pixel_size))
    off = np.arange(-r, r + 1)
    dy, dx = np.meshgrid(off, off, indexing='ij')
    return (dx * dx + dy * dy) * float(pixel_size) ** 2 <= float(radius_nm) ** 2


def elevation_composite(hdp_tile: ElevationTile, t_conf: float) -> ElevationTile:
    """HDP followed by a conformal film: flat-disk grey dilation of the HDP surface, clamped.

    Raises:
        ContractViolation: If the tile's halo cannot absorb another t_conf of reach.
    """
    if t_conf < 0:
        raise ConfigError(f"t_conf must be >= 0, got {t_conf}")
    p = hdp_tile.pixel_size
    reach = hdp_tile.reach_nm + t_conf
    require_halo(hdp_tile.halo, p, reach)
    footprint = disk_footprint(t_conf, p)
    if footprint.size == 1:
        grown = hdp_tile.elevation.copy()
    else:
        grown = ndimage.grey_dilation(hdp_tile.elevation, footprint=footprint, mode='nearest')
    elevation = np.minimum(grown, hdp_tile.step_height)
    return ElevationTile(hdp_tile.origin, p, hdp_tile.halo, hdp_tile.step_height, elevation,
                         reach_nm=reach)


def compute_elevation(tile: RasterTile, film: FilmStack, step: StepSpec) -> ElevationTile:
    """Run the film model selected by film.kind on a raster tile."""
    if film.kind == FilmKind.LAYOUT:
        return elevation_layout(tile, step)
    if film.kind == FilmKind.CONFORMAL:
        dt = distance_transform(tile, DistanceMode.EXTERIOR, max_distance_nm=film.t_conf)
        return elevation_conformal(dt, step, film.t_conf)
    dt = distance_transform(tile, DistanceMode.INTERIOR, max_distance_nm=step.step_height / film.tan_theta)
    hdp = elevation_hdp(dt, step, film.hdp_facet_angle_deg)
    if film.kind == FilmKind.HDP:
        return hdp
    return elevation_composite(hdp, film.t_conf)


# ============================================================
# Cell aggregation
# ============================================================

def cell_pattern_density(tile: ElevationTile, cell: Rect) -> float:
    """Volume density of one cell window: sum(elevation) / (step * pixel count).

    Raises:
        FilmProfileError: On an empty window or one not aligned to the tile's pixels.
        ContractViolation: If the window lies outside the tile's core.
    """
    if cell.is_empty():
        raise FilmProfileError("empty cell window")
    p = tile.pixel_size
    core = tile.core_window
    if not core.contains_rect(cell):
        raise ContractViolation(f"cell {cell.as_tuple()} is not inside tile core {core.as_tuple()}")
    if (cell.x0 - tile.origin[0]) % p or (cell.y0 - tile.origin[1]) % p or cell.width % p or cell.height % p:
        raise FilmProfileError(f"cell {cell.as_tuple()} is not aligned to the {p} nm pixel grid")
    c0 = (cell.x0 - tile.origin[0]) // p
    r0 = (cell.y0 - tile.origin[1]) // p
    block = tile.elevation[r0:r0 + cell.height // p, c0:c0 + cell.width // p]
    return float(np.clip(block.mean() / tile.step_height, 0.0, 1.0))


def cell_densities(tile: ElevationTile, cell_size: int) -> np.ndarray:
    """Densities of every cell in the tile core, shape (rows, cols) of cells."""
    per = cell_size // tile.pixel_size
    core = tile.core
    rows, cols = core.shape
    if cell_size % tile.pixel_size or rows % per or cols % per:
        raise FilmProfileError(
            f"tile core {cols}x{rows} px is not a whole number of {cell_size} nm cells"
        )
    blocks = core.reshape(rows // per, per, cols // per, per).mean(axis=(1, 3))
    return np.clip(blocks / tile.step_height, 0.0, 1.0)


# ============================================================
# Die-wide scan
# ============================================================

class DensityScanner:
    """Tiled, halo-padded die scan producing the raw pattern-density grid.

    Tiles are processed in a thread pool; results are merged in tile order,
    so the grid does not depend on the worker count.
    """

    def __init__(self, film: FilmStack, step: StepSpec, pixel_size: int = 25,
                 cell_size: int = 40_000, threads: Optional[int] = None,
                 tile_pixels: int = 4096):
        """
        Args:
            film: Film model.
            step: Step geometry.
            pixel_size: Fine raster pixel, nm; must divide cell_size.
            cell_size: Density grid cell, nm.
            threads: Worker count; None lets the executor decide.
            tile_pixels: Target tile edge in pixels (at least one cell).
        """
        film.validate()
        step.validate()
        if pixel_size <= 0 or cell_size <= 0 or cell_size % pixel_size:
            raise ConfigError(f"pixel size {pixel_size} nm must divide cell size {cell_size} nm")
        self._film = film
        self._step = step
        self._pixel = pixel_size
        self._cell = cell_size
        self._threads = threads
        cells_per_tile = max(1, (tile_pixels * pixel_size) // cell_size)
        self._tile_size = cells_per_tile * cell_size
        self._halo = required_halo_px(film.reach(step), pixel_size)
        self._progress_callback: Optional[Callable[[float], None]] = None

    @property
    def halo(self) -> int:
        return self._halo

    def set_progress_callback(self, callback: Callable[[float], None]) -> None:
        """Set a callback receiving scan progress as a float (0.0 to 1.0)."""
        self._progress_callback = callback

    def _report_progress(self, progress: float) -> None:
        if self._progress_callback:
            self._progress_callback(min(max(progress, 0.0), 1.0))

    def grid_extent(self, db: LayoutDB) -> Rect:
        """Die box snapped outward to whole cells from its lower-left corner."""
        die = db.die_bbox
        return snap_outward(die, self._cell, (die.x0, die.y0))

    def scan(self, db: LayoutDB, layers: Sequence[int],
             extra_boxes: Optional[np.ndarray] = None) -> DensityGrid:
        """Compute the raw density grid of the given layers (plus optional dummy boxes).

        Raises:
            FilmProfileError: If a tile fails for a reason other than a toolkit error.
        """
        extent = self.grid_extent(db)
        nx = extent.width // self._cell
        ny = extent.height // self._cell
        values = np.zeros((ny, nx), dtype=np.float64)
        windows = tile_windows(extent, self._tile_size)
        logger.info("Scanning %d tiles (%dx%d cells, %d nm pixels, halo %d px, film %s)",
                    len(windows), nx, ny, self._pixel, self._halo, self._film.kind.value)

        def work(window: Rect) -> np.ndarray:
            raster = rasterize_layers(db, layers, window, self._pixel, self._halo, extra_boxes)
            return cell_densities(compute_elevation(raster, self._film, self._step), self._cell)

        try:
            with ThreadPoolExecutor(max_workers=self._threads) as pool:
                for i, (window, cells) in enumerate(zip(windows, pool.map(work, windows))):
                    ix = (window.x0 - extent.x0) // self._cell
                    iy = (window.y0 - extent.y0) // self._cell
                    values[iy:iy + cells.shape[0], ix:ix + cells.shape[1]] = cells
                    self._report_progress((i + 1) / len(windows))
        except Exception as e:
            if isinstance(e, CmpToolkitError):
                raise
            raise FilmProfileError(f"density scan failed: {e}") from e
        return DensityGrid(extent.x0, extent.y0, self._cell, values, GridKind.RAW)


def compare_films(db: LayoutDB, layers: Sequence[int], films: Sequence[FilmStack], step: StepSpec,
                  pixel_size: int, cell_size: int, threads: Optional[int] = None) -> Dict[str, DensityGrid]:
    """Raw density grids for several film models (and the layout fraction) on one grid."""
    grids: Dict[str, DensityGrid] = {}
    for film in films:
        scanner = DensityScanner(film, step, pixel_size, cell_size, threads)
        grids[film.kind.value] = scanner.scan(db, layers)
    return grids


# ============================================================
# Pitch sweep
# ============================================================

def line_array_density(pitch: int, width: int, film: FilmStack, step: StepSpec,
                       pixel_size: int) -> float:
    """Density of an infinite array of vertical lines, one period measured exactly.

    The raster is made periodic with wrap padding, so there are no edge
    effects.
    """
    if pitch % pixel_size or width % pixel_size:
        raise ConfigError(f"pitch {pitch} and width {width} must be multiples of the {pixel_size} nm pixel")
    if not 0 < width <= pitch:
        raise ConfigError(f"line width {width} must lie in (0, pitch={pitch}]")
    halo = required_halo_px(film.reach(step), pixel_size)
    period_px = pitch // pixel_size
    periods = max(1, -(-halo // period_px))
    row = np.zeros(period_px, dtype=bool)
    row[:width // pixel_size] = True
    core = np.tile(row, (halo, periods))
    bits = np.pad(core, halo, mode='wrap')
    tile = RasterTile(origin=(-halo * pixel_size, -halo * pixel_size), pixel_size=pixel_size,
                      bits=bits, halo=halo)
    elevation = compute_elevation(tile, film, step)
    return float(np.clip(elevation.core.mean() / step.step_height, 0.0, 1.0))


def sweep_pitch(pitches: Sequence[int], duty: float, films: Sequence[FilmStack], step: StepSpec,
                pixel_size: int = 25) -> List[Dict[str, float]]:
    """Density of 50%-style line arrays versus pitch for each film model.

    Returns:
        Rows with 'pitch_nm', 'layout' and one key per film kind.
    """
    if not 0.0 < duty <= 1.0:
        raise ConfigError(f"duty must lie in (0, 1], got {duty}")
    rows = []
    for pitch in pitches:
        width = int(round(pitch * duty / pixel_size)) * pixel_size
        row: Dict[str, float] = {'pitch_nm': float(pitch),
                                 'layout': width / float(pitch)}
        for film in films:
            if film.kind == FilmKind.LAYOUT:
                continue
            row[film.kind.value] = line_array_density(pitch, width, film, step, pixel_size)
        logger.debug("pitch %d nm: %s", pitch, row)
        rows.append(row)
    return rows
