"""Dummy fill: fillable capacity, conventional and smart fill plans, geometry and reports.

Dummy squares sit on a site lattice anchored at the grid origin: site
(row, col) occupies [x + m, x + m + size) with x = origin + col * pitch and
m the margin inside the pitch box. Spacing is checked on a coverage
raster (every pixel a feature touches), so the checks are conservative for
off-grid features and exact for features on the fill pixel grid.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.models.data_models import (
    DensityGrid,
    DistanceMode,
    FillGeometry,
    FillPlan,
    FillRules,
    GridKind,
    GridMap,
    GridStats,
    Histogram,
    WindowSpec,
)
from src.models.errors import CmpToolkitError, ConfigError, ContractViolation
from src.models.layout_db import LayoutDB, RasterTile, Rect
from src.services.density_map import (
    EffectiveDensityOperator,
    build_kernel,
    grid_stats,
    histogram,
)
from src.services.geometry import (
    NO_COMPLEMENT,
    distance_transform,
    intersecting_mask,
    rasterize_layers,
    required_halo_px,
    snap_outward,
    tile_windows,
)

logger = logging.getLogger(__name__)

_GROW = np.ones((3, 3), dtype=bool)


class DummyFillError(CmpToolkitError):
    """Exception raised for dummy-fill planning and realization errors."""
    pass


class FillVerificationError(CmpToolkitError):
    """Exception raised when emitted dummy geometry breaks a spacing rule."""

    def __init__(self, message: str, report: Optional['SpacingReport'] = None):
        super().__init__(message)
        self.report = report


# ============================================================
# Result types
# ============================================================

@dataclass(eq=False)
class CapMap:
    """Open dummy sites of every cell and the resulting per-cell cap."""
    origin_x: int
    origin_y: int
    cell_size: int
    rules: FillRules
    open_sites: np.ndarray  # bool [site row, site col], row 0 at the lowest y

    @property
    def sites_per_side(self) -> int:
        return self.cell_size // self.rules.dummy_pitch

    @property
    def shape(self) -> Tuple[int, int]:
        k = self.sites_per_side
        return self.open_sites.shape[0] // k, self.open_sites.shape[1] // k

    def open_counts(self) -> np.ndarray:
        ny, nx = self.shape
        k = self.sites_per_side
        return self.open_sites.reshape(ny, k, nx, k).sum(axis=(1, 3))

    @property
    def values(self) -> np.ndarray:
        """cap = max_density * open sites / sites per cell."""
        k = self.sites_per_side
        return self.rules.max_density * self.open_counts() / float(k * k)

    def as_grid(self) -> GridMap:
        return GridMap(self.origin_x, self.origin_y, self.cell_size, self.values, GridKind.CAPS)

    def matches(self, grid: GridMap) -> bool:
        return (grid.origin_x == self.origin_x and grid.origin_y == self.origin_y
                and grid.cell_size == self.cell_size and grid.values.shape == self.shape)


@dataclass(eq=False)
class SmartFillResult:
    """Optimized plan with its post-fill effective density and solver diagnostics."""
    plan: FillPlan
    effective: DensityGrid
    spread: float
    added_area: float
    iterations: int
    converged: bool
    objective: float
    target: float
    penalty: float
    warnings: List[str] = field(default_factory=list)


@dataclass
class SpacingReport:
    """Outcome of the spacing, overlap and containment checks on dummy squares."""
    checked: int
    spacing_violations: np.ndarray   # indices of squares closer than min_spacing
    overlapping: np.ndarray          # indices of squares sharing area with another
    outside_die: np.ndarray          # indices of squares not inside the die
    min_distance_nm: float           # smallest dummy-to-feature distance, inf if none

    @property
    def ok(self) -> bool:
        return not (len(self.spacing_violations) or len(self.overlapping) or len(self.outside_die))

    def to_dict(self) -> Dict[str, object]:
        return {
            'verify_checked': self.checked,
            'verify_spacing_violations': int(len(self.spacing_violations)),
            'verify_overlaps': int(len(self.overlapping)),
            'verify_outside_die': int(len(self.outside_die)),
            'verify_min_distance_nm': self.min_distance_nm,
        }


@dataclass(eq=False)
class VariantSummary:
    """Post-fill effective density of one fill variant."""
    name: str
    plan: FillPlan
    effective: DensityGrid
    stats: GridStats
    histogram: Histogram
    added_area: float
    mean_increase: float


@dataclass(eq=False)
class FillReport:
    """Pre/post-fill comparison of several fill variants on one grid."""
    variants: Dict[str, VariantSummary]
    value_range: Tuple[float, float]
    warnings: List[str] = field(default_factory=list)

    def rows(self) -> List[Dict[str, object]]:
        rows = []
        for name, v in self.variants.items():
            rows.append({
                'variant': name,
                'min': v.stats.minimum,
                'max': v.stats.maximum,
                'spread': v.stats.spread,
                'mean': v.stats.mean,
                'std': v.stats.std,
                'added_area_nm2': v.added_area,
                'mean_increase': v.mean_increase,
            })
        return rows

    def histograms(self) -> Dict[str, Histogram]:
        return {name: v.histogram for name, v in self.variants.items()}

    def spread(self, name: str) -> float:
        return self.variants[name].stats.spread


# ============================================================
# Raster helpers
# ============================================================

def _cover_indices(boxes: np.ndarray, window: Rect, pixel_size: int):
    """Outward-rounded pixel ranges of boxes inside a window, clipped to it."""
    width = window.width // pixel_size
    height = window.height // pixel_size
    c0 = np.clip((boxes[:, 0] - window.x0) // pixel_size, 0, width)
    c1 = np.clip(-((window.x0 - boxes[:, 2]) // pixel_size), 0, width)
    r0 = np.clip((boxes[:, 1] - window.y0) // pixel_size, 0, height)
    r1 = np.clip(-((window.y0 - boxes[:, 3]) // pixel_size), 0, height)
    return r0, r1, c0, c1


def _count_raster(boxes: np.ndarray, window: Rect, pixel_size: int) -> np.ndarray:
    """Number of boxes covering every pixel of a window."""
    width = window.width // pixel_size
    height = window.height // pixel_size
    diff = np.zeros((height + 1, width + 1), dtype=np.int32)
    if len(boxes):
        r0, r1, c0, c1 = _cover_indices(boxes, window, pixel_size)
        keep = (r1 > r0) & (c1 > c0)
        r0, r1, c0, c1 = r0[keep], r1[keep], c0[keep], c1[keep]
        np.add.at(diff, (r0, c0), 1)
        np.add.at(diff, (r0, c1), -1)
        np.add.at(diff, (r1, c0), -1)
        np.add.at(diff, (r1, c1), 1)
    return diff.cumsum(axis=0).cumsum(axis=1)[:height, :width]


def _box_sums(mask: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    """Count of set mask pixels inside each pixel box (summed-area table)."""
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = mask.cumsum(axis=0, dtype=np.int64).cumsum(axis=1)
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


# ============================================================
# Planner
# ============================================================

class FillPlanner:
    """Site capacity, smart-fill optimization and spacing verification for one rule set.

    Feature layers are rasterized by coverage at the fill pixel, grown by
    one pixel and measured with the exterior distance transform; a pixel is
    blocked when a dummy pixel there would sit closer than min_spacing to a
    feature, and a site is blocked when any of its pixels is.
    """

    def __init__(self, rules: FillRules, pixel_size: Optional[int] = None,
                 threads: Optional[int] = None, tile_pixels: int = 4096):
        """
        Args:
            rules: Dummy geometry rules.
            pixel_size: Fill raster pixel, nm; must divide dummy size, pitch
                        and margin. Defaults to their greatest common divisor.
            threads: Worker count for tile processing.
            tile_pixels: Target tile edge in pixels.
        """
        rules.validate()
        divisors = (rules.dummy_size, rules.dummy_pitch, rules.site_margin)
        if pixel_size is None:
            pixel_size = math.gcd(*divisors)
        if pixel_size <= 0 or any(v % pixel_size for v in divisors):
            raise ConfigError(
                f"fill pixel {pixel_size} nm must divide dummy size, pitch and margin {divisors}"
            )
        self._rules = rules
        self._pixel = pixel_size
        self._threads = threads
        self._tile_pixels = tile_pixels
        s, p = rules.min_spacing, pixel_size
        self._threshold = -(-(s * s) // (p * p))  # blocked iff sq_px < ceil(S^2 / p^2)
        self._halo = required_halo_px(s, p) + 1
        self._progress_callback: Optional[Callable[[float], None]] = None

    @property
    def rules(self) -> FillRules:
        return self._rules

    @property
    def pixel_size(self) -> int:
        return self._pixel

    def set_progress_callback(self, callback: Callable[[float], None]) -> None:
        """Set a callback receiving progress as a float (0.0 to 1.0)."""
        self._progress_callback = callback

    def _report_progress(self, progress: float) -> None:
        if self._progress_callback:
            self._progress_callback(min(max(progress, 0.0), 1.0))

    def blocking_layers(self, db: LayoutDB, layers: Optional[Sequence[int]] = None) -> List[int]:
        """Feature layers (all but the fill layer by default) plus exclusion layers."""
        if layers is None:
            layers = [layer for layer in db.layer_ids if layer != self._rules.fill_layer]
        return sorted(set(layers) | set(self._rules.exclusion_layers))

    def _too_close(self, db: LayoutDB, layers: Sequence[int], window: Rect) -> Tuple[np.ndarray, np.ndarray]:
        """Core-window mask of pixels a dummy may not occupy, and the squared distances."""
        cover = rasterize_layers(db, layers, window, self._pixel, self._halo, coverage=True)
        grown = ndimage.binary_dilation(cover.bits, structure=_GROW)
        dist = distance_transform(RasterTile(cover.origin, self._pixel, grown, self._halo),
                                  DistanceMode.EXTERIOR)
        sq = dist.core
        return (sq < self._threshold) | cover.core, sq

    def _blocked_sites(self, db: LayoutDB, layers: Sequence[int], window: Rect) -> np.ndarray:
        rules = self._rules
        q = rules.dummy_pitch // self._pixel
        rows = window.height // rules.dummy_pitch
        cols = window.width // rules.dummy_pitch
        if not window.intersects(db.die_bbox):
            return np.ones((rows, cols), dtype=bool)
        blocked, _ = self._too_close(db, layers, window)
        m = rules.site_margin // self._pixel
        s = rules.dummy_size // self._pixel
        view = blocked.reshape(rows, q, cols, q)
        return view[:, m:m + s, :, m:m + s].any(axis=(1, 3))

    def fillable_caps(self, db: LayoutDB, grid: GridMap,
                      layers: Optional[Sequence[int]] = None) -> CapMap:
        """Open dummy sites and per-cell cap on a grid covering the die.

        Args:
            db: Layout database.
            grid: Grid whose geometry the caps share (values unused).
            layers: Feature layers; all but the fill layer when None.

        Raises:
            ConfigError: If the dummy pitch exceeds or does not divide the cell.
            ContractViolation: If the grid does not cover the die.
        """
        rules = self._rules
        cell = grid.cell_size
        if rules.dummy_pitch > cell:
            raise ConfigError(f"dummy pitch {rules.dummy_pitch} nm exceeds the {cell} nm cell")
        if cell % rules.dummy_pitch:
            raise ConfigError(f"dummy pitch {rules.dummy_pitch} nm must divide the {cell} nm cell")
        die = db.die_bbox
        extent = grid.extent
        if not extent.contains_rect(die):
            raise ContractViolation(f"grid {extent.as_tuple()} does not cover the die {die.as_tuple()}")

        layers = self.blocking_layers(db, layers)
        pitch = rules.dummy_pitch
        k = cell // pitch
        open_sites = np.zeros((grid.ny * k, grid.nx * k), dtype=bool)
        cells_per_tile = max(1, (self._tile_pixels * self._pixel) // cell)
        windows = tile_windows(extent, cells_per_tile * cell)
        logger.info("Fill capacity: %d tiles, %d nm pixels, spacing %d nm, layers %s",
                    len(windows), self._pixel, rules.min_spacing, layers)

        def work(window: Rect) -> np.ndarray:
            return ~self._blocked_sites(db, layers, window)

        try:
            with ThreadPoolExecutor(max_workers=self._threads) as pool:
                for i, (window, sites) in enumerate(zip(windows, pool.map(work, windows))):
                    r = (window.y0 - extent.y0) // pitch
                    c = (window.x0 - extent.x0) // pitch
                    open_sites[r:r + sites.shape[0], c:c + sites.shape[1]] = sites
                    self._report_progress((i + 1) / len(windows))
        except Exception as e:
            if isinstance(e, CmpToolkitError):
                raise
            raise DummyFillError(f"fill capacity scan failed: {e}") from e

        m, size = rules.site_margin, rules.dummy_size
        xs = extent.x0 + np.arange(open_sites.shape[1], dtype=np.int64) * pitch + m
        ys = extent.y0 + np.arange(open_sites.shape[0], dtype=np.int64) * pitch + m
        inside_x = (xs >= die.x0) & (xs + size <= die.x1)
        inside_y = (ys >= die.y0) & (ys + size <= die.y1)
        open_sites &= inside_y[:, None] & inside_x[None, :]
        caps = CapMap(extent.x0, extent.y0, cell, rules, open_sites)
        logger.debug("Open sites: %d of %d", int(open_sites.sum()), open_sites.size)
        return caps

    def smart_fill(self, raw: GridMap, caps: CapMap, window: Optional[WindowSpec] = None,
                   penalty: Optional[float] = None, kernel: Optional[np.ndarray] = None,
                   target: Optional[float] = None, max_iter: int = 20000, tol: float = 1e-8,
                   method: str = 'fft') -> SmartFillResult:
        """Locally optimized dummy densities.

        Minimizes sum(max(0, T - eff(raw + d))^2) + penalty * sum(d) over
        0 <= d <= cap by projected gradient with step 1/L, where eff is the
        linear effective-density operator and T defaults to the pre-fill
        effective maximum.

        Args:
            raw: Raw density grid on the caps' geometry.
            caps: Fillable capacity.
            window: Planarization window; ignored when kernel is given.
            penalty: Weight of the dummy-area term; defaults to 1e-3 times
                     the largest kernel weight.
            kernel: Explicit odd-sized kernel.
            target: Effective-density target T.
            max_iter: Iteration cap.
            tol: Relative objective change that counts as converged.
            method: Convolution method, 'fft' or 'direct'.

        Raises:
            ContractViolation: If raw and caps are on different grids.
        """
        if not caps.matches(raw):
            raise ContractViolation("raw density and caps are on different grids")
        if kernel is None:
            kernel = build_kernel(window or WindowSpec(), raw.cell_size)
        op = EffectiveDensityOperator(raw.values.shape, kernel, method, self._threads)
        if penalty is None:
            penalty = 1e-3 * float(op.kernel.max())
        if penalty < 0:
            raise ConfigError(f"dummy penalty must be >= 0, got {penalty}")
        if target is None:
            target = float(op.apply(raw.values).max())
        if not math.isfinite(target):
            raise ConfigError(f"fill target must be finite, got {target}")

        base = op.linear(raw.values)
        d, iterations, converged, objective = projected_gradient_fill(
            base, caps.values, op, target, penalty, max_iter, tol, self._report_progress
        )
        plan = FillPlan(raw.origin_x, raw.origin_y, raw.cell_size, d)
        effective = post_fill_effective(raw, plan, op)
        values = effective.values
        result_warnings = []
        if not converged:
            msg = f"smart fill did not converge within {max_iter} iterations (objective {objective:.6g})"
            logger.warning(msg)
            result_warnings.append(msg)
        logger.info("Smart fill: %d iterations, objective %.6g, spread %.6f, added area %.6g nm^2",
                    iterations, objective, float(values.max() - values.min()), plan.added_area)
        return SmartFillResult(
            plan=plan,
            effective=effective,
            spread=float(values.max() - values.min()),
            added_area=plan.added_area,
            iterations=iterations,
            converged=converged,
            objective=objective,
            target=float(target),
            penalty=float(penalty),
            warnings=result_warnings,
        )

    def verify_spacing(self, db: LayoutDB, fill: FillGeometry,
                       layers: Optional[Sequence[int]] = None) -> SpacingReport:
        """Check every dummy square against features, other squares and the die.

        Distances are measured between coverage rasters at the fill pixel,
        so a square passes only if its true distance to every feature is at
        least min_spacing.
        """
        squares = fill.squares
        die = db.die_bbox
        layers = self.blocking_layers(db, layers)
        inside = ((squares[:, 0] >= die.x0) & (squares[:, 1] >= die.y0)
                  & (squares[:, 2] <= die.x1) & (squares[:, 3] <= die.y1))
        close = np.zeros(len(squares), dtype=bool)
        overlap = np.zeros(len(squares), dtype=bool)
        min_sq = NO_COMPLEMENT
        if len(squares):
            extent = snap_outward(die, self._pixel, (die.x0, die.y0))
            windows = tile_windows(extent, self._tile_pixels * self._pixel)

            def work(window: Rect):
                idx = np.nonzero(intersecting_mask(squares, window))[0]
                if len(idx) == 0:
                    return idx, None, None, NO_COMPLEMENT
                boxes = squares[idx]
                too_close, sq = self._too_close(db, layers, window)
                counts = _count_raster(boxes, window, self._pixel)
                dummy = counts > 0
                r0, r1, c0, c1 = _cover_indices(boxes, window, self._pixel)
                bad = _box_sums(dummy & too_close, r0, r1, c0, c1) > 0
                shared = _box_sums(counts > 1, r0, r1, c0, c1) > 0
                tile_min = int(sq[dummy].min()) if dummy.any() else NO_COMPLEMENT
                return idx, bad, shared, tile_min

            try:
                with ThreadPoolExecutor(max_workers=self._threads) as pool:
                    for i, (idx, bad, shared, tile_min) in enumerate(pool.map(work, windows)):
                        if len(idx):
                            close[idx] |= bad
                            overlap[idx] |= shared
                            min_sq = min(min_sq, tile_min)
                        self._report_progress((i + 1) / len(windows))
            except Exception as e:
                if isinstance(e, CmpToolkitError):
                    raise
                raise DummyFillError(f"spacing verification failed: {e}") from e

        min_distance = math.inf if min_sq == NO_COMPLEMENT else math.sqrt(min_sq) * self._pixel
        report = SpacingReport(
            checked=len(squares),
            spacing_violations=np.nonzero(close)[0],
            overlapping=np.nonzero(overlap)[0],
            outside_die=np.nonzero(~inside)[0],
            min_distance_nm=min_distance,
        )
        if report.ok:
            logger.info("Verified %d dummy squares, min distance %.6g nm", len(squares), min_distance)
        else:
            logger.warning("Dummy verification: %d too close, %d overlapping, %d outside the die",
                           len(report.spacing_violations), len(report.overlapping),
                           len(report.outside_die))
        return report


# ============================================================
# Plans
# ============================================================

def conventional_fill(caps: CapMap, d_fixed: float) -> FillPlan:
    """Fixed dummy density clipped to each cell's cap.

    Raises:
        ConfigError: If d_fixed lies outside [0, max_density].
    """
    max_density = caps.rules.max_density
    if not 0.0 <= d_fixed <= max_density:
        raise ConfigError(f"fixed dummy density {d_fixed} must lie in [0, {max_density:g}]")
    return FillPlan(caps.origin_x, caps.origin_y, caps.cell_size, np.minimum(d_fixed, caps.values))


def fill_objective(d: np.ndarray, base: np.ndarray, op: EffectiveDensityOperator,
                   target: float, penalty: float) -> float:
    """sum(max(0, T - base - A d)^2) + penalty * sum(d)."""
    r = np.maximum(target - base - op.linear(d), 0.0)
    return float(np.sum(r * r) + penalty * np.sum(d))


def projected_gradient_fill(base: np.ndarray, upper: np.ndarray, op: EffectiveDensityOperator,
                            target: float, penalty: float, max_iter: int = 20000, tol: float = 1e-8,
                            progress: Optional[Callable[[float], None]] = None):
    """Accelerated projected gradient on the box [0, upper] with fixed step 1/L.

    L = 2 * max column sum of the operator bounds the gradient's Lipschitz
    constant (rows sum to one). Momentum is reset whenever the objective
    would rise, so the accepted objective never increases. Stops when the
    relative objective change falls below tol. If a plain step from the
    current iterate rises by more than that, the run stops unconverged.

    Returns:
        (d, iterations, converged, objective)
    """
    upper = np.asarray(upper, dtype=np.float64)
    lipschitz = 2.0 * float(op.column_sums().max())
    step = 1.0 / lipschitz
    d = np.zeros_like(upper)
    y = d
    t = 1.0
    objective = fill_objective(d, base, op, target, penalty)
    tiny = np.finfo(np.float64).tiny
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        r = np.maximum(target - base - op.linear(y), 0.0)
        grad = -2.0 * op.adjoint(r) + penalty
        d_new = np.clip(y - step * grad, 0.0, upper)
        new_objective = fill_objective(d_new, base, op, target, penalty)
        if new_objective > objective:
            if t == 1.0:
                # a plain step from d rose: only a rise at rounding level counts as converged
                converged = new_objective - objective <= tol * max(objective, tiny)
                break
            y, t = d, 1.0
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = d_new + ((t - 1.0) / t_new) * (d_new - d)
        change = objective - new_objective
        d, t, previous, objective = d_new, t_new, objective, new_objective
        if progress and iterations % 100 == 0:
            progress(iterations / max_iter)
        if change <= tol * max(previous, tiny):
            converged = True
            break
    if progress:
        progress(1.0)
    return d, iterations, converged, objective


def post_fill_effective(raw: GridMap, plan: FillPlan, op: EffectiveDensityOperator) -> DensityGrid:
    """Effective density of the area-fraction estimate min(raw + d, 1).

    Dummies are added as covered area, not run through the film model, and
    each cell is clipped at full coverage. The solver's objective uses the
    unclipped linear sum, so the two differ only where raw + d exceeds one.
    A rescan with the realized dummies gives the film-aware figure.
    """
    values = op.apply(np.minimum(raw.values + plan.values, 1.0))
    return DensityGrid(raw.origin_x, raw.origin_y, raw.cell_size, values, GridKind.EFFECTIVE)


def tune_conventional_to_area(caps: CapMap, area: float, iterations: int = 60) -> float:
    """Smallest fixed density whose clipped plan adds at least the given area (bisection)."""
    lo, hi = 0.0, caps.rules.max_density
    cell_area = float(caps.cell_size) ** 2
    values = caps.values
    if np.minimum(hi, values).sum() * cell_area <= area:
        return hi
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if np.minimum(mid, values).sum() * cell_area < area:
            lo = mid
        else:
            hi = mid
    return hi


def tune_conventional_to_spread(raw: GridMap, caps: CapMap, op: EffectiveDensityOperator,
                                spread: float, steps: int = 200) -> Tuple[float, bool]:
    """Smallest fixed density (on a grid of steps) whose post-fill spread is <= spread.

    Returns:
        (d_fixed, reached); when no grid value reaches the spread, the one
        with the smallest spread and reached=False.
    """
    best_d, best_spread = 0.0, math.inf
    for d_fixed in np.linspace(0.0, caps.rules.max_density, steps + 1):
        values = post_fill_effective(raw, conventional_fill(caps, float(d_fixed)), op).values
        s = float(values.max() - values.min())
        if s <= spread + 1e-12:
            return float(d_fixed), True
        if s < best_spread:
            best_d, best_spread = float(d_fixed), s
    return best_d, False


# ============================================================
# Geometry
# ============================================================

def realize_geometry(plan: FillPlan, caps: CapMap) -> FillGeometry:
    """Dummy squares for a plan: round(d * sites / max_density) open sites per cell.

    Sites are taken in row-major order from the bottom-left of each cell.

    Raises:
        ContractViolation: If plan and caps are on different grids.
        DummyFillError: If the plan asks for more than a cell's cap.
    """
    if not caps.matches(plan):
        raise ContractViolation("fill plan and caps are on different grids")
    rules = caps.rules
    d = plan.values
    if np.any(d < 0.0) or np.any(d > caps.values + 1e-9):
        raise DummyFillError("fill plan exceeds the fillable capacity")
    ny, nx = caps.shape
    k = caps.sites_per_side
    total = k * k
    wanted = np.floor(d * total / rules.max_density + 0.5).astype(np.int64)
    per_cell = caps.open_sites.reshape(ny, k, nx, k).transpose(0, 2, 1, 3).reshape(ny, nx, total)
    available = per_cell.sum(axis=2)
    if np.any(wanted > available):
        raise DummyFillError("fill plan asks for more sites than a cell has open")
    chosen = per_cell & (np.cumsum(per_cell, axis=2) <= wanted[..., None])
    sites = chosen.reshape(ny, nx, k, k).transpose(0, 2, 1, 3).reshape(ny * k, nx * k)
    rows, cols = np.nonzero(sites)
    x0 = caps.origin_x + cols.astype(np.int64) * rules.dummy_pitch + rules.site_margin
    y0 = caps.origin_y + rows.astype(np.int64) * rules.dummy_pitch + rules.site_margin
    squares = np.stack([x0, y0, x0 + rules.dummy_size, y0 + rules.dummy_size], axis=1)
    logger.info("Realized %d dummy squares on layer %d", len(squares), rules.fill_layer)
    return FillGeometry(squares, rules.fill_layer)


def measure_fill_density(fill: FillGeometry, grid: GridMap) -> FillPlan:
    """Exact per-cell dummy area fraction of the squares (parts outside the grid ignored).

    Raises:
        DummyFillError: If a square is wider than a cell.
    """
    cell = grid.cell_size
    area = np.zeros(grid.values.shape, dtype=np.float64)
    s = fill.squares
    if len(s):
        if np.any(s[:, 2] - s[:, 0] > cell) or np.any(s[:, 3] - s[:, 1] > cell):
            raise DummyFillError("dummy squares must not be wider than a cell")
        ix0 = (s[:, 0] - grid.origin_x) // cell
        iy0 = (s[:, 1] - grid.origin_y) // cell
        for dx in (0, 1):
            for dy in (0, 1):
                cx, cy = ix0 + dx, iy0 + dy
                cell_x0 = grid.origin_x + cx * cell
                cell_y0 = grid.origin_y + cy * cell
                w = np.minimum(s[:, 2], cell_x0 + cell) - np.maximum(s[:, 0], cell_x0)
                h = np.minimum(s[:, 3], cell_y0 + cell) - np.maximum(s[:, 1], cell_y0)
                ok = (w > 0) & (h > 0) & (cx >= 0) & (cx < grid.nx) & (cy >= 0) & (cy < grid.ny)
                np.add.at(area, (cy[ok], cx[ok]), (w[ok] * h[ok]).astype(np.float64))
    return FillPlan(grid.origin_x, grid.origin_y, cell, area / grid.cell_area)


# ============================================================
# Report
# ============================================================

def fill_report(raw: GridMap, plans: Dict[str, FillPlan], window: Optional[WindowSpec] = None,
                kernel: Optional[np.ndarray] = None, bins: int = 20, method: str = 'fft',
                threads: Optional[int] = None) -> FillReport:
    """Effective-density histogram and statistics of every variant on a common range.

    A zero 'none' variant is added when missing.

    Raises:
        ContractViolation: If a plan is on a different grid than raw.
    """
    if kernel is None:
        kernel = build_kernel(window or WindowSpec(), raw.cell_size)
    op = EffectiveDensityOperator(raw.values.shape, kernel, method, threads)
    plans = dict(plans)
    if 'none' not in plans:
        plans = {'none': FillPlan(raw.origin_x, raw.origin_y, raw.cell_size,
                                  np.zeros_like(raw.values)), **plans}
    effective: Dict[str, DensityGrid] = {}
    for name, plan in plans.items():
        if not raw.same_geometry(plan):
            raise ContractViolation(f"fill plan {name!r} is on a different grid than the raw density")
        effective[name] = post_fill_effective(raw, plan, op)
    lo = min(float(g.values.min()) for g in effective.values())
    hi = max(float(g.values.max()) for g in effective.values())
    base_mean = float(effective['none'].values.mean())
    variants = {}
    for name, grid in effective.items():
        stats = grid_stats(grid)
        variants[name] = VariantSummary(
            name=name,
            plan=plans[name],
            effective=grid,
            stats=stats,
            histogram=histogram(grid, bins, (lo, hi)),
            added_area=plans[name].added_area,
            mean_increase=stats.mean - base_mean,
        )
    return FillReport(variants=variants, value_range=(lo, hi))
