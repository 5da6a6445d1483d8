"""Effective pattern density: window kernel, renormalized convolution and grid statistics."""

import logging
import math
from typing import Optional, Tuple

import numpy as np
import scipy.fft
from scipy import signal

from src.models.data_models import (
    Axis,
    DensityGrid,
    GridKind,
    GridMap,
    GridStats,
    Histogram,
    LineProfile,
    WindowSpec,
)
from src.models.errors import CmpToolkitError, ConfigError
from src.models.layout_db import Rect

logger = logging.getLogger(__name__)


class DensityMapError(CmpToolkitError):
    """Exception raised for density grid operations."""
    pass


def build_kernel(window: WindowSpec, cell_size: int) -> np.ndarray:
    """Truncated circular Gaussian on the cell lattice, normalized to sum 1.

    Offsets whose center distance is strictly below diameter/2 carry weight.
    The array has odd dimensions with the peak at its center.

    Raises:
        ConfigError: If diameter < 2 * cell_size.
    """
    window.validate()
    if window.diameter < 2 * cell_size:
        raise ConfigError(
            f"window diameter {window.diameter:g} nm is smaller than two cells ({2 * cell_size} nm)"
        )
    radius_cells = window.diameter / 2.0 / cell_size
    half = int(math.ceil(radius_cells)) - 1
    off = np.arange(-half, half + 1, dtype=np.float64)
    dy, dx = np.meshgrid(off, off, indexing='ij')
    r2 = (dx * dx + dy * dy) * float(cell_size) ** 2
    inside = 4.0 * r2 < window.diameter ** 2
    if window.flat:
        weights = inside.astype(np.float64)
    else:
        sigma = window.effective_sigma
        weights = np.where(inside, np.exp(-r2 / (2.0 * sigma * sigma)), 0.0)
    return weights / weights.sum()


def _check_kernel(kernel: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ConfigError(f"kernel must be 2-D with odd dimensions, got {kernel.shape}")
    if np.any(kernel < 0) or not kernel.sum() > 0:
        raise ConfigError("kernel weights must be non-negative with a positive sum")
    return kernel


def window_correlate(values: np.ndarray, kernel: np.ndarray, method: str = 'fft',
                     threads: Optional[int] = None) -> np.ndarray:
    """out[c] = sum_k kernel[k] * values[c + k], zero outside the grid."""
    if method == 'direct':
        return _direct_correlate(values, kernel)
    if method != 'fft':
        raise ConfigError(f"unknown convolution method {method!r}")
    with scipy.fft.set_workers(threads if threads else -1):
        return signal.fftconvolve(values, kernel[::-1, ::-1], mode='same')


def window_convolve(values: np.ndarray, kernel: np.ndarray, method: str = 'fft',
                    threads: Optional[int] = None) -> np.ndarray:
    """Adjoint of window_correlate."""
    return window_correlate(values, kernel[::-1, ::-1], method, threads)


def _direct_correlate(values: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    ny, nx = values.shape
    ky, kx = kernel.shape
    hy, hx = ky // 2, kx // 2
    out = np.zeros((ny, nx), dtype=np.float64)
    for i in range(ky):
        dy = i - hy
        for j in range(kx):
            w = kernel[i, j]
            if w == 0.0:
                continue
            dx = j - hx
            ys, ye = max(0, -dy), min(ny, ny - dy)
            xs, xe = max(0, -dx), min(nx, nx - dx)
            if ys >= ye or xs >= xe:
                continue
            out[ys:ye, xs:xe] += w * values[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


class EffectiveDensityOperator:
    """Linear map raw -> effective density on one grid shape.

    The kernel is renormalized over the in-grid part of the window, so a
    uniform grid maps to itself, edges included.
    """

    def __init__(self, shape: Tuple[int, int], kernel: np.ndarray, method: str = 'fft',
                 threads: Optional[int] = None):
        self.kernel = _check_kernel(kernel)
        self.shape = tuple(shape)
        self._method = method
        self._threads = threads
        ones = np.ones(self.shape, dtype=np.float64)
        self.norm = window_correlate(ones, self.kernel, method, threads)
        if np.any(self.norm <= 0):
            raise DensityMapError("kernel leaves grid cells without support")

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Effective values, clipped to the input's [min, max]."""
        values = np.asarray(values, dtype=np.float64)
        out = window_correlate(values, self.kernel, self._method, self._threads) / self.norm
        return np.clip(out, values.min(), values.max())

    def linear(self, values: np.ndarray) -> np.ndarray:
        """Unclipped operator application (for optimization)."""
        return window_correlate(values, self.kernel, self._method, self._threads) / self.norm

    def adjoint(self, values: np.ndarray) -> np.ndarray:
        """Transpose of linear()."""
        return window_convolve(values / self.norm, self.kernel, self._method, self._threads)

    def column_sums(self) -> np.ndarray:
        """Column sums of the operator matrix (row sums are 1)."""
        return self.adjoint(np.ones(self.shape, dtype=np.float64))


def effective_density(raw: GridMap, window: Optional[WindowSpec] = None, kernel: Optional[np.ndarray] = None,
                      method: str = 'fft', threads: Optional[int] = None) -> DensityGrid:
    """Window-averaged density of a raw grid.

    Args:
        raw: Raw density grid.
        window: Window spec; used when no explicit kernel is given.
        kernel: Explicit odd-sized weight array.
        method: 'fft' or 'direct'.
        threads: FFT worker count.
    """
    if kernel is None:
        kernel = build_kernel(window or WindowSpec(), raw.cell_size)
    if raw.values.size == 0:
        raise DensityMapError("empty density grid")
    op = EffectiveDensityOperator(raw.values.shape, kernel, method, threads)
    values = op.apply(raw.values)
    logger.debug("Effective density (%s, kernel %s): min %.6f max %.6f",
                 method, op.kernel.shape, values.min(), values.max())
    return DensityGrid(raw.origin_x, raw.origin_y, raw.cell_size, values, GridKind.EFFECTIVE)


def histogram(grid: GridMap, bins: int = 20, value_range: Optional[Tuple[float, float]] = None) -> Histogram:
    """Histogram of cell values; values outside an explicit range fall in the end bins.

    Raises:
        DensityMapError: On an empty grid.
        ConfigError: If bins < 1.
    """
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    values = grid.values.ravel()
    if values.size == 0:
        raise DensityMapError("cannot histogram an empty grid")
    if value_range is None:
        value_range = (float(values.min()), float(values.max()))
    lo, hi = value_range
    if hi < lo:
        raise ConfigError(f"invalid histogram range {value_range}")
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return Histogram(edges=edges, counts=counts)


def line_profile(grid: GridMap, axis: Axis, coordinate: float, die: Optional[Rect] = None) -> LineProfile:
    """Values along the row (axis X) or column (axis Y) of cells containing coordinate.

    The grid is snapped outward to whole cells, so its edge cells may reach
    past the die; the part beyond the die is scanned as empty. The coordinate
    is checked against the die when one is given, else against the grid.

    Raises:
        DensityMapError: If the coordinate lies outside the die (or grid).
    """
    ext = die if die is not None else grid.extent
    if axis == Axis.X:
        if not ext.y0 <= coordinate <= ext.y1:
            raise DensityMapError(f"y = {coordinate} lies outside the die [{ext.y0}, {ext.y1}]")
        iy = min(int((coordinate - grid.origin_y) // grid.cell_size), grid.ny - 1)
        positions = grid.origin_x + (np.arange(grid.nx) + 0.5) * grid.cell_size
        values = grid.values[iy, :].copy()
    else:
        if not ext.x0 <= coordinate <= ext.x1:
            raise DensityMapError(f"x = {coordinate} lies outside the die [{ext.x0}, {ext.x1}]")
        ix = min(int((coordinate - grid.origin_x) // grid.cell_size), grid.nx - 1)
        positions = grid.origin_y + (np.arange(grid.ny) + 0.5) * grid.cell_size
        values = grid.values[:, ix].copy()
    return LineProfile(axis=axis, coordinate=float(coordinate), positions=positions, values=values)


def grid_stats(grid: GridMap) -> GridStats:
    """Min/max (first occurrence, row-major from the bottom row), mean, std and median."""
    values = grid.values
    if values.size == 0:
        raise DensityMapError("empty grid")
    imin = np.unravel_index(int(np.argmin(values)), values.shape)
    imax = np.unravel_index(int(np.argmax(values)), values.shape)
    return GridStats(
        minimum=float(values[imin]),
        maximum=float(values[imax]),
        mean=float(values.mean()),
        std=float(values.std()),
        median=float(np.median(values)),
        min_location=grid.cell_center(int(imin[1]), int(imin[0])),
        max_location=grid.cell_center(int(imax[1]), int(imax[0])),
    )
