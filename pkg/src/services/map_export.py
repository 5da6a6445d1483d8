"""Grid export: full-precision CSV, SVG heatmaps and small CSV tables."""

import csv
import io
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
from matplotlib import colors as mcolors
from matplotlib.figure import Figure
import numpy as np

from src.models.data_models import (
    DensityGrid,
    FillPlan,
    GridKind,
    GridMap,
    Histogram,
    LineProfile,
    ThicknessMap,
)
from src.models.errors import CmpToolkitError

logger = logging.getLogger(__name__)

# SVG ids are derived from this salt, so identical grids give identical files.
_SVG_HASH_SALT = "cmp-density-map"


class MapExportError(CmpToolkitError):
    """Exception raised when a grid cannot be exported or read back."""
    pass


# ============================================================
# CSV grids
# ============================================================

def grid_to_csv(grid: GridMap) -> str:
    """Header line with the grid geometry, then ny rows of nx values from the lowest y."""
    lines = [f"# {grid.origin_x} {grid.origin_y} {grid.cell_size} {grid.nx} {grid.ny} {grid.kind.value}"]
    for row in grid.values:
        lines.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


_GRID_CLASSES = {
    GridKind.RAW: DensityGrid,
    GridKind.EFFECTIVE: DensityGrid,
    GridKind.THICKNESS: ThicknessMap,
    GridKind.PLAN: FillPlan,
}


def read_grid(text: str) -> GridMap:
    """Parse a CSV grid written by grid_to_csv.

    Raises:
        MapExportError: On a malformed header or a value count that does not
                        match nx * ny.
    """
    first = text.split("\n", 1)[0].strip()
    fields = first.lstrip('#').split()
    if not first.startswith('#') or len(fields) != 6:
        raise MapExportError(f"malformed grid header {first!r}")
    try:
        ox, oy, cell, nx, ny = (int(v) for v in fields[:5])
        kind = GridKind(fields[5])
    except ValueError as e:
        raise MapExportError(f"malformed grid header {first!r}: {e}") from e
    try:
        values = np.loadtxt(io.StringIO(text), comments='#', delimiter=',', ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise MapExportError(f"malformed grid values: {e}") from e
    if values.size != nx * ny:
        raise MapExportError(f"grid declares {nx}x{ny} cells but holds {values.size} values")
    cls = _GRID_CLASSES.get(kind, GridMap)
    return cls(ox, oy, cell, values.reshape(ny, nx), kind)


# ============================================================
# Heatmaps
# ============================================================

def heatmap_svg(grid: GridMap, title: str = "", cmap: str = 'viridis', unit: str = "") -> bytes:
    """Self-contained SVG with one filled rectangle per cell and a min/max legend.

    Cells are drawn in the group with id "cells", the legend text in the
    group with id "legend".
    """
    values = grid.values
    lo, hi = float(values.min()), float(values.max())
    ext = grid.extent
    xs = ext.x0 + np.arange(grid.nx + 1) * grid.cell_size
    ys = ext.y0 + np.arange(grid.ny + 1) * grid.cell_size
    to_mm = 1e-6

    fig = Figure(figsize=(6.0, 5.4))
    ax = fig.add_axes([0.12, 0.14, 0.68, 0.76])
    norm = mcolors.Normalize(vmin=lo, vmax=hi if hi > lo else lo + 1.0)
    mesh = ax.pcolormesh(xs * to_mm, ys * to_mm, values, cmap=cmap, norm=norm,
                         shading='flat', edgecolors='none', antialiased=False)
    mesh.set_gid("cells")
    ax.set_aspect('equal')
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    if title:
        ax.set_title(title)
    if hi > lo:
        cax = fig.add_axes([0.84, 0.14, 0.03, 0.76])
        fig.colorbar(mesh, cax=cax)
    suffix = f" {unit}" if unit else ""
    legend = fig.text(0.12, 0.03, f"min {lo:.6g}{suffix}   max {hi:.6g}{suffix}", fontsize=9)
    legend.set_gid("legend")

    buf = io.BytesIO()
    with matplotlib.rc_context({'svg.hashsalt': _SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig.savefig(buf, format='svg', metadata={'Date': None})
    return buf.getvalue()


# ============================================================
# Tables
# ============================================================

def table_to_csv(fieldnames: Sequence[str], rows: Iterable[Dict[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})
    return buf.getvalue()


def _cell(value: object) -> object:
    if isinstance(value, float):
        return f"{value:.17g}"
    return value


def histogram_to_csv(hist: Histogram, variant: Optional[str] = None) -> str:
    return histograms_to_csv({variant or "grid": hist})


def histograms_to_csv(hists: Dict[str, Histogram]) -> str:
    """One row per (variant, bin)."""
    rows: List[Dict[str, object]] = []
    for name, hist in hists.items():
        for lo, hi, count in hist.rows():
            rows.append({'variant': name, 'bin_lo': lo, 'bin_hi': hi, 'count': count})
    return table_to_csv(['variant', 'bin_lo', 'bin_hi', 'count'], rows)


def profile_to_csv(profile: LineProfile) -> str:
    rows = [{'position_nm': p, 'value': v} for p, v in profile.rows()]
    return table_to_csv(['position_nm', 'value'], rows)


def save_artifact(out_dir: str, name: str, data) -> str:
    """Write text or bytes under out_dir and return the path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    payload = data.encode('utf-8') if isinstance(data, str) else data
    try:
        with open(path, 'wb') as fh:
            fh.write(payload)
    except OSError as e:
        raise MapExportError(f"cannot write {path}: {e}") from e
    logger.debug("Wrote %s (%d bytes)", path, len(payload))
    return path
