"""Two-regime density CMP model: post-polish thickness, planarization time and polish-target report."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from src.models.data_models import CmpParams, GridKind, GridMap, ThicknessMap
from src.models.errors import CmpToolkitError
from src.services.density_map import grid_stats

logger = logging.getLogger(__name__)


class CmpModelError(CmpToolkitError):
    """Exception raised for CMP model errors."""
    pass


@dataclass(eq=False)
class ThicknessResult:
    """Thickness map plus the diagnostics of one model evaluation."""
    thickness: ThicknessMap
    floored_cells: int = 0        # cells raised to the density floor
    polish_through: bool = False  # blanket removal exceeded z0; values clamped at 0
    warnings: list = field(default_factory=list)


class CmpModel:
    """Post-CMP thickness over features from effective density.

    Before local planarization (t < rho * z1 / K) the raised areas are
    removed at rate K / rho; afterwards the surface is flat and removal
    proceeds at the blanket rate.
    """

    def __init__(self, params: CmpParams, density_floor: float = 0.01):
        """
        Args:
            params: z0, z1, blanket rate K and polish time t.
            density_floor: Lower bound applied to effective density.
        """
        params.validate()
        if not 0.0 < density_floor <= 1.0:
            raise CmpModelError(f"density floor must lie in (0, 1], got {density_floor}")
        self._params = params
        self._floor = density_floor

    @property
    def params(self) -> CmpParams:
        return self._params

    def thickness_values(self, rho: np.ndarray) -> np.ndarray:
        """Closed-form thickness for an array of (already floored) densities."""
        p = self._params
        rho = np.asarray(rho, dtype=np.float64)
        removed = p.rate * p.time
        before = p.z0 - removed / rho
        after = p.z0 - p.z1 - removed + rho * p.z1
        return np.where(p.time < rho * p.z1 / p.rate, before, after)

    def post_cmp_thickness(self, eff: GridMap) -> ThicknessResult:
        """Thickness map of an effective-density grid.

        Densities below the floor are raised to it and counted; when the
        blanket removal K*t exceeds z0 the result is clamped at zero and
        flagged.
        """
        rho = eff.values
        if rho.size == 0:
            raise CmpModelError("empty density grid")
        if not np.all(np.isfinite(rho)) or np.any(rho > 1.0):
            raise CmpModelError("effective density values must be finite and <= 1")
        low = rho < self._floor
        floored = int(np.count_nonzero(low))
        values = self.thickness_values(np.where(low, self._floor, rho))
        result_warnings = []
        if floored:
            msg = f"{floored} cells below the density floor {self._floor:g} were raised to it"
            logger.warning(msg)
            result_warnings.append(msg)
        polish_through = self._params.polish_through
        if polish_through:
            msg = (f"blanket removal {self._params.rate * self._params.time:g} nm exceeds "
                   f"z0 = {self._params.z0:g} nm; thickness clamped at 0")
            logger.warning(msg)
            result_warnings.append(msg)
            values = np.maximum(values, 0.0)
        tm = ThicknessMap(eff.origin_x, eff.origin_y, eff.cell_size, values, GridKind.THICKNESS)
        return ThicknessResult(tm, floored, polish_through, result_warnings)

    def planarization_time(self, eff: GridMap) -> GridMap:
        """Per-cell time (min) needed to remove the local step: rho * z1 / K."""
        rho = np.maximum(eff.values, self._floor)
        return GridMap(eff.origin_x, eff.origin_y, eff.cell_size,
                       rho * self._params.z1 / self._params.rate, GridKind.TIME)


@dataclass
class PolishTargetReport:
    """Metrology alignment of the thickness distribution."""
    median: float
    mean: float
    metrology_point: Tuple[float, float]
    metrology_value: float
    offset: float
    spec_target: float
    recommended_target: float
    thinnest: float
    thinnest_location: Tuple[float, float]
    thickest: float
    thickest_location: Tuple[float, float]

    @property
    def thickness_range(self) -> float:
        return self.thickest - self.thinnest

    def to_dict(self) -> Dict[str, float]:
        return {
            'median_nm': self.median,
            'mean_nm': self.mean,
            'metrology_x_nm': self.metrology_point[0],
            'metrology_y_nm': self.metrology_point[1],
            'metrology_value_nm': self.metrology_value,
            'offset_nm': self.offset,
            'spec_target_nm': self.spec_target,
            'recommended_target_nm': self.recommended_target,
            'thinnest_nm': self.thinnest,
            'thinnest_x_nm': self.thinnest_location[0],
            'thinnest_y_nm': self.thinnest_location[1],
            'thickest_nm': self.thickest,
            'thickest_x_nm': self.thickest_location[0],
            'thickest_y_nm': self.thickest_location[1],
            'range_nm': self.thickness_range,
        }

    def to_text(self) -> str:
        """Human-readable summary."""
        return "\n".join([
            f"Thickness distribution center: median {self.median:.2f} nm, mean {self.mean:.2f} nm",
            f"Metrology site ({self.metrology_point[0]:.0f}, {self.metrology_point[1]:.0f}) nm "
            f"reads {self.metrology_value:.2f} nm, offset {self.offset:+.2f} nm from the median",
            f"Recommended metrology target: {self.recommended_target:.2f} nm "
            f"(specification target {self.spec_target:.2f} nm)",
            f"Thinnest {self.thinnest:.2f} nm at ({self.thinnest_location[0]:.0f}, "
            f"{self.thinnest_location[1]:.0f}) nm",
            f"Thickest {self.thickest:.2f} nm at ({self.thickest_location[0]:.0f}, "
            f"{self.thickest_location[1]:.0f}) nm",
            f"Intra-die range {self.thickness_range:.2f} nm",
        ]) + "\n"

    def to_key_value(self) -> str:
        data = self.to_dict()
        return "".join(f"{k}={data[k]!r}\n" for k in sorted(data))


def recommend_polish_target(tm: GridMap, metrology_point: Tuple[float, float],
                            spec_target: float) -> PolishTargetReport:
    """Align the thickness distribution center to the specified target thickness.

    offset = thickness at the metrology cell - median; the metrology site
    should read spec_target + offset when the die center is on target.

    Raises:
        CmpModelError: If the metrology point lies outside the die.
    """
    x, y = metrology_point
    index = tm.cell_index(x, y)
    if index is None:
        raise CmpModelError(f"metrology point ({x}, {y}) lies outside the die")
    ix, iy = index
    stats = grid_stats(tm)
    value = float(tm.values[iy, ix])
    offset = value - stats.median
    return PolishTargetReport(
        median=stats.median,
        mean=stats.mean,
        metrology_point=(float(x), float(y)),
        metrology_value=value,
        offset=offset,
        spec_target=float(spec_target),
        recommended_target=float(spec_target) + offset,
        thinnest=stats.minimum,
        thinnest_location=stats.min_location,
        thickest=stats.maximum,
        thickest_location=stats.max_location,
    )


def thickness_range(tm: GridMap) -> Tuple[float, Tuple[float, float], Tuple[float, float]]:
    """Intra-die variation (max - min) with the thinnest and thickest cell centers."""
    stats = grid_stats(tm)
    return stats.spread, stats.min_location, stats.max_location
