"""Data models for film, density, CMP and dummy-fill parameters and grids."""

from dataclasses import dataclass, field
from enum import Enum
import json
import math
from typing import Dict, Optional, Tuple

import numpy as np

from src.models.errors import ConfigError
from src.models.layout_db import Polygon, Rect


class FilmKind(Enum):
    """Dielectric film model used to turn features into elevation."""
    LAYOUT = "layout"          # Bare mask area fraction, no film
    CONFORMAL = "conformal"    # Conformal CVD, dilated support
    HDP = "hdp"                # High-density plasma, faceted caps
    COMPOSITE = "composite"    # HDP followed by a conformal film


class Polarity(Enum):
    """What the step height measures."""
    RAISED = "raised"          # Metal lines standing on the open field
    TRENCH_STI = "trench-sti"  # Active areas between isolation trenches


class DistanceMode(Enum):
    """Which side of a bitmap the distance transform measures."""
    INTERIOR = "interior"  # Set pixels, distance to the background
    EXTERIOR = "exterior"  # Background pixels, distance to the set


class GridKind(Enum):
    """Meaning of the values held by a cell grid."""
    RAW = "raw"
    EFFECTIVE = "effective"
    THICKNESS = "thickness"
    PLAN = "plan"
    CAPS = "caps"
    TIME = "time"


class FillMode(Enum):
    """Which dummy-fill variants a run produces."""
    NONE = "none"
    CONVENTIONAL = "conventional"
    SMART = "smart"
    ALL = "all"


class Axis(Enum):
    """Direction of an extracted line profile."""
    X = "x"  # Along x at fixed y
    Y = "y"  # Along y at fixed x


@dataclass(frozen=True)
class StepSpec:
    """Step geometry under the film."""
    step_height: float                  # Metal thickness or trench depth, nm
    polarity: Polarity = Polarity.RAISED

    def validate(self) -> None:
        if not self.step_height > 0:
            raise ConfigError(f"step height must be positive, got {self.step_height}")


@dataclass(frozen=True)
class FilmStack:
    """Deposition model parameters.

    t_conf is the conformal deposition thickness for Conformal and Composite
    stacks. hdp_dep_etch_ratio is kept as process metadata only; the facet
    angle is the calibrated knob.
    """
    kind: FilmKind
    t_conf: float = 0.0                      # nm
    hdp_facet_angle_deg: float = 45.0
    hdp_dep_etch_ratio: Optional[float] = None

    def validate(self) -> None:
        if self.kind in (FilmKind.CONFORMAL, FilmKind.COMPOSITE) and not self.t_conf > 0:
            raise ConfigError(f"{self.kind.value} film needs a positive t_conf, got {self.t_conf}")
        if self.t_conf < 0:
            raise ConfigError(f"t_conf must be non-negative, got {self.t_conf}")
        if not 0.0 < self.hdp_facet_angle_deg < 90.0:
            raise ConfigError(
                f"HDP facet angle must lie in (0, 90) degrees, got {self.hdp_facet_angle_deg}"
            )
        if self.hdp_dep_etch_ratio is not None and not self.hdp_dep_etch_ratio > 0:
            raise ConfigError(f"deposition-to-etch ratio must be positive, got {self.hdp_dep_etch_ratio}")

    @property
    def tan_theta(self) -> float:
        return math.tan(math.radians(self.hdp_facet_angle_deg))

    def reach(self, step: StepSpec) -> float:
        """Largest distance (nm) from a feature edge that the model looks at."""
        if self.kind == FilmKind.CONFORMAL:
            return float(self.t_conf)
        if self.kind == FilmKind.HDP:
            return step.step_height / self.tan_theta
        if self.kind == FilmKind.COMPOSITE:
            return step.step_height / self.tan_theta + self.t_conf
        return 0.0


@dataclass(eq=False)
class ElevationTile:
    """Per-pixel dielectric elevation above the open-field level for one tile."""
    origin: Tuple[int, int]      # Lower-left corner of the padded array, nm
    pixel_size: int
    halo: int                    # Padding pixels on each side
    step_height: float
    elevation: np.ndarray        # float64 [row, column], nm
    reach_nm: float = 0.0        # Halo distance already consumed by the model

    @property
    def core(self) -> np.ndarray:
        h = self.halo
        rows, cols = self.elevation.shape
        return self.elevation[h:rows - h, h:cols - h]

    @property
    def core_window(self) -> Rect:
        rows, cols = self.elevation.shape
        x0 = self.origin[0] + self.halo * self.pixel_size
        y0 = self.origin[1] + self.halo * self.pixel_size
        return Rect(x0, y0,
                    x0 + (cols - 2 * self.halo) * self.pixel_size,
                    y0 + (rows - 2 * self.halo) * self.pixel_size)


@dataclass(eq=False)
class GridMap:
    """Coarse cell grid over the die, values stored row-major [iy, ix].

    Row 0 is the lowest y.
    """
    origin_x: int
    origin_y: int
    cell_size: int
    values: np.ndarray
    kind: GridKind = GridKind.RAW

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"grid values must be 2-D, got shape {self.values.shape}")
        if self.cell_size <= 0:
            raise ConfigError(f"cell size must be positive, got {self.cell_size}")

    @property
    def nx(self) -> int:
        return int(self.values.shape[1])

    @property
    def ny(self) -> int:
        return int(self.values.shape[0])

    @property
    def cell_area(self) -> float:
        return float(self.cell_size) * float(self.cell_size)

    @property
    def extent(self) -> Rect:
        return Rect(self.origin_x, self.origin_y,
                    self.origin_x + self.nx * self.cell_size,
                    self.origin_y + self.ny * self.cell_size)

    def cell_center(self, ix: int, iy: int) -> Tuple[float, float]:
        return (self.origin_x + (ix + 0.5) * self.cell_size,
                self.origin_y + (iy + 0.5) * self.cell_size)

    def cell_index(self, x: float, y: float) -> Optional[Tuple[int, int]]:
        """Cell containing a point; the upper/right extent edge maps to the last cell."""
        if not self.extent.contains_point(x, y):
            return None
        ix = min(int((x - self.origin_x) // self.cell_size), self.nx - 1)
        iy = min(int((y - self.origin_y) // self.cell_size), self.ny - 1)
        return ix, iy

    def same_geometry(self, other: 'GridMap') -> bool:
        return (self.origin_x == other.origin_x and self.origin_y == other.origin_y
                and self.cell_size == other.cell_size and self.values.shape == other.values.shape)

    def with_values(self, values: np.ndarray, kind: Optional[GridKind] = None) -> 'GridMap':
        """Same geometry, new values; the result keeps the concrete class."""
        return type(self)(self.origin_x, self.origin_y, self.cell_size,
                          np.asarray(values, dtype=np.float64),
                          kind if kind is not None else self.kind)


@dataclass(eq=False)
class DensityGrid(GridMap):
    """Pattern density (raw or effective), values in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        if self.values.size and (np.any(self.values < 0.0) or np.any(self.values > 1.0)
                                 or not np.all(np.isfinite(self.values))):
            raise ConfigError("density values must lie in [0, 1]")


@dataclass(eq=False)
class ThicknessMap(GridMap):
    """Post-CMP film thickness over features, nm."""
    kind: GridKind = GridKind.THICKNESS


@dataclass(eq=False)
class FillPlan(GridMap):
    """Requested dummy density per cell."""
    kind: GridKind = GridKind.PLAN

    @property
    def added_area(self) -> float:
        """Total dummy area requested, nm^2."""
        return float(self.values.sum()) * self.cell_area


@dataclass(frozen=True)
class WindowSpec:
    """Planarization window: truncated circular Gaussian.

    sigma defaults to diameter/4; flat=True is the infinite-sigma limit
    (uniform weights over the disk).
    """
    diameter: float = 2_500_000.0
    sigma: Optional[float] = None
    flat: bool = False

    @property
    def effective_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.diameter / 4.0

    def validate(self) -> None:
        if not self.diameter > 0:
            raise ConfigError(f"window diameter must be positive, got {self.diameter}")
        if not self.effective_sigma > 0:
            raise ConfigError(f"window sigma must be positive, got {self.effective_sigma}")


@dataclass(frozen=True)
class CmpParams:
    """Two-regime density model parameters."""
    z0: float          # Initial film thickness over features, nm
    z1: float          # Initial step height, nm
    rate: float        # Blanket removal rate K, nm/min
    time: float        # Polish time t, min

    def validate(self) -> None:
        if not self.z1 >= 0:
            raise ConfigError(f"initial step height z1 must be >= 0, got {self.z1}")
        if not self.z0 > self.z1:
            raise ConfigError(f"z0 ({self.z0}) must exceed z1 ({self.z1})")
        if not self.rate > 0:
            raise ConfigError(f"removal rate must be positive, got {self.rate}")
        if not self.time >= 0:
            raise ConfigError(f"polish time must be >= 0, got {self.time}")

    @property
    def polish_through(self) -> bool:
        """True when blanket removal exceeds the film (outside the model's range)."""
        return self.z0 - self.rate * self.time < 0


@dataclass(frozen=True)
class FillRules:
    """Dummy geometry rules: squares of dummy_size on a dummy_pitch lattice."""
    min_spacing: int = 3000
    dummy_size: int = 1000
    dummy_pitch: int = 2000
    exclusion_layers: Tuple[int, ...] = ()
    fill_layer: int = 100

    def validate(self) -> None:
        if self.min_spacing < 0:
            raise ConfigError(f"minimum spacing must be >= 0, got {self.min_spacing}")
        if not 0 < self.dummy_size <= self.dummy_pitch:
            raise ConfigError(
                f"need 0 < dummy_size <= dummy_pitch, got {self.dummy_size} / {self.dummy_pitch}"
            )
        if self.fill_layer < 0:
            raise ConfigError(f"fill layer must be >= 0, got {self.fill_layer}")

    @property
    def max_density(self) -> float:
        return (self.dummy_size / self.dummy_pitch) ** 2

    @property
    def site_margin(self) -> int:
        """Offset of a dummy square inside its pitch box."""
        return (self.dummy_pitch - self.dummy_size) // 2


@dataclass(eq=False)
class FillGeometry:
    """Realized dummy squares as rows [x0, y0, x1, y1] in nm."""
    squares: np.ndarray
    layer: int

    def __post_init__(self):
        self.squares = np.asarray(self.squares, dtype=np.int64).reshape(-1, 4)

    @property
    def count(self) -> int:
        return int(self.squares.shape[0])

    @property
    def area(self) -> int:
        s = self.squares
        return int(((s[:, 2] - s[:, 0]) * (s[:, 3] - s[:, 1])).sum())

    def to_polygons(self):
        return [Polygon.rect(int(x0), int(y0), int(x1), int(y1), self.layer)
                for x0, y0, x1, y1 in self.squares]

    @classmethod
    def empty(cls, layer: int) -> 'FillGeometry':
        return cls(np.zeros((0, 4), dtype=np.int64), layer)


@dataclass
class GridStats:
    """Summary statistics of a grid; locations are cell centers in nm."""
    minimum: float
    maximum: float
    mean: float
    std: float
    median: float
    min_location: Tuple[float, float]
    max_location: Tuple[float, float]

    @property
    def spread(self) -> float:
        return self.maximum - self.minimum

    def to_dict(self) -> Dict[str, float]:
        return {
            'min': self.minimum,
            'max': self.maximum,
            'mean': self.mean,
            'std': self.std,
            'median': self.median,
            'spread': self.spread,
            'min_x_nm': self.min_location[0],
            'min_y_nm': self.min_location[1],
            'max_x_nm': self.max_location[0],
            'max_y_nm': self.max_location[1],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Histogram:
    """Bin edges (len bins + 1) and counts (len bins)."""
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self):
        """(lower edge, upper edge, count) per bin."""
        return [(float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
                for i in range(len(self.counts))]


@dataclass
class LineProfile:
    """Cell values sampled along one grid row (axis X) or column (axis Y)."""
    axis: Axis
    coordinate: float      # fixed coordinate of the line, nm
    positions: np.ndarray  # cell centers along the line, nm
    values: np.ndarray

    def rows(self):
        return [(float(p), float(v)) for p, v in zip(self.positions, self.values)]


@dataclass
class RunSummary:
    """Key/value record written next to every command's artifacts."""
    command: str
    values: Dict[str, object] = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_key_value(self) -> str:
        lines = [f"command={self.command}"]
        for key in sorted(self.values):
            lines.append(f"{key}={_format_value(self.values[key])}")
        for i, warning in enumerate(self.warnings):
            lines.append(f"warning.{i}={warning}")
        return "\n".join(lines) + "\n"


def _format_value(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value)
