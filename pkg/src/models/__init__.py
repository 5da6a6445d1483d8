# Data models
from src.models.data_models import (
    CmpParams,
    DensityGrid,
    FillGeometry,
    FillPlan,
    FillRules,
    FilmKind,
    FilmStack,
    GridMap,
    StepSpec,
    ThicknessMap,
    WindowSpec,
)
from src.models.errors import CmpToolkitError, ConfigError, ContractViolation, GeometryError
from src.models.layout_db import LayoutDB, Polygon, RasterTile, Rect
