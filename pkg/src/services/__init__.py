# Layout, film, density, CMP and dummy-fill services

from src.services.cmp_model import CmpModel, CmpModelError, recommend_polish_target
from src.services.density_map import DensityMapError, EffectiveDensityOperator, build_kernel, effective_density
from src.services.dummy_fill import DummyFillError, FillPlanner, FillVerificationError
from src.services.film_profile import DensityScanner, FilmProfileError
from src.services.layout_io import LayoutIO, LayoutIOError

__all__ = [
    'CmpModel',
    'CmpModelError',
    'recommend_polish_target',
    'DensityMapError',
    'EffectiveDensityOperator',
    'build_kernel',
    'effective_density',
    'DummyFillError',
    'FillPlanner',
    'FillVerificationError',
    'DensityScanner',
    'FilmProfileError',
    'LayoutIO',
    'LayoutIOError',
]
