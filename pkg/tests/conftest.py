import numpy as np
import pytest

from src.models.layout_db import LayoutDB, Polygon, Rect
from src.services.text_layout import write_layout_text


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def square_db():
    """One 1 x 1 um square on layer 1 in a 2 x 2 um die."""
    return LayoutDB(Rect(0, 0, 2000, 2000), {1: [Polygon.rect(0, 0, 1000, 1000, 1)]})


@pytest.fixture
def l_shape():
    """2000 x 1000 rectangle with a 1000 x 500 notch in the upper right."""
    return Polygon.from_points([(0, 0), (2000, 0), (2000, 500), (1000, 500), (1000, 1000), (0, 1000)], 1)


@pytest.fixture
def write_layout(tmp_path):
    """Write a LayoutDB as a text layout under tmp_path and return the path."""
    def _write(db: LayoutDB, name: str = "layout.txt") -> str:
        path = tmp_path / name
        path.write_text(write_layout_text(db), encoding="utf-8")
        return str(path)
    return _write
