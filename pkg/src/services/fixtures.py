"""Synthetic layouts for self-checks: line arrays, a single block, checkerboards and mixed-density chips."""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np

from src.models.errors import ConfigError
from src.models.layout_db import LayoutDB, Polygon, Rect

logger = logging.getLogger(__name__)


def _rect_array(x0: int, y0: int, x1: int, y1: int, size_x: int, size_y: int,
                pitch_x: int, pitch_y: int, layer: int) -> List[Polygon]:
    """Rectangles of size_x by size_y repeated at the pitches, fully inside the region."""
    polys = []
    for y in range(y0, y1 - size_y + 1, pitch_y):
        for x in range(x0, x1 - size_x + 1, pitch_x):
            polys.append(Polygon.rect(x, y, x + size_x, y + size_y, layer))
    return polys


def line_array(pitch: int = 2000, width: int = 1000, die_width: int = 200_000,
               die_height: int = 200_000, layer: int = 1) -> LayoutDB:
    """Vertical lines of one width at one pitch across the whole die."""
    if not 0 < width <= pitch:
        raise ConfigError(f"line width {width} must lie in (0, pitch={pitch}]")
    if die_width % pitch:
        raise ConfigError(f"die width {die_width} must be a multiple of the {pitch} nm pitch")
    lines = [Polygon.rect(x, 0, x + width, die_height, layer) for x in range(0, die_width, pitch)]
    return LayoutDB(Rect(0, 0, die_width, die_height), {layer: lines}).canonical()


def single_square(die_size: int = 100_000, size: int = 10_000, layer: int = 1) -> LayoutDB:
    """One square block centered in a square die."""
    lo = (die_size - size) // 2
    block = Polygon.rect(lo, lo, lo + size, lo + size, layer)
    return LayoutDB(Rect(0, 0, die_size, die_size), {layer: [block]}).canonical()


def checkerboard(blocks: int = 8, block_size: int = 80_000, pitch: int = 2000, width: int = 1000,
                 layer: int = 1) -> LayoutDB:
    """Blocks alternating between a line array and open field, starting dense at the lower left."""
    polys: List[Polygon] = []
    for by in range(blocks):
        for bx in range(blocks):
            if (bx + by) % 2:
                continue
            x0, y0 = bx * block_size, by * block_size
            polys.extend(_rect_array(x0, y0, x0 + block_size, y0 + block_size,
                                     width, block_size, pitch, block_size, layer))
    side = blocks * block_size
    return LayoutDB(Rect(0, 0, side, side), {layer: polys}).canonical()


# Active-area styles of the mixed-density chip: (square edge, pitch) in nm.
MIXED_STYLES = {
    'dense': (3000, 4000),
    'medium': (4000, 8000),
    'sparse': (4000, 20_000),
    'empty': None,
}
MIXED_WEIGHTS = {'dense': 0.3, 'medium': 0.2, 'sparse': 0.2, 'empty': 0.3}


def mixed_density_chip(seed: int = 0, die_width: int = 2_200_000, die_height: int = 2_800_000,
                       block_size: int = 200_000, layer: int = 1) -> LayoutDB:
    """STI-style chip: every block gets a random active-area style.

    The default die is an 11 x 14 mm chip scaled down by five.
    """
    if die_width % block_size or die_height % block_size:
        raise ConfigError(f"die {die_width}x{die_height} must be a multiple of the {block_size} nm block")
    rng = np.random.default_rng(seed)
    names = list(MIXED_STYLES)
    weights = np.array([MIXED_WEIGHTS[n] for n in names])
    nx, ny = die_width // block_size, die_height // block_size
    choice = rng.choice(len(names), size=(ny, nx), p=weights / weights.sum())
    polys: List[Polygon] = []
    for by in range(ny):
        for bx in range(nx):
            style = MIXED_STYLES[names[choice[by, bx]]]
            if style is None:
                continue
            size, pitch = style
            x0, y0 = bx * block_size, by * block_size
            inset = (pitch - size) // 2
            polys.extend(_rect_array(x0 + inset, y0 + inset, x0 + block_size, y0 + block_size,
                                     size, size, pitch, pitch, layer))
    logger.debug("Mixed-density chip (seed %d): %d polygons", seed, len(polys))
    return LayoutDB(Rect(0, 0, die_width, die_height), {layer: polys}).canonical()


MIXED_PITCHES = (1000, 2000, 4000, 10_000, 20_000, 50_000)


def mixed_pitch_chip(seed: int = 0, die_size: int = 1_200_000, block_size: int = 200_000,
                     layer: int = 1) -> LayoutDB:
    """50%-duty line arrays whose pitch is drawn per block from MIXED_PITCHES."""
    if die_size % block_size:
        raise ConfigError(f"die {die_size} must be a multiple of the {block_size} nm block")
    rng = np.random.default_rng(seed)
    n = die_size // block_size
    picks = rng.integers(0, len(MIXED_PITCHES), size=(n, n))
    polys: List[Polygon] = []
    for by in range(n):
        for bx in range(n):
            pitch = MIXED_PITCHES[picks[by, bx]]
            x0, y0 = bx * block_size, by * block_size
            polys.extend(_rect_array(x0, y0, x0 + block_size, y0 + block_size,
                                     pitch // 2, block_size, pitch, block_size, layer))
    return LayoutDB(Rect(0, 0, die_size, die_size), {layer: polys}).canonical()


def random_layout(seed: int = 0, count: int = 20, die_size: int = 100_000, layers: int = 2,
                  max_size: int = 20_000) -> LayoutDB:
    """Random rectangles (overlaps allowed) on a few layers, all inside the die."""
    rng = np.random.default_rng(seed)
    result: Dict[int, List[Polygon]] = {}
    for _ in range(count):
        layer = int(rng.integers(1, layers + 1))
        w, h = (int(v) for v in rng.integers(1, max_size, size=2))
        x = int(rng.integers(0, die_size - w))
        y = int(rng.integers(0, die_size - h))
        result.setdefault(layer, []).append(Polygon.rect(x, y, x + w, y + h, layer))
    return LayoutDB(Rect(0, 0, die_size, die_size), result).canonical()


FIXTURES: Dict[str, Callable[..., LayoutDB]] = {
    'line-array': lambda seed=0, layer=1: line_array(layer=layer),
    'single-square': lambda seed=0, layer=1: single_square(layer=layer),
    'checkerboard': lambda seed=0, layer=1: checkerboard(layer=layer),
    'mixed-density': lambda seed=0, layer=1: mixed_density_chip(seed, layer=layer),
    'mixed-pitch': lambda seed=0, layer=1: mixed_pitch_chip(seed, layer=layer),
    'random': lambda seed=0, layer=1: random_layout(seed),
}


def generate_fixture(name: str, seed: int = 0, layer: Optional[int] = None) -> LayoutDB:
    """Build a named fixture layout.

    Raises:
        ConfigError: If the fixture name is unknown.
    """
    builder = FIXTURES.get(name)
    if builder is None:
        raise ConfigError(f"unknown fixture {name!r}; choose from {', '.join(sorted(FIXTURES))}")
    db = builder(seed=seed, layer=1 if layer is None else layer)
    logger.info("Generated fixture %s: %d polygons on layers %s", name, db.polygon_count, db.layer_ids)
    return db
