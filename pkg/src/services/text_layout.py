"""Line-oriented text layout format.

    unit nm
    die <x0> <y0> <x1> <y1>
    rect <layer> <x0> <y0> <x1> <y1>
    poly <layer> <x0> <y0> <x1> <y1> ... <xn> <yn>

One item per line, '#' starts a comment, coordinates are integer nm.
"""

import logging
import re
from typing import Dict, List, Optional, Tuple

from src.models.errors import CmpToolkitError, GeometryError
from src.models.layout_db import LayoutDB, Polygon, Rect

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r'\S+')


class LayoutTextError(CmpToolkitError):
    """Exception raised for malformed text layouts."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _tokens(line: str) -> List[Tuple[str, int]]:
    body = line.split('#', 1)[0]
    return [(m.group(0), m.start() + 1) for m in _TOKEN.finditer(body)]


def _ints(tokens: List[Tuple[str, int]], lineno: int) -> List[int]:
    values = []
    for text, col in tokens:
        try:
            values.append(int(text))
        except ValueError:
            raise LayoutTextError(f"expected an integer, found {text!r}", lineno, col)
    return values


def parse_layout_text(text: str) -> LayoutDB:
    """Parse a text layout into a canonical LayoutDB.

    Raises:
        LayoutTextError: With the line and column of the first problem.
    """
    unit_seen = False
    die: Optional[Rect] = None
    layers: Dict[int, List[Polygon]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = _tokens(line)
        if not tokens:
            continue
        keyword, col = tokens[0]
        args = tokens[1:]
        if keyword == 'unit':
            if unit_seen:
                raise LayoutTextError("duplicate unit declaration", lineno, col)
            if len(args) != 1 or args[0][0] != 'nm':
                where = args[0][1] if args else col
                raise LayoutTextError("unit mismatch: only 'unit nm' is supported", lineno, where)
            unit_seen = True
            continue
        if not unit_seen:
            raise LayoutTextError("'unit nm' must come first", lineno, col)
        if keyword == 'die':
            if die is not None:
                raise LayoutTextError("duplicate die declaration", lineno, col)
            if len(args) != 4:
                raise LayoutTextError(f"die needs 4 coordinates, got {len(args)}", lineno, col)
            die = Rect(*_ints(args, lineno))
            if die.is_empty():
                raise LayoutTextError("die box is empty", lineno, col)
            continue
        if keyword not in ('rect', 'poly'):
            raise LayoutTextError(f"unknown item {keyword!r}", lineno, col)
        if die is None:
            raise LayoutTextError("shapes must follow the die declaration", lineno, col)
        if not args:
            raise LayoutTextError(f"{keyword} needs a layer", lineno, col)
        layer = _ints(args[:1], lineno)[0]
        coords = _ints(args[1:], lineno)
        try:
            if keyword == 'rect':
                if len(coords) != 4:
                    raise LayoutTextError(f"rect needs 4 coordinates, got {len(coords)}", lineno, col)
                poly = Polygon.rect(*coords, layer=layer)
            else:
                if len(coords) % 2:
                    raise LayoutTextError(f"odd coordinate count {len(coords)}", lineno, args[-1][1])
                poly = Polygon.from_points(zip(coords[0::2], coords[1::2]), layer)
        except GeometryError as e:
            raise LayoutTextError(str(e), lineno, col) from e
        if not die.contains_rect(poly.bbox):
            raise LayoutTextError(f"shape {poly.bbox.as_tuple()} lies outside the die", lineno, col)
        layers.setdefault(layer, []).append(poly)
    if not unit_seen:
        raise LayoutTextError("missing 'unit nm' declaration", 1)
    if die is None:
        raise LayoutTextError("missing die declaration", 1)
    db = LayoutDB(die_bbox=die, layers=layers).canonical()
    logger.debug("Parsed text layout: %d polygons on %d layers", db.polygon_count, len(db.layers))
    return db


def write_layout_text(db: LayoutDB) -> str:
    """Canonical text form: shapes sorted by (layer, x0, y0, ...), rectangles as rect."""
    d = db.die_bbox
    lines = ["unit nm", f"die {d.x0} {d.y0} {d.x1} {d.y1}"]
    for layer in sorted(db.layers):
        for poly in sorted(db.layers[layer], key=lambda p: p.sort_key):
            if poly.is_rect:
                b = poly.bbox
                lines.append(f"rect {layer} {b.x0} {b.y0} {b.x1} {b.y1}")
            else:
                coords = " ".join(f"{x} {y}" for x, y in poly.vertices)
                lines.append(f"poly {layer} {coords}")
    return "\n".join(lines) + "\n"
