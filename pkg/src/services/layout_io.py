"""Layout file loading, writing and format conversion (GDSII subset and text)."""

import logging
import os
from typing import Optional

from src.models.data_models import FillGeometry
from src.models.errors import CmpToolkitError
from src.models.layout_db import LayoutDB
from src.services.gds_stream import GdsParseError, GdsParser, write_gds
from src.services.text_layout import LayoutTextError, parse_layout_text, write_layout_text

logger = logging.getLogger(__name__)


class LayoutIOError(CmpToolkitError):
    """Exception raised for layout file and format errors."""
    pass


class LayoutIO:
    """Reads and writes layouts in the supported formats.

    Formats are 'gds' and 'text'; when no format is given it is inferred
    from the file extension.
    """

    SUPPORTED_EXTENSIONS = {'.gds': 'gds', '.gds2': 'gds', '.gdsii': 'gds',
                            '.txt': 'text', '.layout': 'text'}
    SUPPORTED_FORMATS = {'gds', 'text'}

    def __init__(self, top_cell: Optional[str] = None, snap_tolerance: Optional[float] = None):
        """
        Args:
            top_cell: GDS structure to flatten; auto-detected when None.
            snap_tolerance: Nanometer tolerance for non-integer GDS units.
        """
        self._top_cell = top_cell
        self._snap_tolerance = snap_tolerance

    def detect_format(self, file_path: str, fmt: Optional[str] = None) -> str:
        """Resolve an explicit format or infer it from the extension.

        Raises:
            LayoutIOError: If the format is unknown.
        """
        if fmt:
            if fmt not in self.SUPPORTED_FORMATS:
                raise LayoutIOError(f"unknown layout format {fmt!r}")
            return fmt
        _, ext = os.path.splitext(file_path)
        found = self.SUPPORTED_EXTENSIONS.get(ext.lower())
        if found is None:
            raise LayoutIOError(f"cannot infer layout format of {file_path!r}; pass a format")
        return found

    def parse(self, data: bytes, fmt: str) -> LayoutDB:
        """Parse in-memory layout bytes."""
        if fmt == 'gds':
            return GdsParser(self._top_cell, self._snap_tolerance).parse(data)
        if fmt == 'text':
            try:
                text = data.decode('utf-8')
            except UnicodeDecodeError as e:
                raise LayoutIOError(f"text layout is not valid UTF-8: {e}") from e
            return parse_layout_text(text)
        raise LayoutIOError(f"unknown layout format {fmt!r}")

    def load_file(self, file_path: str, fmt: Optional[str] = None) -> LayoutDB:
        """Load a layout file.

        Raises:
            LayoutIOError: If the file is missing or unreadable.
            GdsParseError: For malformed GDS streams.
            LayoutTextError: For malformed text layouts.
        """
        file_path = os.path.normpath(file_path)
        if not os.path.isfile(file_path):
            raise LayoutIOError(f"layout file not found: {file_path}")
        fmt = self.detect_format(file_path, fmt)
        try:
            with open(file_path, 'rb') as fh:
                data = fh.read()
        except OSError as e:
            raise LayoutIOError(f"cannot read {file_path}: {e}") from e
        db = self.parse(data, fmt)
        logger.info("Loaded %s (%s): %d polygons, %d vertices, layers %s",
                    file_path, fmt, db.polygon_count, db.vertex_count, db.layer_ids)
        return db

    @staticmethod
    def encode(db: LayoutDB, fmt: str) -> bytes:
        if fmt == 'gds':
            return write_gds(db)
        if fmt == 'text':
            return write_layout_text(db).encode('utf-8')
        raise LayoutIOError(f"unknown layout format {fmt!r}")

    def write_fill(self, db: LayoutDB, fill: FillGeometry, layer: Optional[int] = None,
                   fmt: str = 'gds', override: bool = False) -> bytes:
        """Encode the layout plus dummy squares on the fill layer.

        Args:
            db: Original layout.
            fill: Dummy squares.
            layer: Fill layer; defaults to fill.layer.
            fmt: 'gds' or 'text'.
            override: Allow writing onto a layer that already holds shapes.

        Raises:
            LayoutIOError: On a layer collision without override, or squares
                           outside the die.
        """
        layer = fill.layer if layer is None else layer
        if db.layers.get(layer) and not override:
            raise LayoutIOError(f"fill layer {layer} already holds {len(db.layers[layer])} shapes")
        if fill.count:
            s = fill.squares
            die = db.die_bbox
            if (s[:, 0].min() < die.x0 or s[:, 1].min() < die.y0
                    or s[:, 2].max() > die.x1 or s[:, 3].max() > die.y1):
                raise LayoutIOError("fill squares extend beyond the die")
        squares = FillGeometry(fill.squares, layer).to_polygons()
        merged = db.with_polygons(layer, squares).canonical()
        return self.encode(merged, fmt)

    def save(self, db: LayoutDB, file_path: str, fmt: Optional[str] = None) -> None:
        fmt = self.detect_format(file_path, fmt)
        try:
            with open(file_path, 'wb') as fh:
                fh.write(self.encode(db, fmt))
        except OSError as e:
            raise LayoutIOError(f"cannot write {file_path}: {e}") from e

    def convert(self, src_path: str, dst_path: str, src_format: Optional[str] = None,
                dst_format: Optional[str] = None) -> LayoutDB:
        """Convert between GDS and text; returns the parsed layout."""
        db = self.load_file(src_path, src_format)
        self.save(db, dst_path, dst_format)
        logger.info("Converted %s -> %s", src_path, dst_path)
        return db

