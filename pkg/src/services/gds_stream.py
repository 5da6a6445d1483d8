"""GDSII stream codec: record reader, flattening parser and boundary writer.

Only the subset needed for geometry extraction is supported: boundaries,
boxes, Manhattan paths and SREF/AREF placements with 90-degree rotations
and x-axis reflection. Everything is converted to integer nanometers.
"""

import logging
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.models.errors import CmpToolkitError, GeometryError
from src.models.layout_db import LayoutDB, Polygon, Rect

logger = logging.getLogger(__name__)


class GdsParseError(CmpToolkitError):
    """Exception raised for malformed or unsupported GDSII streams."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GdsWriteError(CmpToolkitError):
    """Exception raised when a layout cannot be encoded as GDSII."""
    pass


# Data type codes
NO_DATA = 0
BIT_ARRAY = 1
INT16 = 2
INT32 = 3
REAL4 = 4
REAL8 = 5
ASCII = 6

# record type -> (name, data type)
RECORD_TYPES: Dict[int, Tuple[str, int]] = {
    0x00: ('HEADER', INT16),
    0x01: ('BGNLIB', INT16),
    0x02: ('LIBNAME', ASCII),
    0x03: ('UNITS', REAL8),
    0x04: ('ENDLIB', NO_DATA),
    0x05: ('BGNSTR', INT16),
    0x06: ('STRNAME', ASCII),
    0x07: ('ENDSTR', NO_DATA),
    0x08: ('BOUNDARY', NO_DATA),
    0x09: ('PATH', NO_DATA),
    0x0A: ('SREF', NO_DATA),
    0x0B: ('AREF', NO_DATA),
    0x0C: ('TEXT', NO_DATA),
    0x0D: ('LAYER', INT16),
    0x0E: ('DATATYPE', INT16),
    0x0F: ('WIDTH', INT32),
    0x10: ('XY', INT32),
    0x11: ('ENDEL', NO_DATA),
    0x12: ('SNAME', ASCII),
    0x13: ('COLROW', INT16),
    0x15: ('NODE', NO_DATA),
    0x16: ('TEXTTYPE', INT16),
    0x17: ('PRESENTATION', BIT_ARRAY),
    0x19: ('STRING', ASCII),
    0x1A: ('STRANS', BIT_ARRAY),
    0x1B: ('MAG', REAL8),
    0x1C: ('ANGLE', REAL8),
    0x1F: ('REFLIBS', ASCII),
    0x20: ('FONTS', ASCII),
    0x21: ('PATHTYPE', INT16),
    0x22: ('GENERATIONS', INT16),
    0x23: ('ATTRTABLE', ASCII),
    0x26: ('ELFLAGS', BIT_ARRAY),
    0x2A: ('NODETYPE', INT16),
    0x2B: ('PROPATTR', INT16),
    0x2C: ('PROPVALUE', ASCII),
    0x2D: ('BOX', NO_DATA),
    0x2E: ('BOXTYPE', INT16),
    0x2F: ('PLEX', INT32),
    0x30: ('BGNEXTN', INT32),
    0x31: ('ENDEXTN', INT32),
    0x36: ('FORMAT', INT16),
    0x37: ('MASK', ASCII),
    0x38: ('ENDMASKS', NO_DATA),
    0x39: ('LIBDIRSIZE', INT16),
    0x3A: ('SRFNAME', ASCII),
    0x3B: ('LIBSECUR', INT16),
}
RECORD_CODES = {name: code for code, (name, _) in RECORD_TYPES.items()}

# Library-level records that carry no geometry
_IGNORED_LIBRARY_RECORDS = {'REFLIBS', 'FONTS', 'GENERATIONS', 'ATTRTABLE', 'FORMAT', 'MASK',
                            'ENDMASKS', 'LIBDIRSIZE', 'SRFNAME', 'LIBSECUR'}
# Element-level records that carry no geometry
_IGNORED_ELEMENT_RECORDS = {'ELFLAGS', 'PLEX', 'DATATYPE', 'BOXTYPE', 'PROPATTR', 'PROPVALUE'}
_ELEMENT_STARTS = {'BOUNDARY', 'PATH', 'SREF', 'AREF', 'TEXT', 'NODE', 'BOX'}

_STRANS_REFLECT = 0x8000
_STRANS_ABS_MAG = 0x0004
_STRANS_ABS_ANGLE = 0x0002

MAX_XY_POINTS = 8191
DIE_PREFIX = "DIE:"


# ============================================================
# Excess-64 reals
# ============================================================

def decode_real8(raw: bytes) -> Fraction:
    """Decode an 8-byte excess-64 GDSII real exactly."""
    value = int.from_bytes(raw, 'big')
    negative = value >> 63
    exponent = (value >> 56) & 0x7F
    mantissa = value & 0x00FFFFFFFFFFFFFF
    result = Fraction(mantissa, 1 << 56) * Fraction(16) ** (exponent - 64)
    return -result if negative else result


def encode_real8(x: float) -> bytes:
    """Encode a number as an 8-byte excess-64 GDSII real (nearest representable)."""
    if x == 0:
        return b'\x00' * 8
    value = Fraction(x)
    sign = 0
    if value < 0:
        sign, value = 1, -value
    exponent = 64
    while value >= 1:
        value /= 16
        exponent += 1
    while value < Fraction(1, 16):
        value *= 16
        exponent -= 1
    mantissa = round(value * (1 << 56))
    if mantissa >= 1 << 56:
        mantissa >>= 4
        exponent += 1
    if not 0 <= exponent <= 127:
        raise GdsWriteError(f"real value {x} is out of GDSII range")
    return ((sign << 63) | (exponent << 56) | mantissa).to_bytes(8, 'big')


# ============================================================
# Records
# ============================================================

@dataclass
class GdsRecord:
    """One raw stream record."""
    offset: int
    record_type: int
    data_type: int
    payload: bytes

    @property
    def name(self) -> str:
        return RECORD_TYPES[self.record_type][0]

    @property
    def length(self) -> int:
        return len(self.payload) + 4

    def values(self):
        """Decoded payload: list of ints, list of Fractions, a string, an int or None."""
        if self.data_type == NO_DATA:
            return None
        if self.data_type == BIT_ARRAY:
            return int.from_bytes(self.payload, 'big')
        if self.data_type == INT16:
            return np.frombuffer(self.payload, dtype='>i2').astype(np.int64).tolist()
        if self.data_type == INT32:
            return np.frombuffer(self.payload, dtype='>i4').astype(np.int64).tolist()
        if self.data_type == REAL8:
            return [decode_real8(self.payload[i:i + 8]) for i in range(0, len(self.payload), 8)]
        if self.data_type == ASCII:
            try:
                return self.payload.rstrip(b'\x00').decode('ascii')
            except UnicodeDecodeError:
                raise GdsParseError(f"non-ASCII string in {self.name}", self.offset)
        raise GdsParseError(f"unsupported data type {self.data_type}", self.offset)


_ELEMENT_SIZE = {NO_DATA: None, BIT_ARRAY: 2, INT16: 2, INT32: 4, REAL8: 8, ASCII: 1}


def iter_records(data: bytes) -> Iterator[GdsRecord]:
    """Split a stream into validated records, stopping after ENDLIB.

    Raises:
        GdsParseError: On a truncated record, an odd or too-short length,
                       an unknown record type or a data type mismatch.
    """
    pos = 0
    size = len(data)
    while True:
        if pos + 4 > size:
            raise GdsParseError("truncated record header (stream ended before ENDLIB)", pos)
        length, rtype, dtype = struct.unpack_from('>HBB', data, pos)
        if length < 4:
            raise GdsParseError(f"record length {length} is shorter than its header", pos)
        if length % 2:
            raise GdsParseError(f"odd record length {length}", pos)
        if pos + length > size:
            raise GdsParseError(f"truncated record: {length} bytes declared, {size - pos} left", pos)
        if rtype not in RECORD_TYPES:
            raise GdsParseError(f"unknown record type 0x{rtype:02x}", pos)
        name, expected = RECORD_TYPES[rtype]
        if dtype != expected:
            raise GdsParseError(f"{name} has data type {dtype}, expected {expected}", pos)
        payload = data[pos + 4:pos + length]
        unit = _ELEMENT_SIZE[dtype]
        if unit is None and payload:
            raise GdsParseError(f"{name} must not carry data", pos)
        if dtype == BIT_ARRAY and len(payload) != 2:
            raise GdsParseError(f"{name} must carry exactly 2 bytes", pos)
        if unit and len(payload) % unit:
            raise GdsParseError(f"{name} payload of {len(payload)} bytes is not a multiple of {unit}", pos)
        yield GdsRecord(pos, rtype, dtype, payload)
        pos += length
        if name == 'ENDLIB':
            return


def encode_record(name: str, values=None) -> bytes:
    """Encode one record from its name and values."""
    rtype = RECORD_CODES[name]
    dtype = RECORD_TYPES[rtype][1]
    if dtype == NO_DATA:
        payload = b''
    elif dtype == INT16:
        payload = np.asarray(values, dtype='>i2').tobytes()
    elif dtype == INT32:
        arr = np.asarray(values, dtype=np.int64)
        if arr.size and (arr.min() < -2 ** 31 or arr.max() >= 2 ** 31):
            raise GdsWriteError(f"{name} value outside the 32-bit range")
        payload = arr.astype('>i4').tobytes()
    elif dtype == REAL8:
        payload = b''.join(encode_real8(v) for v in values)
    elif dtype == BIT_ARRAY:
        payload = int(values).to_bytes(2, 'big')
    else:
        payload = values.encode('ascii')
        if len(payload) % 2:
            payload += b'\x00'
    if len(payload) + 4 > 0xFFFF:
        raise GdsWriteError(f"{name} record too long ({len(payload)} bytes)")
    return struct.pack('>HBB', len(payload) + 4, rtype, dtype) + payload


# ============================================================
# Parser
# ============================================================

@dataclass
class _Shape:
    layer: int
    points: np.ndarray   # (n, 2) int64, database units
    offset: int


@dataclass
class _Placement:
    name: str
    offset: int
    reflect: bool
    angle: int                      # degrees, multiple of 90
    origin: Tuple[int, int]
    cols: int = 1
    rows: int = 1
    col_step: Tuple[int, int] = (0, 0)
    row_step: Tuple[int, int] = (0, 0)

    @property
    def count(self) -> int:
        return self.cols * self.rows

    def origins(self) -> np.ndarray:
        """(count, 2) instance origins, row by row."""
        c = np.arange(self.cols, dtype=np.int64)[None, :]
        r = np.arange(self.rows, dtype=np.int64)[:, None]
        xs = self.origin[0] + c * self.col_step[0] + r * self.row_step[0]
        ys = self.origin[1] + c * self.col_step[1] + r * self.row_step[1]
        return np.stack([xs.ravel(), ys.ravel()], axis=1)


@dataclass
class _Structure:
    name: str
    offset: int
    shapes: List[_Shape] = field(default_factory=list)
    placements: List[_Placement] = field(default_factory=list)


def _orient(points: np.ndarray, reflect: bool, angle: int) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    if reflect:
        y = -y
    turn = (angle // 90) % 4
    if turn == 1:
        x, y = -y, x
    elif turn == 2:
        x, y = -x, -y
    elif turn == 3:
        x, y = y, -x
    return np.stack([x, y], axis=1)


class GdsParser:
    """Parse a GDSII stream into a flattened LayoutDB.

    Args:
        top_cell: Structure to flatten; auto-detected when None.
        snap_tolerance: When set (nm), database units that are not a whole
                        number of nanometers are accepted and coordinates
                        are rounded if they land within this tolerance.
        max_polygons: Upper bound on flattened polygons.
    """

    def __init__(self, top_cell: Optional[str] = None, snap_tolerance: Optional[float] = None,
                 max_polygons: int = 50_000_000):
        self._top_cell = top_cell
        self._snap_tolerance = snap_tolerance
        self._max_polygons = max_polygons
        self._offset = 0
        self.skipped_elements = 0

    def parse(self, data: bytes) -> LayoutDB:
        """Parse and flatten a complete stream.

        Raises:
            GdsParseError: For every malformed or unsupported input.
        """
        self._offset = 0
        self.skipped_elements = 0
        try:
            return self._parse(bytes(data))
        except GdsParseError:
            raise
        except (GeometryError, ValueError, TypeError, OverflowError, ZeroDivisionError,
                IndexError, KeyError, RecursionError, struct.error) as e:
            raise GdsParseError(f"invalid stream content: {e}", self._offset) from e

    # -- record level ------------------------------------------------

    def _parse(self, data: bytes) -> LayoutDB:
        records = iter_records(data)
        header = self._next(records)
        if header.name != 'HEADER':
            raise GdsParseError(f"stream must start with HEADER, found {header.name}", header.offset)
        libname = None
        nm_per_db: Optional[Fraction] = None
        structures: Dict[str, _Structure] = {}
        seen_bgnlib = False
        for rec in records:
            self._offset = rec.offset
            name = rec.name
            if name == 'BGNLIB':
                seen_bgnlib = True
            elif name == 'LIBNAME':
                libname = rec.values()
            elif name == 'UNITS':
                units = rec.values()
                if len(units) != 2 or units[1] <= 0:
                    raise GdsParseError("UNITS must hold two positive reals", rec.offset)
                nm_per_db = units[1] * 10 ** 9
            elif name == 'BGNSTR':
                if not seen_bgnlib or nm_per_db is None:
                    raise GdsParseError("structure before BGNLIB/UNITS", rec.offset)
                struct_ = self._parse_structure(records, rec.offset)
                if struct_.name in structures:
                    raise GdsParseError(f"duplicate structure {struct_.name!r}", rec.offset)
                structures[struct_.name] = struct_
            elif name == 'ENDLIB':
                return self._build(structures, libname, nm_per_db, rec.offset)
            elif name in _IGNORED_LIBRARY_RECORDS:
                continue
            else:
                raise GdsParseError(f"unexpected {name} at library level", rec.offset)
        raise GdsParseError("stream ended before ENDLIB", len(data))

    def _next(self, records: Iterator[GdsRecord]) -> GdsRecord:
        rec = next(records, None)
        if rec is None:
            raise GdsParseError("stream ended unexpectedly", self._offset)
        self._offset = rec.offset
        return rec

    def _parse_structure(self, records: Iterator[GdsRecord], start: int) -> _Structure:
        rec = self._next(records)
        if rec.name != 'STRNAME':
            raise GdsParseError(f"BGNSTR must be followed by STRNAME, found {rec.name}", rec.offset)
        struct_ = _Structure(rec.values(), start)
        while True:
            rec = self._next(records)
            if rec.name == 'ENDSTR':
                return struct_
            if rec.name not in _ELEMENT_STARTS:
                raise GdsParseError(f"unexpected {rec.name} inside structure {struct_.name!r}", rec.offset)
            fields = self._collect_element(records, rec)
            if rec.name in ('TEXT', 'NODE'):
                self.skipped_elements += 1
            elif rec.name in ('BOUNDARY', 'BOX'):
                struct_.shapes.append(self._boundary(rec, fields))
            elif rec.name == 'PATH':
                struct_.shapes.extend(self._path(rec, fields))
            else:
                struct_.placements.append(self._placement(rec, fields))

    def _collect_element(self, records: Iterator[GdsRecord], start: GdsRecord) -> Dict[str, GdsRecord]:
        fields: Dict[str, GdsRecord] = {}
        while True:
            rec = self._next(records)
            if rec.name == 'ENDEL':
                return fields
            if rec.name in _ELEMENT_STARTS or rec.name in ('ENDSTR', 'ENDLIB', 'BGNSTR'):
                raise GdsParseError(f"{start.name} element not closed by ENDEL", rec.offset)
            if start.name in ('TEXT', 'NODE') or rec.name in _IGNORED_ELEMENT_RECORDS:
                continue
            fields[rec.name] = rec

    @staticmethod
    def _require(fields: Dict[str, GdsRecord], name: str, element: GdsRecord) -> GdsRecord:
        rec = fields.get(name)
        if rec is None:
            raise GdsParseError(f"{element.name} without {name}", element.offset)
        return rec

    def _xy(self, fields: Dict[str, GdsRecord], element: GdsRecord) -> np.ndarray:
        rec = self._require(fields, 'XY', element)
        values = rec.values()
        if len(values) % 2 or not values:
            raise GdsParseError("XY must hold coordinate pairs", rec.offset)
        return np.asarray(values, dtype=np.int64).reshape(-1, 2)

    def _layer(self, fields: Dict[str, GdsRecord], element: GdsRecord) -> int:
        layer = self._require(fields, 'LAYER', element).values()
        if len(layer) != 1 or layer[0] < 0:
            raise GdsParseError(f"invalid LAYER {layer}", element.offset)
        return int(layer[0])

    def _boundary(self, element: GdsRecord, fields: Dict[str, GdsRecord]) -> _Shape:
        layer = self._layer(fields, element)
        pts = self._xy(fields, element)
        if len(pts) < 4:
            raise GdsParseError(f"{element.name} with only {len(pts)} points", element.offset)
        ring = np.vstack([pts, pts[:1]])
        steps = np.diff(ring, axis=0)
        if np.any((steps[:, 0] != 0) & (steps[:, 1] != 0)):
            raise GdsParseError(f"non-rectilinear {element.name} on layer {layer}", element.offset)
        return _Shape(layer, pts, element.offset)

    def _path(self, element: GdsRecord, fields: Dict[str, GdsRecord]) -> List[_Shape]:
        layer = self._layer(fields, element)
        pathtype = fields['PATHTYPE'].values()[0] if 'PATHTYPE' in fields else 0
        if pathtype not in (0, 2):
            raise GdsParseError(f"unsupported PATHTYPE {pathtype}", element.offset)
        width = fields['WIDTH'].values()[0] if 'WIDTH' in fields else 0
        if width < 0:
            raise GdsParseError("absolute (negative) path WIDTH is not supported", element.offset)
        if width % 2:
            raise GdsParseError(f"odd path WIDTH {width} cannot be centered exactly", element.offset)
        pts = self._xy(fields, element)
        if width == 0 or len(pts) < 2:
            return []
        half = width // 2
        shapes = []
        last = len(pts) - 2
        for i in range(len(pts) - 1):
            (xa, ya), (xb, yb) = pts[i], pts[i + 1]
            if xa != xb and ya != yb:
                raise GdsParseError(f"non-Manhattan PATH segment on layer {layer}", element.offset)
            if xa == xb and ya == yb:
                continue
            ext_start = half if (pathtype == 2 or i > 0) else 0
            ext_end = half if (pathtype == 2 or i < last) else 0
            if ya == yb:
                lo, hi = (xa, xb) if xa < xb else (xb, xa)
                lo -= ext_start if xa < xb else ext_end
                hi += ext_end if xa < xb else ext_start
                x0, x1, y0, y1 = lo, hi, ya - half, ya + half
            else:
                lo, hi = (ya, yb) if ya < yb else (yb, ya)
                lo -= ext_start if ya < yb else ext_end
                hi += ext_end if ya < yb else ext_start
                x0, x1, y0, y1 = xa - half, xa + half, lo, hi
            box = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.int64)
            shapes.append(_Shape(layer, box, element.offset))
        return shapes

    def _placement(self, element: GdsRecord, fields: Dict[str, GdsRecord]) -> _Placement:
        sname = self._require(fields, 'SNAME', element).values()
        strans = fields['STRANS'].values() if 'STRANS' in fields else 0
        if strans & (_STRANS_ABS_MAG | _STRANS_ABS_ANGLE):
            raise GdsParseError("absolute magnification/angle flags are not supported", element.offset)
        if 'MAG' in fields and fields['MAG'].values() != [1]:
            raise GdsParseError("magnification other than 1 is not supported", fields['MAG'].offset)
        angle = 0
        if 'ANGLE' in fields:
            value = fields['ANGLE'].values()
            if len(value) != 1 or value[0].denominator != 1 or value[0] % 90:
                raise GdsParseError(f"non-orthogonal ANGLE {float(value[0]) if value else value}",
                                    fields['ANGLE'].offset)
            angle = int(value[0]) % 360
        pts = self._xy(fields, element)
        if element.name == 'SREF':
            if len(pts) != 1:
                raise GdsParseError("SREF needs exactly one XY point", element.offset)
            return _Placement(sname, element.offset, bool(strans & _STRANS_REFLECT), angle,
                              (int(pts[0, 0]), int(pts[0, 1])))
        else:
            colrow = self._require(fields, 'COLROW', element).values()
            if len(colrow) != 2 or colrow[0] < 1 or colrow[1] < 1:
                raise GdsParseError(f"invalid COLROW {colrow}", element.offset)
            if len(pts) != 3:
                raise GdsParseError("AREF needs exactly three XY points", element.offset)
            cols, rows = colrow
            if cols * rows > self._max_polygons:
                raise GdsParseError(f"AREF with {cols}x{rows} instances is too large", element.offset)
            col_span = pts[1] - pts[0]
            row_span = pts[2] - pts[0]
            if np.any(col_span % cols) or np.any(row_span % rows):
                raise GdsParseError("AREF spacing is not a whole number of database units",
                                    element.offset)
            col_step, row_step = col_span // cols, row_span // rows
        # AREF instances stay implicit until flattening knows the child's size
        return _Placement(sname, element.offset, bool(strans & _STRANS_REFLECT), angle,
                          (int(pts[0, 0]), int(pts[0, 1])), int(cols), int(rows),
                          (int(col_step[0]), int(col_step[1])), (int(row_step[0]), int(row_step[1])))

    # -- flattening --------------------------------------------------

    def _build(self, structures: Dict[str, _Structure], libname: Optional[str],
               nm_per_db: Optional[Fraction], end_offset: int) -> LayoutDB:
        if nm_per_db is None:
            raise GdsParseError("missing UNITS record", end_offset)
        scale, unit_per_db = self._scale(nm_per_db, end_offset)
        if not structures:
            raise GdsParseError("library holds no structures", end_offset)
        top = self._find_top(structures, end_offset)
        shapes = self._flatten(top, structures, {}, set())
        layers: Dict[int, List[Polygon]] = {}
        for shape in shapes:
            self._offset = shape.offset
            pts = self._to_nm(shape.points, scale, shape.offset)
            try:
                poly = Polygon.from_points(pts.tolist(), shape.layer)
            except GeometryError as e:
                raise GdsParseError(f"invalid polygon on layer {shape.layer}: {e}", shape.offset) from e
            layers.setdefault(shape.layer, []).append(poly)
        die = self._die(libname, layers, end_offset)
        db = LayoutDB(die_bbox=die, layers=layers, unit_per_db=unit_per_db).canonical()
        try:
            db.validate()
        except GeometryError as e:
            raise GdsParseError(str(e), end_offset) from e
        if self.skipped_elements:
            logger.info("Skipped %d TEXT/NODE elements", self.skipped_elements)
        logger.debug("Parsed GDS top cell %r: %d polygons, %d vertices",
                     top, db.polygon_count, db.vertex_count)
        return db

    def _scale(self, nm_per_db: Fraction, offset: int) -> Tuple[object, int]:
        whole = round(nm_per_db)
        if whole >= 1 and abs(nm_per_db - whole) <= Fraction(1, 10 ** 6) * whole:
            return whole, int(whole)
        if self._snap_tolerance is None:
            raise GdsParseError(
                f"database unit of {float(nm_per_db):g} nm is not a whole number of nanometers "
                f"(set a snap tolerance to round coordinates)", offset)
        return float(nm_per_db), 1

    def _to_nm(self, points: np.ndarray, scale, offset: int) -> np.ndarray:
        if isinstance(scale, int):
            return points * scale
        exact = points.astype(np.float64) * scale
        rounded = np.rint(exact)
        if np.any(np.abs(exact - rounded) > self._snap_tolerance):
            raise GdsParseError("coordinate does not snap to the nanometer grid within tolerance", offset)
        return rounded.astype(np.int64)

    def _find_top(self, structures: Dict[str, _Structure], offset: int) -> str:
        if self._top_cell is not None:
            if self._top_cell not in structures:
                raise GdsParseError(f"top cell {self._top_cell!r} not found", offset)
            return self._top_cell
        referenced = {p.name for s in structures.values() for p in s.placements}
        tops = sorted(name for name in structures if name not in referenced)
        if not tops:
            raise GdsParseError("no unreferenced structure (reference cycle)", offset)
        if len(tops) > 1:
            raise GdsParseError(f"multiple top cells {tops}; choose one explicitly", offset)
        return tops[0]

    def _flatten(self, name: str, structures: Dict[str, _Structure],
                 memo: Dict[str, List[_Shape]], active: set) -> List[_Shape]:
        if name in memo:
            return memo[name]
        struct_ = structures[name]
        active.add(name)
        out = list(struct_.shapes)
        for place in struct_.placements:
            self._offset = place.offset
            if place.name in active:
                raise GdsParseError(f"reference cycle through {place.name!r}", place.offset)
            if place.name not in structures:
                raise GdsParseError(f"reference to undefined structure {place.name!r}", place.offset)
            child = self._flatten(place.name, structures, memo, active)
            if not child:
                continue
            if len(out) + len(child) * place.count > self._max_polygons:
                raise GdsParseError(f"flattened layout exceeds {self._max_polygons} polygons",
                                    place.offset)
            oriented = [(s, _orient(s.points, place.reflect, place.angle)) for s in child]
            for shift in place.origins():
                out.extend(_Shape(s.layer, pts + shift, s.offset) for s, pts in oriented)
        active.discard(name)
        memo[name] = out
        return out

    @staticmethod
    def _die(libname: Optional[str], layers: Dict[int, List[Polygon]], offset: int) -> Rect:
        if libname and libname.startswith(DIE_PREFIX):
            try:
                x0, y0, x1, y1 = (int(v) for v in libname[len(DIE_PREFIX):].split(','))
            except ValueError:
                raise GdsParseError(f"malformed die annotation {libname!r}", offset)
            return Rect(x0, y0, x1, y1)
        boxes = [p.bbox for polys in layers.values() for p in polys]
        if not boxes:
            raise GdsParseError("empty layout without a die annotation", offset)
        return Rect(min(b.x0 for b in boxes), min(b.y0 for b in boxes),
                    max(b.x1 for b in boxes), max(b.y1 for b in boxes))


def parse_gds(data: bytes, top_cell: Optional[str] = None,
              snap_tolerance: Optional[float] = None) -> LayoutDB:
    """Parse a GDSII stream into a flattened, canonical LayoutDB."""
    return GdsParser(top_cell=top_cell, snap_tolerance=snap_tolerance).parse(data)


# ============================================================
# Writer
# ============================================================

_FIXED_TIMESTAMP = [2000, 1, 1, 0, 0, 0] * 2


def _all_multiples(db: LayoutDB, unit: int) -> bool:
    if any(c % unit for c in db.die_bbox.as_tuple()):
        return False
    return all(x % unit == 0 and y % unit == 0
               for polys in db.layers.values() for p in polys for x, y in p.vertices)


def write_gds(db: LayoutDB, structure_name: str = "TOP") -> bytes:
    """Encode a layout as a single flat structure of BOUNDARY elements.

    The die box is stored in LIBNAME so that a re-parse recovers it. The
    database unit is db.unit_per_db nanometers when every coordinate is a
    multiple of it, otherwise 1 nm.

    Raises:
        GdsWriteError: If a polygon has too many vertices or a coordinate
                       does not fit in 32 bits.
    """
    unit = db.unit_per_db
    die = db.die_bbox
    if unit > 1 and not _all_multiples(db, unit):
        unit = 1
    chunks = [
        encode_record('HEADER', [600]),
        encode_record('BGNLIB', _FIXED_TIMESTAMP),
        encode_record('LIBNAME', f"{DIE_PREFIX}{die.x0},{die.y0},{die.x1},{die.y1}"),
        encode_record('UNITS', [unit * 1e-3, unit * 1e-9]),
        encode_record('BGNSTR', _FIXED_TIMESTAMP),
        encode_record('STRNAME', structure_name),
    ]
    for layer in sorted(db.layers):
        for poly in sorted(db.layers[layer], key=lambda p: p.sort_key):
            if len(poly.vertices) + 1 > MAX_XY_POINTS:
                raise GdsWriteError(f"polygon with {len(poly.vertices)} vertices exceeds the XY record limit")
            ring = np.asarray(poly.vertices + (poly.vertices[0],), dtype=np.int64) // unit
            chunks.append(encode_record('BOUNDARY'))
            chunks.append(encode_record('LAYER', [layer]))
            chunks.append(encode_record('DATATYPE', [0]))
            chunks.append(encode_record('XY', ring.ravel()))
            chunks.append(encode_record('ENDEL'))
    chunks.append(encode_record('ENDSTR'))
    chunks.append(encode_record('ENDLIB'))
    return b''.join(chunks)
