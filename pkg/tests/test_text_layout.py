import pytest

from src.models.layout_db import LayoutDB, Polygon, Rect
from src.services.fixtures import random_layout
from src.services.text_layout import LayoutTextError, parse_layout_text, write_layout_text

SAMPLE = """\
unit nm
# a comment line
die 0 0 5000 5000
rect 1 0 0 1000 1000   # trailing comment
poly 2 0 2000 2000 2000 2000 2500 1000 2500 1000 3000 0 3000
"""


def test_parse_sample():
    db = parse_layout_text(SAMPLE)
    assert db.die_bbox == Rect(0, 0, 5000, 5000)
    assert db.layers[1] == [Polygon.rect(0, 0, 1000, 1000, 1)]
    assert db.layers[2][0].bbox == Rect(0, 2000, 2000, 3000)
    assert db.total_area(2) == 1_500_000


def test_write_is_canonical():
    db = parse_layout_text(SAMPLE)
    text = write_layout_text(db)
    assert text.splitlines()[:3] == ["unit nm", "die 0 0 5000 5000", "rect 1 0 0 1000 1000"]
    assert write_layout_text(parse_layout_text(text)) == text


@pytest.mark.parametrize('seed', [0, 7])
def test_round_trip(seed):
    db = random_layout(seed=seed)
    assert parse_layout_text(write_layout_text(db)) == db


def test_empty_layout():
    db = parse_layout_text("unit nm\ndie 0 0 100 100\n")
    assert db.polygon_count == 0
    assert write_layout_text(db) == "unit nm\ndie 0 0 100 100\n"


class TestErrors:
    @pytest.mark.parametrize('text, line, column', [
        ("unit um\ndie 0 0 10 10\n", 1, 6),
        ("die 0 0 10 10\n", 1, 1),
        ("unit nm\ndie 0 0 10 10\nrect 1 0 0 x 5\n", 3, 12),
        ("unit nm\ndie 0 0 10 10\npoly 1 0 0 5 0 5 5 0\n", 3, 20),
        ("unit nm\ndie 0 0 10 10\nrect 1 0 0 20 5\n", 3, 1),
        ("unit nm\ndie 0 0 10 10\n  circle 1 0 0 5\n", 3, 3),
        ("unit nm\nrect 1 0 0 5 5\n", 2, 1),
        ("unit nm\n", 1, 1),
    ])
    def test_reported_position(self, text, line, column):
        with pytest.raises(LayoutTextError) as info:
            parse_layout_text(text)
        assert (info.value.line, info.value.column) == (line, column)
        assert f"line {line}" in str(info.value)

    def test_unit_mismatch_message(self):
        with pytest.raises(LayoutTextError, match="unit mismatch"):
            parse_layout_text("unit um\n")

    def test_invalid_polygon(self):
        with pytest.raises(LayoutTextError, match="line 3"):
            parse_layout_text("unit nm\ndie 0 0 100 100\npoly 1 0 0 10 5 10 10 0 10\n")
