import numpy as np
import pytest

from src.models.data_models import FillGeometry
from src.models.layout_db import LayoutDB, Polygon, Rect
from src.services.fixtures import random_layout
from src.services.gds_stream import GdsParseError
from src.services.layout_io import LayoutIO, LayoutIOError


@pytest.fixture
def io():
    return LayoutIO()


class TestFormats:
    @pytest.mark.parametrize('path, fmt', [
        ('chip.gds', 'gds'), ('chip.GDS2', 'gds'), ('chip.txt', 'text'), ('chip.layout', 'text'),
    ])
    def test_detect_from_extension(self, io, path, fmt):
        assert io.detect_format(path) == fmt

    def test_explicit_format_wins(self, io):
        assert io.detect_format('chip.bin', 'gds') == 'gds'

    def test_unknown_format(self, io):
        with pytest.raises(LayoutIOError):
            io.detect_format('chip.oas')
        with pytest.raises(LayoutIOError):
            io.detect_format('chip.gds', 'oasis')


class TestFiles:
    def test_missing_file(self, io, tmp_path):
        with pytest.raises(LayoutIOError, match="not found"):
            io.load_file(str(tmp_path / "absent.gds"))

    def test_bad_utf8_text(self, io):
        with pytest.raises(LayoutIOError):
            io.parse(b'\xff\xfe', 'text')

    def test_gds_errors_propagate(self, io, tmp_path):
        path = tmp_path / "broken.gds"
        path.write_bytes(b'\x00\x06\x00\x02\x02\x58')
        with pytest.raises(GdsParseError):
            io.load_file(str(path))

    def test_convert_text_to_gds_and_back(self, io, tmp_path, write_layout):
        db = random_layout(seed=4)
        src = write_layout(db)
        gds = str(tmp_path / "chip.gds")
        back = str(tmp_path / "back.txt")
        io.convert(src, gds)
        io.convert(gds, back)
        assert io.load_file(back) == db
        with open(src, encoding='utf-8') as a, open(back, encoding='utf-8') as b:
            assert a.read() == b.read()


class TestWriteFill:
    def setup_method(self):
        self.db = LayoutDB(Rect(0, 0, 10_000, 10_000), {1: [Polygon.rect(0, 0, 2000, 2000, 1)]})
        self.fill = FillGeometry(np.array([[5000, 5000, 6000, 6000], [7000, 5000, 8000, 6000]]), 100)

    def test_squares_land_on_fill_layer(self, io):
        merged = io.parse(io.write_fill(self.db, self.fill), 'gds')
        assert merged.layer_ids == [1, 100]
        assert merged.layers[100] == [Polygon.rect(5000, 5000, 6000, 6000, 100),
                                      Polygon.rect(7000, 5000, 8000, 6000, 100)]
        assert merged.layers[1] == self.db.layers[1]

    def test_layer_collision(self, io):
        with pytest.raises(LayoutIOError, match="already holds"):
            io.write_fill(self.db, self.fill, layer=1)
        merged = io.parse(io.write_fill(self.db, self.fill, layer=1, override=True), 'gds')
        assert len(merged.layers[1]) == 3

    def test_squares_outside_die(self, io):
        outside = FillGeometry(np.array([[9500, 0, 10_500, 1000]]), 100)
        with pytest.raises(LayoutIOError, match="beyond the die"):
            io.write_fill(self.db, outside)

    def test_text_output(self, io):
        text = io.write_fill(self.db, FillGeometry.empty(100), fmt='text').decode('utf-8')
        assert "rect 100" not in text
        assert text.startswith("unit nm\ndie 0 0 10000 10000\n")
