import numpy as np
import pytest

from src.models.data_models import CmpParams, DensityGrid, GridKind, GridMap, ThicknessMap
from src.models.errors import ConfigError
from src.services.cmp_model import CmpModel, CmpModelError, recommend_polish_target, thickness_range

PARAMS = CmpParams(z0=1000.0, z1=500.0, rate=100.0, time=2.0)


def density(values, cell=100):
    return DensityGrid(0, 0, cell, np.asarray(values, dtype=np.float64))


class TestThickness:
    def test_both_regimes(self):
        values = CmpModel(PARAMS).thickness_values(np.array([1.0, 0.5, 0.2]))
        np.testing.assert_allclose(values, [800.0, 600.0, 400.0])

    def test_full_density_is_blanket_removal(self):
        result = CmpModel(PARAMS).post_cmp_thickness(density(np.ones((3, 3))))
        np.testing.assert_allclose(result.thickness.values, PARAMS.z0 - PARAMS.rate * PARAMS.time)
        assert result.thickness.kind == GridKind.THICKNESS
        assert result.floored_cells == 0
        assert result.warnings == []

    def test_continuous_at_planarization(self):
        model = CmpModel(PARAMS)
        rho_p = PARAMS.rate * PARAMS.time / PARAMS.z1
        below, above = model.thickness_values(np.array([rho_p - 1e-9, rho_p + 1e-9]))
        assert below == pytest.approx(PARAMS.z0 - PARAMS.z1, abs=1e-3)
        assert above == pytest.approx(PARAMS.z0 - PARAMS.z1, abs=1e-3)

    def test_monotone_in_density(self):
        values = CmpModel(PARAMS).thickness_values(np.linspace(0.01, 1.0, 200))
        assert np.all(np.diff(values) > 0)

    def test_density_floor(self):
        result = CmpModel(PARAMS).post_cmp_thickness(density([[0.0, 0.5]]))
        assert result.floored_cells == 1
        assert result.thickness.values[0, 0] == pytest.approx(305.0)
        assert "density floor" in result.warnings[0]

    def test_polish_through_clamped(self):
        params = CmpParams(z0=1000.0, z1=500.0, rate=100.0, time=12.0)
        result = CmpModel(params).post_cmp_thickness(density([[0.1, 1.0]]))
        assert result.polish_through
        assert result.thickness.values.min() == 0.0
        assert any("clamped" in w for w in result.warnings)

    def test_rejects_density_above_one(self):
        with pytest.raises(CmpModelError):
            CmpModel(PARAMS).post_cmp_thickness(GridMap(0, 0, 100, np.array([[1.5]])))

    def test_invalid_parameters(self):
        with pytest.raises(ConfigError):
            CmpModel(CmpParams(z0=400.0, z1=500.0, rate=100.0, time=1.0))
        with pytest.raises(ConfigError):
            CmpModel(CmpParams(z0=1000.0, z1=500.0, rate=0.0, time=1.0))
        with pytest.raises(CmpModelError):
            CmpModel(PARAMS, density_floor=0.0)

    def test_planarization_time(self):
        tp = CmpModel(PARAMS).planarization_time(density([[0.5, 0.0]]))
        np.testing.assert_allclose(tp.values, [[2.5, 0.05]])
        assert tp.kind == GridKind.TIME


class TestPolishTarget:
    def setup_method(self):
        self.tm = ThicknessMap(0, 0, 100, np.array([[400.0, 600.0, 800.0]]))

    def test_recommendation(self):
        report = recommend_polish_target(self.tm, (50, 50), spec_target=700.0)
        assert report.median == 600.0
        assert report.offset == -200.0
        assert report.recommended_target == 500.0
        assert report.thickness_range == 400.0
        assert report.thinnest_location == (50.0, 50.0)
        assert report.thickest_location == (250.0, 50.0)
        assert "Recommended metrology target: 500.00 nm" in report.to_text()

    def test_key_value_sorted(self):
        text = recommend_polish_target(self.tm, (150, 0), spec_target=600.0).to_key_value()
        keys = [line.split('=', 1)[0] for line in text.splitlines()]
        assert keys == sorted(keys)
        assert "offset_nm=0.0" in text

    def test_point_outside_die(self):
        with pytest.raises(CmpModelError):
            recommend_polish_target(self.tm, (500, 50), spec_target=600.0)

    def test_thickness_range(self):
        spread, thin, thick = thickness_range(self.tm)
        assert spread == 400.0
        assert thin == (50.0, 50.0)
        assert thick == (250.0, 50.0)
