import itertools

import numpy as np
import pytest
from scipy import optimize

from src.models.data_models import (
    DensityGrid,
    FilmKind,
    FilmStack,
    FillGeometry,
    FillPlan,
    FillRules,
    Polarity,
    StepSpec,
    WindowSpec,
)
from src.models.errors import ConfigError, ContractViolation
from src.models.layout_db import LayoutDB, Polygon, Rect
from src.services.density_map import EffectiveDensityOperator, build_kernel
from src.services.film_profile import DensityScanner
from src.services.fixtures import mixed_density_chip, single_square
from src.services.dummy_fill import (
    CapMap,
    DummyFillError,
    FillPlanner,
    conventional_fill,
    fill_objective,
    fill_report,
    measure_fill_density,
    post_fill_effective,
    projected_gradient_fill,
    realize_geometry,
    tune_conventional_to_area,
    tune_conventional_to_spread,
)

# size == pitch: one site per pitch box, max density 1
DENSE_RULES = FillRules(min_spacing=0, dummy_size=1000, dummy_pitch=1000)
FLAT3 = np.full((3, 3), 1.0 / 9.0)


def grid(values, cell=10_000):
    return DensityGrid(0, 0, cell, np.asarray(values, dtype=np.float64))


def single_square_caps(**kwargs):
    db = single_square()
    planner = FillPlanner(FillRules(), **kwargs)
    return db, planner, planner.fillable_caps(db, grid(np.zeros((25, 25)), cell=4000))


def box_distance(a, b):
    dx = max(b[0] - a[2], a[0] - b[2], 0)
    dy = max(b[1] - a[3], a[1] - b[3], 0)
    return float(np.hypot(dx, dy))


def structured_instance():
    """Dense 4x4 block (no room for dummies) in a sparse field."""
    rules = FillRules(min_spacing=0, dummy_size=1000, dummy_pitch=2000)
    raw = np.full((8, 8), 0.1)
    raw[2:6, 2:6] = 0.8
    open_sites = np.ones((40, 40), dtype=bool)
    open_sites[10:30, 10:30] = False
    return grid(raw), CapMap(0, 0, 10_000, rules, open_sites)


class TestCaps:
    def test_single_square_caps(self):
        _, _, caps = single_square_caps()
        assert caps.shape == (25, 25)
        values = caps.values
        assert values[11:14, 11:14].max() == 0.0
        assert values[0, 0] == 0.25
        assert values[10, 10] == pytest.approx(0.1875)
        assert values[12, 10] == pytest.approx(0.125)
        assert values[12, 14] == pytest.approx(0.125)

    def test_blocked_sites_match_box_distance(self):
        db, _, caps = single_square_caps()
        feature = db.layers[1][0].bbox.as_tuple()
        rules = caps.rules
        for row, col in itertools.product(range(caps.open_sites.shape[0]), repeat=2):
            x0 = col * rules.dummy_pitch + rules.site_margin
            y0 = row * rules.dummy_pitch + rules.site_margin
            site = (x0, y0, x0 + rules.dummy_size, y0 + rules.dummy_size)
            assert caps.open_sites[row, col] == (box_distance(site, feature) >= rules.min_spacing)

    def test_tiling_does_not_change_caps(self):
        _, _, whole = single_square_caps()
        _, _, tiled = single_square_caps(threads=3, tile_pixels=8)
        np.testing.assert_array_equal(whole.open_sites, tiled.open_sites)

    def test_sites_stay_inside_die(self):
        db = LayoutDB(Rect(0, 0, 9000, 9000))
        caps = FillPlanner(FillRules()).fillable_caps(db, grid(np.zeros((3, 3)), cell=4000))
        # sites at x = 8500 would end at 9500
        assert caps.open_sites[:, 3].sum() == 4
        assert not caps.open_sites[:, 4:].any()
        assert not caps.open_sites[4:, :].any()

    def test_exclusion_and_fill_layers(self):
        db = LayoutDB(Rect(0, 0, 8000, 8000), {
            2: [Polygon.rect(0, 0, 1000, 1000, 2)],
            100: [Polygon.rect(4000, 4000, 5000, 5000, 100)],
        })
        g = grid(np.zeros((2, 2)), cell=4000)
        planner = FillPlanner(FillRules(min_spacing=1000))
        assert planner.fillable_caps(db, g, layers=[]).open_sites.all()
        assert planner.fillable_caps(db, g).open_sites[2, 2]
        excluded = FillPlanner(FillRules(min_spacing=1000, exclusion_layers=(2,)))
        assert not excluded.fillable_caps(db, g, layers=[]).open_sites[0, 0]

    def test_rule_errors(self):
        db = single_square()
        planner = FillPlanner(FillRules())
        with pytest.raises(ConfigError):
            planner.fillable_caps(db, grid(np.zeros((100, 100)), cell=1000))
        with pytest.raises(ConfigError):
            planner.fillable_caps(db, grid(np.zeros((20, 20)), cell=5000))
        with pytest.raises(ContractViolation):
            planner.fillable_caps(db, grid(np.zeros((2, 2)), cell=4000))
        with pytest.raises(ConfigError):
            FillPlanner(FillRules(), pixel_size=300)
        with pytest.raises(ConfigError):
            FillRules(dummy_size=3000, dummy_pitch=2000).validate()


class TestConventional:
    def test_clipped_to_caps(self):
        _, _, caps = single_square_caps()
        plan = conventional_fill(caps, 0.15)
        assert plan.values[0, 0] == 0.15
        assert plan.values[12, 10] == 0.125
        assert plan.values[12, 12] == 0.0

    def test_out_of_range(self):
        _, _, caps = single_square_caps()
        with pytest.raises(ConfigError):
            conventional_fill(caps, 0.3)

    def test_tune_to_area(self):
        _, _, caps = single_square_caps()
        area = conventional_fill(caps, 0.1).added_area
        assert tune_conventional_to_area(caps, area) == pytest.approx(0.1, abs=1e-9)
        assert tune_conventional_to_area(caps, 1e30) == 0.25

    def test_tune_to_spread(self):
        raw, caps = structured_instance()
        op = EffectiveDensityOperator(raw.values.shape, FLAT3)
        none = post_fill_effective(raw, conventional_fill(caps, 0.0), op).values
        d, reached = tune_conventional_to_spread(raw, caps, op, float(none.max() - none.min()))
        assert reached and d == 0.0
        d, reached = tune_conventional_to_spread(raw, caps, op, -1.0)
        assert not reached
        assert d > 0.0


class TestSmartFill:
    def test_toy_matches_exhaustive_search(self):
        open_sites = np.zeros((10, 30), dtype=bool)
        open_sites[:6, 10:20] = True
        caps = CapMap(0, 0, 10_000, DENSE_RULES, open_sites)
        np.testing.assert_allclose(caps.values, [[0.0, 0.6, 0.0]])
        raw = grid([[0.6, 0.2, 0.6]])
        kernel = np.full((1, 3), 1.0 / 3.0)
        op = EffectiveDensityOperator((1, 3), kernel, method='direct')
        base = op.linear(raw.values)
        planner = FillPlanner(DENSE_RULES)
        for target, penalty in ((None, None), (0.6, 1e-3)):
            result = planner.smart_fill(raw, caps, kernel=kernel, target=target, penalty=penalty,
                                        method='direct')
            assert result.converged
            xs = np.arange(0.0, 0.6 + 1e-9, 1e-3)
            scores = [fill_objective(np.array([[0.0, x, 0.0]]), base, op, result.target, result.penalty)
                      for x in xs]
            best = int(np.argmin(scores))
            assert result.objective <= scores[best] + 1e-4
            assert result.plan.values[0, 0] == 0.0
            assert result.plan.values[0, 2] == 0.0
            assert result.plan.values[0, 1] == pytest.approx(xs[best], abs=2e-3)

    def test_default_target_is_prefill_maximum(self):
        raw, caps = structured_instance()
        result = FillPlanner(caps.rules).smart_fill(raw, caps, kernel=FLAT3)
        op = EffectiveDensityOperator(raw.values.shape, FLAT3)
        assert result.target == pytest.approx(op.apply(raw.values).max())
        assert result.penalty == pytest.approx(1e-3 / 9.0)

    @pytest.mark.parametrize('kernel', [FLAT3, build_kernel(WindowSpec(diameter=50_000), 10_000)],
                             ids=['flat3', 'gauss5'])
    def test_random_instances_against_bounded_optimizer(self, rng, kernel):
        planner = FillPlanner(DENSE_RULES)
        for _ in range(3):
            caps = CapMap(0, 0, 10_000, DENSE_RULES, rng.random((80, 80)) < rng.uniform(0.2, 0.8))
            raw = grid(rng.uniform(0.05, 0.7, size=(8, 8)))
            result = planner.smart_fill(raw, caps, kernel=kernel, method='direct')
            op = EffectiveDensityOperator((8, 8), kernel, method='direct')
            base = op.linear(raw.values)
            target, penalty = result.target, result.penalty

            def objective(x):
                return fill_objective(x.reshape(8, 8), base, op, target, penalty)

            def gradient(x):
                r = np.maximum(target - base - op.linear(x.reshape(8, 8)), 0.0)
                return (-2.0 * op.adjoint(r) + penalty).ravel()

            oracle = optimize.minimize(objective, np.zeros(64), jac=gradient, method='L-BFGS-B',
                                       bounds=[(0.0, float(u)) for u in caps.values.ravel()],
                                       options={'maxiter': 10_000, 'ftol': 1e-15, 'gtol': 1e-12})
            assert result.objective <= oracle.fun + 1e-4
            assert result.objective <= objective(np.zeros(64)) + 1e-12
            assert np.all(result.plan.values >= 0.0)
            assert np.all(result.plan.values <= caps.values + 1e-12)
            for d_fixed in np.linspace(0.0, 1.0, 21):
                conventional = conventional_fill(caps, float(d_fixed)).values
                assert result.objective <= objective(conventional.ravel()) + 1e-6

    def test_spread_never_worse_than_no_fill(self):
        raw, caps = structured_instance()
        result = FillPlanner(caps.rules).smart_fill(raw, caps, kernel=FLAT3)
        op = EffectiveDensityOperator(raw.values.shape, FLAT3)
        before = op.apply(raw.values)
        assert result.spread <= float(before.max() - before.min())
        assert result.plan.values[2:6, 2:6].max() == 0.0
        assert result.added_area == pytest.approx(result.plan.values.sum() * 1e8)

    def test_grid_mismatch(self):
        raw, caps = structured_instance()
        with pytest.raises(ContractViolation):
            FillPlanner(caps.rules).smart_fill(grid(np.zeros((4, 4))), caps, kernel=FLAT3)

    def test_negative_penalty(self):
        raw, caps = structured_instance()
        with pytest.raises(ConfigError):
            FillPlanner(caps.rules).smart_fill(raw, caps, kernel=FLAT3, penalty=-1.0)

    def test_iteration_cap_reported(self):
        raw, caps = structured_instance()
        result = FillPlanner(caps.rules).smart_fill(raw, caps, kernel=FLAT3, max_iter=2, tol=0.0)
        assert not result.converged
        assert result.iterations == 2
        assert "did not converge" in result.warnings[0]

    def test_stalled_descent_is_not_converged(self):
        class SignFlippedOperator:
            # adjoint disagrees with linear, so the plain step climbs
            def linear(self, d):
                return -d

            def adjoint(self, r):
                return r

            def column_sums(self):
                return np.ones((2, 2))

        d, iterations, converged, objective = projected_gradient_fill(
            np.zeros((2, 2)), np.ones((2, 2)), SignFlippedOperator(), target=1.0, penalty=0.0
        )
        assert not converged
        assert iterations == 1
        assert objective == 4.0
        assert not d.any()


class TestGeometry:
    def test_realized_density_within_half_a_site(self, rng):
        _, _, caps = single_square_caps()
        plan = FillPlan(0, 0, 4000, rng.random(caps.shape) * caps.values)
        fill = realize_geometry(plan, caps)
        measured = measure_fill_density(fill, plan)
        quantum = caps.rules.max_density / caps.sites_per_side ** 2
        assert quantum == 0.0625
        assert np.abs(measured.values - plan.values).max() <= quantum / 2 + 1e-12

    def test_full_fill_keeps_spacing(self):
        db, planner, caps = single_square_caps()
        fill = realize_geometry(conventional_fill(caps, 0.25), caps)
        assert fill.count == int(caps.open_sites.sum())
        report = planner.verify_spacing(db, fill)
        assert report.ok
        assert report.min_distance_nm == 3500.0
        assert report.to_dict()['verify_checked'] == fill.count

    def test_row_major_from_cell_corner(self):
        caps = CapMap(0, 0, 4000, FillRules(min_spacing=0), np.ones((2, 2), dtype=bool))
        fill = realize_geometry(FillPlan(0, 0, 4000, np.array([[0.125]])), caps)
        np.testing.assert_array_equal(fill.squares, [[500, 500, 1500, 1500], [2500, 500, 3500, 1500]])

    def test_plan_above_caps(self):
        _, _, caps = single_square_caps()
        plan = FillPlan(0, 0, 4000, np.full(caps.shape, 0.25))
        with pytest.raises(DummyFillError):
            realize_geometry(plan, caps)

    def test_verification_flags_violations(self):
        db, planner, _ = single_square_caps()
        bad = FillGeometry(np.array([
            [43_500, 43_500, 44_500, 44_500],   # 500 nm from the block
            [10_500, 10_500, 11_500, 11_500],
            [11_000, 10_500, 12_000, 11_500],   # overlaps the previous one
            [99_500, 0, 100_500, 1000],         # leaves the die
        ]), 100)
        report = planner.verify_spacing(db, bad)
        assert not report.ok
        assert list(report.spacing_violations) == [0]
        assert list(report.overlapping) == [1, 2]
        assert list(report.outside_die) == [3]

    def test_empty_fill_verifies(self):
        db, planner, _ = single_square_caps()
        report = planner.verify_spacing(db, FillGeometry.empty(100))
        assert report.ok
        assert report.min_distance_nm == float('inf')

    def test_measure_splits_straddling_square(self):
        fill = FillGeometry(np.array([[3500, 0, 4500, 1000]]), 100)
        measured = measure_fill_density(fill, grid(np.zeros((1, 2)), cell=4000))
        np.testing.assert_allclose(measured.values, [[500_000 / 16e6, 500_000 / 16e6]])


class TestReport:
    def test_variants_share_a_range(self):
        raw, caps = structured_instance()
        smart = FillPlanner(caps.rules).smart_fill(raw, caps, kernel=FLAT3)
        report = fill_report(raw, {'conventional': conventional_fill(caps, 0.25), 'smart': smart.plan},
                             kernel=FLAT3, bins=10)
        assert list(report.variants) == ['none', 'conventional', 'smart']
        assert report.variants['none'].added_area == 0.0
        lo, hi = report.value_range
        for summary in report.variants.values():
            np.testing.assert_allclose(summary.histogram.edges[[0, -1]], [lo, hi])
            assert summary.histogram.total == 64
        rows = {row['variant']: row for row in report.rows()}
        assert rows['none']['mean_increase'] == 0.0
        assert rows['conventional']['mean_increase'] > 0.0
        assert report.spread('smart') <= report.spread('none')

    def test_plan_on_other_grid(self):
        raw, _ = structured_instance()
        with pytest.raises(ContractViolation):
            fill_report(raw, {'x': FillPlan(0, 0, 5000, np.zeros((8, 8)))}, kernel=FLAT3)


@pytest.mark.slow
def test_smart_fill_beats_conventional_on_sti_chip():
    db = mixed_density_chip(seed=1)
    step = StepSpec(400.0, Polarity.TRENCH_STI)
    film = FilmStack(FilmKind.CONFORMAL, t_conf=600.0)
    raw = DensityScanner(film, step, pixel_size=500, cell_size=40_000).scan(db, [1])
    planner = FillPlanner(FillRules(min_spacing=3000))
    caps = planner.fillable_caps(db, raw)
    kernel = build_kernel(WindowSpec(), raw.cell_size)
    op = EffectiveDensityOperator(raw.values.shape, kernel)
    smart = planner.smart_fill(raw, caps, kernel=kernel)
    full = post_fill_effective(raw, conventional_fill(caps, caps.rules.max_density), op).values
    assert smart.spread <= float(full.max() - full.min())
    d_fixed, reached = tune_conventional_to_spread(raw, caps, op, smart.spread)
    if reached:
        assert smart.added_area < conventional_fill(caps, d_fixed).added_area
    fill = realize_geometry(smart.plan, caps)
    assert planner.verify_spacing(db, fill).ok
