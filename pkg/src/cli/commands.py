"""Command pipelines: layout -> film model -> density map -> CMP model -> fill -> artifacts."""

import json
import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.cli.config import RunConfig
from src.models.data_models import (
    Axis,
    DensityGrid,
    FillMode,
    FillPlan,
    FilmKind,
    GridKind,
    GridMap,
    RunSummary,
)
from src.models.errors import ConfigError
from src.models.layout_db import LayoutDB, Rect
from src.services.cmp_model import CmpModel, recommend_polish_target
from src.services.density_map import (
    EffectiveDensityOperator,
    build_kernel,
    effective_density,
    grid_stats,
    histogram,
    line_profile,
)
from src.services.dummy_fill import (
    FillPlanner,
    FillVerificationError,
    conventional_fill,
    fill_report,
    realize_geometry,
    tune_conventional_to_area,
    tune_conventional_to_spread,
)
from src.services.film_profile import DensityScanner, compare_films, sweep_pitch
from src.services.fixtures import generate_fixture
from src.services.layout_io import LayoutIO
from src.services.map_export import (
    grid_to_csv,
    heatmap_svg,
    histogram_to_csv,
    histograms_to_csv,
    profile_to_csv,
    read_grid,
    save_artifact,
    table_to_csv,
)

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[float, str], None]

STATS_FIELDS = ['grid', 'min', 'max', 'mean', 'std', 'median', 'spread',
                'min_x_nm', 'min_y_nm', 'max_x_nm', 'max_y_nm']
REPORT_FIELDS = ['variant', 'min', 'max', 'spread', 'mean', 'std', 'added_area_nm2', 'mean_increase']


class CommandRunner:
    """Runs one command for a configuration and writes its artifacts to out_dir."""

    def __init__(self, config: RunConfig, progress: Optional[ProgressCallback] = None):
        config.validate()
        self.config = config
        self._progress = progress
        self._layout_io = LayoutIO(config.top_cell, config.snap_tolerance)
        self.artifacts: List[str] = []

    # ============================================================
    # Plumbing
    # ============================================================

    def _report(self, fraction: float, message: str) -> None:
        if self._progress:
            self._progress(min(max(fraction, 0.0), 1.0), message)

    def _stage(self, lo: float, hi: float, message: str) -> Callable[[float], None]:
        """Callback mapping a service's 0..1 progress into [lo, hi] of the run."""
        def callback(p: float) -> None:
            self._report(lo + p * (hi - lo), message)
        return callback

    def _save(self, name: str, data) -> str:
        path = save_artifact(self.config.out_dir, name, data)
        self.artifacts.append(path)
        return path

    def _save_grid(self, name: str, grid: GridMap, title: str, unit: str = "") -> None:
        self._save(f"{name}.csv", grid_to_csv(grid))
        if self.config.heatmaps:
            self._save(f"{name}.svg", heatmap_svg(grid, title, unit=unit))

    def _finish(self, summary: RunSummary) -> RunSummary:
        self._save("summary.txt", summary.to_key_value())
        self._report(1.0, "done")
        return summary

    def load_layout(self) -> LayoutDB:
        path = self.config.require_input()
        self._report(0.02, "loading layout")
        db = self._layout_io.load_file(path, self.config.format)
        logger.info("Layout %s: %d polygons on layers %s", path, db.polygon_count, db.layer_ids)
        return db

    def scan(self, db: LayoutDB, kind: Optional[FilmKind] = None, lo: float = 0.05,
             hi: float = 0.6, extra_boxes: Optional[np.ndarray] = None) -> DensityGrid:
        cfg = self.config
        film = cfg.film_stack(kind)
        scanner = DensityScanner(film, cfg.step_spec(), cfg.pixel_size, cfg.cell_size,
                                 cfg.threads, cfg.tile_pixels)
        scanner.set_progress_callback(self._stage(lo, hi, f"scanning {film.kind.value} density"))
        return scanner.scan(db, cfg.layers, extra_boxes)

    def _kernel(self, cell_size: int) -> np.ndarray:
        return build_kernel(self.config.window_spec(), cell_size)

    def effective(self, raw: GridMap) -> DensityGrid:
        return effective_density(raw, kernel=self._kernel(raw.cell_size),
                                 method=self.config.convolution, threads=self.config.threads)

    # ============================================================
    # density
    # ============================================================

    def density(self) -> RunSummary:
        """Raw and effective density grids, heatmaps, histogram and statistics."""
        cfg = self.config
        db = self.load_layout()
        raw = self.scan(db)
        self._report(0.65, "computing effective density")
        eff = self.effective(raw)

        self._save_grid("raw_density", raw, "Raw pattern density")
        self._save_grid("effective_density", eff, "Effective pattern density")
        self._save("effective_histogram.csv",
                   histogram_to_csv(histogram(eff, cfg.histogram_bins), "effective"))
        raw_stats, eff_stats = grid_stats(raw), grid_stats(eff)
        self._save("density_stats.json", json.dumps(
            {'raw': raw_stats.to_dict(), 'effective': eff_stats.to_dict()}, indent=2, sort_keys=True
        ) + "\n")

        summary = RunSummary('density')
        summary.values.update({
            'film': cfg.film, 'cells': f"{raw.nx}x{raw.ny}", 'cell_size_nm': raw.cell_size,
            'raw_mean': raw_stats.mean, 'effective_min': eff_stats.minimum,
            'effective_max': eff_stats.maximum, 'effective_spread': eff_stats.spread,
            'effective_min_location': eff_stats.min_location,
            'effective_max_location': eff_stats.max_location,
        })
        if cfg.compare_films:
            self._report(0.7, "comparing film models")
            summary.values.update(self._film_comparison(db, summary))
        return self._finish(summary)

    def _film_comparison(self, db: LayoutDB, summary: RunSummary) -> Dict[str, object]:
        cfg = self.config
        kinds = [FilmKind.LAYOUT, FilmKind.HDP]
        if cfg.t_conf > 0:
            kinds.append(FilmKind.CONFORMAL)
        else:
            msg = "conformal film skipped in the comparison: t_conf is 0"
            logger.warning(msg)
            summary.warnings.append(msg)
        films = [cfg.film_stack(kind) for kind in kinds]
        grids = compare_films(db, cfg.layers, films, cfg.step_spec(), cfg.pixel_size,
                              cfg.cell_size, cfg.threads)
        effective = {name: self.effective(grid) for name, grid in grids.items()}
        lo = min(float(g.values.min()) for g in effective.values())
        hi = max(float(g.values.max()) for g in effective.values())
        rows, hists, values = [], {}, {}
        for name in grids:
            for label, grid in (('raw', grids[name]), ('effective', effective[name])):
                stats = grid_stats(grid).to_dict()
                rows.append({'grid': f"{name}.{label}", **{k: stats[k] for k in STATS_FIELDS[1:]}})
                values[f"compare.{name}.{label}_mean"] = stats['mean']
                values[f"compare.{name}.{label}_spread"] = stats['spread']
            hists[name] = histogram(effective[name], cfg.histogram_bins, (lo, hi))
        self._save("film_comparison.csv", table_to_csv(STATS_FIELDS, rows))
        self._save("film_histograms.csv", histograms_to_csv(hists))
        return values

    # ============================================================
    # thickness
    # ============================================================

    def _effective_for_thickness(self) -> Tuple[DensityGrid, Optional[Rect]]:
        cfg = self.config
        if cfg.effective_grid:
            try:
                with open(cfg.effective_grid, 'r', encoding='utf-8') as fh:
                    grid = read_grid(fh.read())
            except OSError as e:
                raise ConfigError(f"cannot read effective grid {cfg.effective_grid}: {e}") from e
            if grid.kind != GridKind.EFFECTIVE:
                raise ConfigError(f"{cfg.effective_grid} holds a {grid.kind.value} grid, not effective density")
            return grid, None
        db = self.load_layout()
        raw = self.scan(db)
        self._report(0.65, "computing effective density")
        return self.effective(raw), db.die_bbox

    def thickness(self) -> RunSummary:
        """Post-CMP thickness map, histogram, line profiles and polish-target report."""
        cfg = self.config
        params = cfg.cmp_params()
        eff, die = self._effective_for_thickness()
        self._report(0.8, "modeling CMP")
        model = CmpModel(params, cfg.density_floor)
        result = model.post_cmp_thickness(eff)
        tm = result.thickness
        times = model.planarization_time(eff)

        ext = die if die is not None else tm.extent
        cx, cy = (ext.x0 + ext.x1) / 2.0, (ext.y0 + ext.y1) / 2.0
        profile_x = line_profile(tm, Axis.X, cfg.profile_x if cfg.profile_x is not None else cy, die)
        profile_y = line_profile(tm, Axis.Y, cfg.profile_y if cfg.profile_y is not None else cx, die)
        point = (cfg.metrology_x if cfg.metrology_x is not None else cx,
                 cfg.metrology_y if cfg.metrology_y is not None else cy)
        target = cfg.spec_target if cfg.spec_target is not None else grid_stats(tm).median
        report = recommend_polish_target(tm, point, target)

        self._save_grid("thickness", tm, "Post-CMP thickness", unit="nm")
        self._save_grid("planarization_time", times, "Planarization time", unit="min")
        self._save("thickness_histogram.csv",
                   histogram_to_csv(histogram(tm, cfg.histogram_bins), "thickness"))
        self._save("profile_x.csv", profile_to_csv(profile_x))
        self._save("profile_y.csv", profile_to_csv(profile_y))
        self._save("polish_target.txt", report.to_text())

        die_time = float(times.values.max())
        summary = RunSummary('thickness', warnings=list(result.warnings))
        summary.values.update(report.to_dict())
        summary.values.update({
            'floored_cells': result.floored_cells,
            'polish_through': result.polish_through,
            'die_planarization_time_min': die_time,
            'planarized': params.time >= die_time,
        })
        return self._finish(summary)

    # ============================================================
    # fill
    # ============================================================

    def fill(self) -> RunSummary:
        """Fill plans, verified dummy geometry and the variant comparison report."""
        cfg = self.config
        mode = cfg.fill_mode_enum()
        rules = cfg.fill_rules()
        db = self.load_layout()
        raw = self.scan(db, lo=0.05, hi=0.35)
        kernel = self._kernel(raw.cell_size)
        op = EffectiveDensityOperator(raw.values.shape, kernel, cfg.convolution, cfg.threads)

        planner = FillPlanner(rules, cfg.fill_pixel, cfg.threads, cfg.tile_pixels)
        planner.set_progress_callback(self._stage(0.35, 0.5, "computing fillable capacity"))
        caps = planner.fillable_caps(db, raw, cfg.layers)
        self._save_grid("fill_caps", caps.as_grid(), "Fillable dummy density")

        summary = RunSummary('fill')
        summary.values.update({'fill_mode': mode.value, 'max_density': rules.max_density,
                               'open_sites': int(caps.open_sites.sum())})
        plans: Dict[str, FillPlan] = {}
        emitted: Dict[str, FillPlan] = {}

        smart = None
        if mode in (FillMode.SMART, FillMode.ALL):
            planner.set_progress_callback(self._stage(0.5, 0.75, "optimizing smart fill"))
            smart = planner.smart_fill(raw, caps, penalty=cfg.fill_penalty, kernel=kernel,
                                       max_iter=cfg.fill_max_iter, tol=cfg.fill_tol,
                                       method=cfg.convolution)
            summary.warnings.extend(smart.warnings)
            summary.values.update({'smart_iterations': smart.iterations,
                                   'smart_converged': smart.converged,
                                   'smart_objective': smart.objective,
                                   'smart_target': smart.target,
                                   'smart_penalty': smart.penalty})
            if not smart.converged and cfg.fill_strict:
                raise FillVerificationError("smart fill did not converge and fill_strict is set")
            plans['smart'] = emitted['smart'] = smart.plan

        if mode in (FillMode.CONVENTIONAL, FillMode.ALL):
            d_fixed = cfg.fill_density
            if d_fixed is None:
                d_fixed = (tune_conventional_to_area(caps, smart.added_area) if smart is not None
                           else rules.max_density)
            summary.values['conventional_density'] = d_fixed
            plans['conventional'] = emitted['conventional'] = conventional_fill(caps, d_fixed)

        if mode == FillMode.ALL:
            self._report(0.78, "tuning conventional baselines")
            d_area = tune_conventional_to_area(caps, smart.added_area)
            plans['conventional-equal-area'] = conventional_fill(caps, d_area)
            d_spread, reached = tune_conventional_to_spread(raw, caps, op, smart.spread)
            plans['conventional-equal-spread'] = conventional_fill(caps, d_spread)
            summary.values.update({'equal_area_density': d_area, 'equal_spread_density': d_spread,
                                   'equal_spread_reached': reached})
            if not reached:
                msg = f"no fixed density reaches the smart spread {smart.spread:.6g}"
                logger.warning(msg)
                summary.warnings.append(msg)

        report = fill_report(raw, plans, kernel=kernel, bins=cfg.histogram_bins,
                             method=cfg.convolution, threads=cfg.threads)
        self._save("fill_report.csv", table_to_csv(REPORT_FIELDS, report.rows()))
        self._save("fill_histograms.csv", histograms_to_csv(report.histograms()))
        for name, variant in report.variants.items():
            summary.values[f"{name}.spread"] = variant.stats.spread
            summary.values[f"{name}.mean"] = variant.stats.mean
            summary.values[f"{name}.added_area_nm2"] = variant.added_area
            if cfg.heatmaps:
                self._save(f"effective_{name}.svg",
                           heatmap_svg(variant.effective, f"Effective density, {name} fill"))

        # Geometry is verified before anything is written.
        realized = {}
        for i, (name, plan) in enumerate(emitted.items()):
            self._report(0.8 + 0.15 * i / len(emitted), f"realizing {name} fill")
            geometry = realize_geometry(plan, caps)
            check = planner.verify_spacing(db, geometry, cfg.layers)
            for key, value in check.to_dict().items():
                summary.values[f"{name}.{key}"] = value
            if not check.ok:
                raise FillVerificationError(
                    f"{name} fill failed verification: {len(check.spacing_violations)} too close, "
                    f"{len(check.overlapping)} overlapping, {len(check.outside_die)} outside the die",
                    check,
                )
            realized[name] = geometry
            summary.values[f"{name}.squares"] = geometry.count
            if cfg.fill_rescan:
                rescanned = self.effective(self.scan(db, lo=0.95, hi=0.95, extra_boxes=geometry.squares))
                stats = grid_stats(rescanned)
                summary.values[f"{name}.rescan_spread"] = stats.spread
                summary.values[f"{name}.rescan_mean"] = stats.mean

        ext = 'gds' if cfg.fill_format == 'gds' else 'txt'
        for name, plan in emitted.items():
            self._save_grid(f"fill_plan_{name}", plan, f"Dummy density, {name} fill")
            data = self._layout_io.write_fill(db, realized[name], fmt=cfg.fill_format)
            self._save(f"fill_{name}.{ext}", data)
        return self._finish(summary)

    # ============================================================
    # convert / gen-fixture / sweep
    # ============================================================

    def convert(self, output: str, output_format: Optional[str] = None) -> RunSummary:
        cfg = self.config
        db = self._layout_io.convert(cfg.require_input(), output, cfg.format, output_format)
        self.artifacts.append(output)
        return RunSummary('convert', {'polygons': db.polygon_count, 'output': output})

    def gen_fixture(self, output: Optional[str] = None, output_format: Optional[str] = None) -> RunSummary:
        cfg = self.config
        db = generate_fixture(cfg.fixture, cfg.seed, cfg.layers[0])
        path = output or os.path.join(cfg.out_dir, f"{cfg.fixture}.gds")
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self._layout_io.save(db, path, output_format)
        self.artifacts.append(path)
        return RunSummary('gen-fixture', {'fixture': cfg.fixture, 'seed': cfg.seed,
                                          'polygons': db.polygon_count, 'output': path})

    def sweep(self) -> RunSummary:
        """Density of periodic line arrays versus pitch for every applicable film model."""
        cfg = self.config
        kinds = [FilmKind.HDP]
        summary = RunSummary('sweep')
        if cfg.t_conf > 0:
            kinds += [FilmKind.CONFORMAL, FilmKind.COMPOSITE]
        else:
            msg = "conformal and composite films skipped: t_conf is 0"
            logger.warning(msg)
            summary.warnings.append(msg)
        films = [cfg.film_stack(kind) for kind in kinds]
        rows = sweep_pitch(cfg.sweep_pitches, cfg.sweep_duty, films, cfg.step_spec(), cfg.pixel_size)
        fieldnames = ['pitch_nm', 'layout'] + [kind.value for kind in kinds]
        self._save("pitch_sweep.csv", table_to_csv(fieldnames, rows))
        summary.values.update({'pitches': len(rows), 'duty': cfg.sweep_duty})
        return self._finish(summary)
