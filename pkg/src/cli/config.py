"""Run configuration: a flat YAML mapping with typed keys and command-line overrides."""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import yaml

from src.models.data_models import (
    CmpParams,
    FillMode,
    FillRules,
    FilmKind,
    FilmStack,
    Polarity,
    StepSpec,
    WindowSpec,
)
from src.models.errors import ConfigError

logger = logging.getLogger(__name__)


class ConfigKey(NamedTuple):
    kind: str    # int, float, bool, str, path, int_list; '?' suffix allows null
    owner: str
    help: str


CONFIG_KEYS: Dict[str, ConfigKey] = {
    # layout input
    'input': ConfigKey('path?', 'layout-io', "Layout file (GDSII subset or text)"),
    'format': ConfigKey('str?', 'layout-io', "Input format, 'gds' or 'text'; inferred from the extension"),
    'top_cell': ConfigKey('str?', 'layout-io', "GDS structure to flatten; auto-detected"),
    'snap_tolerance': ConfigKey('float?', 'layout-io', "Snap tolerance (nm) for non-integer GDS units"),
    'layers': ConfigKey('int_list', 'film-profile', "Feature layers scanned for density"),
    'out_dir': ConfigKey('path', 'cli', "Output directory"),
    'threads': ConfigKey('int?', 'cli', "Worker cap for tile scans and FFTs"),
    # film and step
    'film': ConfigKey('str', 'film-profile', "Film model: layout, conformal, hdp or composite"),
    'step_height': ConfigKey('float', 'film-profile', "Metal thickness or trench depth, nm"),
    'polarity': ConfigKey('str', 'film-profile', "raised or trench-sti"),
    't_conf': ConfigKey('float', 'film-profile', "Conformal deposition thickness, nm"),
    'hdp_facet_angle_deg': ConfigKey('float', 'film-profile', "HDP facet angle, degrees"),
    'hdp_dep_etch_ratio': ConfigKey('float?', 'film-profile', "HDP deposition-to-etch ratio (metadata)"),
    'pixel_size': ConfigKey('int', 'film-profile', "Fine raster pixel, nm"),
    'cell_size': ConfigKey('int', 'density-map', "Density grid cell, nm"),
    'tile_pixels': ConfigKey('int', 'film-profile', "Target tile edge, pixels"),
    'compare_films': ConfigKey('bool', 'film-profile', "Also scan layout, HDP and conformal densities"),
    # window
    'window_diameter': ConfigKey('float', 'density-map', "Planarization window diameter, nm"),
    'window_sigma': ConfigKey('float?', 'density-map', "Gaussian sigma, nm; diameter/4 when null"),
    'window_flat': ConfigKey('bool', 'density-map', "Uniform weights over the window disk"),
    'convolution': ConfigKey('str', 'density-map', "'fft' or 'direct'"),
    'histogram_bins': ConfigKey('int', 'density-map', "Histogram bin count"),
    'heatmaps': ConfigKey('bool', 'cli', "Write SVG heatmaps"),
    # CMP
    'z0': ConfigKey('float?', 'cmp-model', "Initial film thickness over features, nm"),
    'z1': ConfigKey('float?', 'cmp-model', "Initial step height, nm; must equal step_height when set"),
    'removal_rate': ConfigKey('float?', 'cmp-model', "Blanket removal rate, nm/min"),
    'polish_time': ConfigKey('float?', 'cmp-model', "Polish time, min"),
    'density_floor': ConfigKey('float', 'cmp-model', "Lower bound on effective density"),
    'profile_x': ConfigKey('float?', 'cmp-model', "y coordinate (nm) of the X line profile; die center when null"),
    'profile_y': ConfigKey('float?', 'cmp-model', "x coordinate (nm) of the Y line profile; die center when null"),
    'metrology_x': ConfigKey('float?', 'cmp-model', "Metrology site x, nm; die center when null"),
    'metrology_y': ConfigKey('float?', 'cmp-model', "Metrology site y, nm; die center when null"),
    'spec_target': ConfigKey('float?', 'cmp-model', "Specified post-CMP thickness, nm; the thickness median when null"),
    'effective_grid': ConfigKey('path?', 'cmp-model', "Previously exported effective-density CSV"),
    # dummy fill
    'fill_mode': ConfigKey('str', 'dummy-fill', "none, conventional, smart or all"),
    'min_spacing': ConfigKey('int', 'dummy-fill', "Dummy-to-feature spacing, nm"),
    'dummy_size': ConfigKey('int', 'dummy-fill', "Dummy square edge, nm"),
    'dummy_pitch': ConfigKey('int', 'dummy-fill', "Dummy site pitch, nm"),
    'exclusion_layers': ConfigKey('int_list', 'dummy-fill', "Layers dummies must keep clear of"),
    'fill_layer': ConfigKey('int', 'dummy-fill', "Layer of the emitted dummies"),
    'fill_density': ConfigKey('float?', 'dummy-fill', "Conventional fixed density; tuned to the smart area when null"),
    'fill_penalty': ConfigKey('float?', 'dummy-fill', "Dummy-area weight of the smart objective"),
    'fill_max_iter': ConfigKey('int', 'dummy-fill', "Smart-fill iteration cap"),
    'fill_tol': ConfigKey('float', 'dummy-fill', "Smart-fill relative objective tolerance"),
    'fill_pixel': ConfigKey('int?', 'dummy-fill', "Spacing raster pixel, nm"),
    'fill_format': ConfigKey('str', 'layout-io', "Fill geometry output format, 'gds' or 'text'"),
    'fill_strict': ConfigKey('bool', 'dummy-fill', "Fail when the smart optimizer does not converge"),
    'fill_rescan': ConfigKey('bool', 'dummy-fill', "Rescan the layout with the realized dummies through the film model"),
    # fixtures and sweeps
    'fixture': ConfigKey('str', 'fixtures', "Fixture layout name"),
    'seed': ConfigKey('int', 'fixtures', "Fixture random seed"),
    'sweep_pitches': ConfigKey('int_list', 'film-profile', "Line-array pitches, nm"),
    'sweep_duty': ConfigKey('float', 'film-profile', "Line width over pitch"),
}

_PATH_KEYS = ('input', 'out_dir', 'effective_grid')


@dataclass(frozen=True)
class RunConfig:
    """Every run parameter; see CONFIG_KEYS for types and meaning."""
    input: Optional[str] = None
    format: Optional[str] = None
    top_cell: Optional[str] = None
    snap_tolerance: Optional[float] = None
    layers: List[int] = field(default_factory=lambda: [1])
    out_dir: str = 'out'
    threads: Optional[int] = None

    film: str = 'hdp'
    step_height: float = 500.0
    polarity: str = 'raised'
    t_conf: float = 0.0
    hdp_facet_angle_deg: float = 45.0
    hdp_dep_etch_ratio: Optional[float] = None
    pixel_size: int = 25
    cell_size: int = 40_000
    tile_pixels: int = 4096
    compare_films: bool = False

    window_diameter: float = 2_500_000.0
    window_sigma: Optional[float] = None
    window_flat: bool = False
    convolution: str = 'fft'
    histogram_bins: int = 20
    heatmaps: bool = True

    z0: Optional[float] = None
    z1: Optional[float] = None
    removal_rate: Optional[float] = None
    polish_time: Optional[float] = None
    density_floor: float = 0.01
    profile_x: Optional[float] = None
    profile_y: Optional[float] = None
    metrology_x: Optional[float] = None
    metrology_y: Optional[float] = None
    spec_target: Optional[float] = None
    effective_grid: Optional[str] = None

    fill_mode: str = 'all'
    min_spacing: int = 3000
    dummy_size: int = 1000
    dummy_pitch: int = 2000
    exclusion_layers: List[int] = field(default_factory=list)
    fill_layer: int = 100
    fill_density: Optional[float] = None
    fill_penalty: Optional[float] = None
    fill_max_iter: int = 20000
    fill_tol: float = 1e-8
    fill_pixel: Optional[int] = None
    fill_format: str = 'gds'
    fill_strict: bool = False
    fill_rescan: bool = True

    fixture: str = 'mixed-density'
    seed: int = 0
    sweep_pitches: List[int] = field(
        default_factory=lambda: [1000, 2000, 4000, 10_000, 20_000, 50_000, 100_000]
    )
    sweep_duty: float = 0.5

    # ============================================================
    # Typed views
    # ============================================================

    def step_spec(self) -> StepSpec:
        spec = StepSpec(self.step_height, _enum(Polarity, self.polarity, 'polarity'))
        spec.validate()
        return spec

    def film_stack(self, kind: Optional[FilmKind] = None) -> FilmStack:
        kind = kind or _enum(FilmKind, self.film, 'film')
        stack = FilmStack(kind, self.t_conf, self.hdp_facet_angle_deg, self.hdp_dep_etch_ratio)
        stack.validate()
        return stack

    def window_spec(self) -> WindowSpec:
        spec = WindowSpec(self.window_diameter, self.window_sigma, self.window_flat)
        spec.validate()
        return spec

    def cmp_params(self) -> CmpParams:
        """CMP parameters; z1 is the step height the densities were scanned with."""
        missing = [k for k in ('z0', 'removal_rate', 'polish_time') if getattr(self, k) is None]
        if missing:
            raise ConfigError(f"thickness needs CMP parameters: missing {', '.join(missing)}")
        if self.z1 is not None and self.z1 != self.step_height:
            raise ConfigError(f"z1 {self.z1} differs from step_height {self.step_height}; "
                              f"the initial step is the scanned step height")
        params = CmpParams(self.z0, self.step_height, self.removal_rate, self.polish_time)
        params.validate()
        return params

    def fill_rules(self) -> FillRules:
        rules = FillRules(self.min_spacing, self.dummy_size, self.dummy_pitch,
                          tuple(self.exclusion_layers), self.fill_layer)
        rules.validate()
        return rules

    def fill_mode_enum(self) -> FillMode:
        return _enum(FillMode, self.fill_mode, 'fill_mode')

    def validate(self) -> None:
        """Re-validate the parameter groups every command uses."""
        if self.pixel_size <= 0 or self.cell_size <= 0 or self.cell_size % self.pixel_size:
            raise ConfigError(f"pixel_size {self.pixel_size} must divide cell_size {self.cell_size}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.convolution not in ('fft', 'direct'):
            raise ConfigError(f"convolution must be 'fft' or 'direct', got {self.convolution!r}")
        if self.fill_format not in ('gds', 'text'):
            raise ConfigError(f"fill_format must be 'gds' or 'text', got {self.fill_format!r}")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        self.step_spec()
        self.film_stack()
        self.window_spec()
        self.fill_rules()
        self.fill_mode_enum()

    def require_input(self) -> str:
        if not self.input:
            raise ConfigError("no input layout given (config key 'input' or --input)")
        if not os.path.isfile(self.input):
            raise ConfigError(f"input layout {self.input!r} does not exist")
        return self.input

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _enum(cls, value: str, key: str):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"{key} must be one of {choices}, got {value!r}") from None


def coerce_value(key: str, value: Any) -> Any:
    """Convert a YAML or command-line value to the key's declared type.

    Raises:
        ConfigError: On an unknown key or a value of the wrong type.
    """
    spec = CONFIG_KEYS.get(key)
    if spec is None:
        raise ConfigError(f"unknown config key {key!r}")
    kind = spec.kind
    if kind.endswith('?'):
        if value is None:
            return None
        kind = kind[:-1]
    try:
        if kind == 'int':
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == 'float':
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if kind == 'bool':
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if kind in ('str', 'path'):
            if isinstance(value, (dict, list)) or value is None:
                raise ValueError(value)
            return str(value)
        if kind == 'int_list':
            items = value if isinstance(value, list) else [value]
            return [_coerce_int(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {spec.kind}, got {value!r}") from None
    raise ConfigError(f"config key {key!r} has unsupported type {spec.kind}")


def _coerce_int(value: Any) -> int:
    if isinstance(value, (bool, dict, list)) or (isinstance(value, float) and not value.is_integer()):
        raise ValueError(value)
    return int(value)


def parse_override(text: str) -> tuple:
    """Split KEY=VALUE; the value is read as a YAML scalar or flow list."""
    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot read override {text!r}: {e}") from e
    return key, value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from a YAML file, --set overrides and dedicated flags (in that order).

    Relative paths inside the file resolve against the file's directory.

    Raises:
        ConfigError: On unreadable files, nested mappings, unknown keys or bad values.
    """
    values: Dict[str, Any] = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as fh:
                loaded = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping of keys to values")
        base = os.path.dirname(os.path.abspath(path))
        for key, value in loaded.items():
            if isinstance(value, dict):
                raise ConfigError(f"config key {key!r}: nested mappings are not allowed")
            value = coerce_value(str(key), value)
            if key in _PATH_KEYS and value is not None and not os.path.isabs(value):
                value = os.path.normpath(os.path.join(base, value))
            values[str(key)] = value
    for text in overrides:
        key, value = parse_override(text)
        values[key] = coerce_value(key, value)
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = coerce_value(key, value)
    config = replace(RunConfig(), **values)
    logger.debug("Run config: %s", config.to_dict())
    return config
