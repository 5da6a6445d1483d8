import os

import pytest

from src.cli.config import RunConfig, coerce_value, load_config, parse_override
from src.models.data_models import FilmKind
from src.models.errors import ConfigError


class TestCoerceValue:
    @pytest.mark.parametrize('key, value, expected', [
        ('pixel_size', 50, 50),
        ('pixel_size', 50.0, 50),
        ('step_height', 300, 300.0),
        ('heatmaps', False, False),
        ('layers', 3, [3]),
        ('layers', [1, 2], [1, 2]),
        ('z0', None, None),
        ('film', 'conformal', 'conformal'),
    ])
    def test_accepts(self, key, value, expected):
        assert coerce_value(key, value) == expected

    @pytest.mark.parametrize('key, value', [
        ('pixel_size', 2.5),
        ('pixel_size', True),
        ('step_height', False),
        ('heatmaps', 'yes'),
        ('layers', [1, 'two']),
        ('film', None),
        ('film', ['hdp']),
    ])
    def test_rejects(self, key, value):
        with pytest.raises(ConfigError, match="expects"):
            coerce_value(key, value)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            coerce_value('pixel', 25)


class TestParseOverride:
    def test_scalars_and_lists(self):
        assert parse_override("t_conf=600") == ('t_conf', 600)
        assert parse_override("layers=[1, 2]") == ('layers', [1, 2])
        assert parse_override("heatmaps=false") == ('heatmaps', False)
        assert parse_override("z0=") == ('z0', None)

    @pytest.mark.parametrize('text', ["film", "=hdp"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)


class TestLoadConfig:
    def test_defaults(self):
        assert load_config() == RunConfig()

    def test_file_paths_resolve_against_the_file(self, tmp_path):
        conf_dir = tmp_path / "conf"
        conf_dir.mkdir()
        path = conf_dir / "run.yaml"
        path.write_text("input: ../chip.gds\nout_dir: results\nfilm: layout\ncell_size: 20000\n",
                        encoding="utf-8")
        config = load_config(str(path))
        assert config.input == os.path.normpath(str(tmp_path / "chip.gds"))
        assert config.out_dir == str(conf_dir / "results")
        assert config.film == 'layout'
        assert config.cell_size == 20_000

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("film: layout\nthreads: 2\n", encoding="utf-8")
        config = load_config(str(path), ["film=conformal", "threads=3"], {'threads': 4, 'input': None})
        assert config.film == 'conformal'
        assert config.threads == 4
        assert config.input is None

    def test_nested_mapping_rejected(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("window:\n  diameter: 100000\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="nested"):
            load_config(str(path))

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("- film\n- hdp\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(str(tmp_path / "absent.yaml"))

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["window=1"])


class TestRunConfig:
    def test_cmp_params_missing(self):
        with pytest.raises(ConfigError, match="missing removal_rate, polish_time"):
            RunConfig(z0=1000.0, z1=500.0).cmp_params()

    def test_cmp_params(self):
        params = RunConfig(z0=1000.0, z1=500.0, removal_rate=100.0, polish_time=2.0).cmp_params()
        assert (params.z1, params.rate, params.time) == (500.0, 100.0, 2.0)

    def test_z1_follows_step_height(self):
        params = RunConfig(z0=1000.0, step_height=300.0, removal_rate=100.0, polish_time=2.0).cmp_params()
        assert params.z1 == 300.0

    def test_z1_must_match_step_height(self):
        config = RunConfig(z0=1000.0, z1=4000.0, removal_rate=100.0, polish_time=2.0)
        with pytest.raises(ConfigError, match="differs from step_height"):
            config.cmp_params()

    @pytest.mark.parametrize('kwargs', [
        {'pixel_size': 30},
        {'threads': 0},
        {'convolution': 'winograd'},
        {'fill_format': 'oasis'},
        {'layers': []},
        {'film': 'spin-on'},
        {'polarity': 'inverted'},
        {'fill_mode': 'greedy'},
    ])
    def test_validate(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs).validate()

    def test_film_stack_kind_override(self):
        stack = RunConfig(t_conf=500.0).film_stack(FilmKind.CONFORMAL)
        assert stack.kind == FilmKind.CONFORMAL

    def test_require_input(self, tmp_path):
        with pytest.raises(ConfigError, match="no input"):
            RunConfig().require_input()
        with pytest.raises(ConfigError, match="does not exist"):
            RunConfig(input=str(tmp_path / "chip.gds")).require_input()
