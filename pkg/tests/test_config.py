"""
Config Tests

INI and JSON parsing, environment overrides, located errors and seed
propagation.
"""

import json
from pathlib import Path

import pytest

from config import ModelPreset, RunConfig, load_config, parse_config
from errors import ConfigError
from potential import QuadraticPotential, TracePolyPotential

EXAMPLE_INI = """\
[model]
preset = coupled
lam = 0.3
n = 1

[sampler]
step = 0.05
n_chains = 3

[entropy]
points = 17

[transport]
crn = no

[run]
sizes = 4, 8, 16
seed = 12
out = runs/a
"""


class TestParsing:
    """INI and JSON files."""

    def test_ini_values(self):
        cfg = parse_config(EXAMPLE_INI, env={})
        assert cfg.model.preset == ModelPreset.COUPLED
        assert cfg.model.lam == 0.3
        assert cfg.sampler.step == 0.05
        assert cfg.sampler.n_chains == 3
        assert cfg.entropy.points == 17
        assert cfg.transport.crn is False
        assert cfg.sizes == [4, 8, 16]
        assert cfg.N == 4
        assert cfg.out == Path('runs/a')

    def test_json_matches_ini(self):
        data = {'model': {'preset': 'coupled', 'lam': 0.3, 'n': 1},
                'sampler': {'step': 0.05, 'n_chains': 3},
                'entropy': {'points': 17},
                'transport': {'crn': False},
                'run': {'sizes': [4, 8, 16], 'seed': 12, 'out': 'runs/a'}}
        assert parse_config(json.dumps(data), 'json', env={}).to_dict() == \
            parse_config(EXAMPLE_INI, env={}).to_dict()

    def test_text_model_with_window(self):
        cfg = parse_config('[model]\npreset = text\ntext = 0.5*tr(x1^2) + 0.05*tr(x1^4)\n'
                           'window = 1.0, 3.0\n', env={})
        V = cfg.model.build()
        assert isinstance(V, TracePolyPotential)
        assert (V.c, V.C) == (1.0, 3.0)

    def test_presets_build(self):
        cfg = parse_config(EXAMPLE_INI, env={})
        assert isinstance(cfg.model.build(), QuadraticPotential)

    def test_text_model_needs_text(self):
        cfg = parse_config('[model]\npreset = text\n', env={})
        with pytest.raises(ConfigError, match="Missing \\[model\\] text"):
            cfg.model.build()

    def test_invalid_format(self):
        with pytest.raises(ConfigError, match="Invalid config format"):
            parse_config('', 'yaml', env={})


class TestErrors:
    """Errors carry the offending line (and column for JSON)."""

    def test_unknown_key_has_line(self):
        with pytest.raises(ConfigError, match="Unknown key 'stepp'") as info:
            parse_config('[run]\nseed = 1\n\n[sampler]\nstepp = 0.1\n', env={})
        assert info.value.line == 5

    def test_bad_value_has_line(self):
        with pytest.raises(ConfigError, match="Invalid value for n_samples") as info:
            parse_config('[sampler]\nn_samples = many\n', env={})
        assert info.value.line == 2

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="Unknown section \\[plots\\]"):
            parse_config('[plots]\ncolor = red\n', env={})

    def test_missing_section_header(self):
        with pytest.raises(ConfigError, match="Missing section header") as info:
            parse_config('seed = 1\n', env={})
        assert info.value.line == 1

    def test_duplicate_key(self):
        with pytest.raises(ConfigError, match="Duplicate key") as info:
            parse_config('[run]\nseed = 1\nseed = 2\n', env={})
        assert info.value.line == 3

    def test_json_syntax_error_has_column(self):
        with pytest.raises(ConfigError, match="Invalid JSON") as info:
            parse_config('{"run": {"seed": }}', 'json', env={})
        assert info.value.line == 1
        assert info.value.column == 18

    def test_module_validation_becomes_config_error(self):
        with pytest.raises(ConfigError, match="Invalid step_scale"):
            parse_config('[transport]\nstep_scale = 2.0\n', env={})

    @pytest.mark.parametrize("sizes", ["8, 4", "0", ""])
    def test_invalid_n_grid(self, sizes):
        with pytest.raises(ConfigError, match="Invalid N-grid"):
            parse_config(f'[run]\nsizes = {sizes}\n', env={})

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError, match="Cannot read config"):
            load_config(tmp_path / "missing.ini")


class TestOverrides:
    """Environment variables, flags and seed propagation."""

    def test_environment_replaces_file(self):
        env = {'FREEGIBBS_SAMPLER_STEP': '0.2', 'FREEGIBBS_RUN_SEED': '99'}
        cfg = parse_config(EXAMPLE_INI, env=env)
        assert cfg.sampler.step == 0.2
        assert cfg.seed == 99

    def test_environment_without_file(self):
        cfg = load_config(env={'FREEGIBBS_MODEL_PRESET': 'quartic', 'FREEGIBBS_MODEL_G': '0.05'})
        assert cfg.model.preset == ModelPreset.QUARTIC
        assert cfg.model.g == 0.05

    def test_flags_replace_environment(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(EXAMPLE_INI)
        cfg = load_config(path, env={'FREEGIBBS_RUN_SEED': '99'}).override(seed=5, out=tmp_path, checks=['heat'])
        assert cfg.seed == 5
        assert cfg.out == tmp_path
        assert cfg.checks == ['heat']

    def test_seed_reaches_every_module(self):
        cfg = RunConfig(seed=21, threads=2)
        assert cfg.sampler.seed == 21
        assert cfg.condexp.seed == 21
        assert cfg.entropy.seed == 21 and cfg.entropy.threads == 2
        assert cfg.transport.seed == 21 and cfg.transport.outer.seed == 21
        assert cfg.override(seed=4).transport.seed == 4

    def test_json_file_by_suffix(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({'run': {'seed': 3}}))
        assert load_config(path, env={}).seed == 3

    def test_to_dict_sections(self):
        assert set(RunConfig().to_dict()) == {'model', 'sampler', 'ode', 'entropy', 'transport', 'run'}
