"""
Run Configuration

A RunConfig gathers the model, the N-grid, the per-module budgets, the master
seed and the output directory of a run. It is read from an INI file with
sections [model] [sampler] [ode] [entropy] [transport] [run], or from JSON
with the same nesting. Environment variables FREEGIBBS_<SECTION>_<KEY>
replace file values; command-line flags replace both.

The master seed in [run] is copied into every module configuration.
"""

import configparser
import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from condexp import CondExpConfig, OdeConfig
from entropy import QuadratureConfig
from errors import ConfigError, FreeGibbsError
from potential import (PotentialSpec, TracePolyPotential, coupled_gaussian, gue_potential,
                       quartic_potential, shifted_gaussian)
from sampler import SamplerConfig
from transport import TransportConfig

logger = logging.getLogger('FreeGibbs.config')

SECTIONS = ('model', 'sampler', 'ode', 'entropy', 'transport', 'run')
ENV_PREFIX = 'FREEGIBBS_'
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


class ModelPreset(Enum):
    GUE = "gue"
    SHIFTED = "shifted"
    COUPLED = "coupled"
    QUARTIC = "quartic"
    TEXT = "text"


@dataclass
class ModelConfig:
    """
    Model selection.

    Args:
        preset: One of gue, shifted, coupled, quartic, text
        text: Potential text for the text preset, e.g. "0.5*tr(x1^2) + 0.1*tr(x1^4)"
        m, n: Partition of the variables (x-block, y-block)
        window: Declared convexity window (c, C) of the text preset
        alpha: Shift of the shifted preset
        lam: Coupling of the coupled preset
        g, radius: Quartic coupling and the radius of its declared window
    """
    preset: ModelPreset = ModelPreset.GUE
    text: str = ""
    m: int = 1
    n: int = 0
    window: Tuple[float, float] = (1.0, 1.0)
    alpha: float = 1.0
    lam: float = 0.5
    g: float = 0.1
    radius: float = 2.0

    def build(self) -> PotentialSpec:
        if self.preset == ModelPreset.GUE:
            return gue_potential(self.m)
        if self.preset == ModelPreset.SHIFTED:
            return shifted_gaussian(self.alpha, self.m)
        if self.preset == ModelPreset.COUPLED:
            return coupled_gaussian(self.lam, n=self.n)
        if self.preset == ModelPreset.QUARTIC:
            return quartic_potential(self.g, self.radius)
        if not self.text.strip():
            raise ConfigError("Missing [model] text for the text preset")
        c, C = self.window
        return TracePolyPotential.from_text(self.text, m=self.m, n=self.n, c=c, C=C)


@dataclass
class RunConfig:
    """Everything a CLI run needs."""
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    condexp: CondExpConfig = field(default_factory=CondExpConfig)
    entropy: QuadratureConfig = field(default_factory=QuadratureConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    sizes: List[int] = field(default_factory=lambda: [8])
    seed: int = 0
    out: Path = Path('results')
    threads: int = 1
    checks: List[str] = field(default_factory=list)
    max_degree: int = 6
    points: int = 4

    def __post_init__(self):
        if not self.sizes or any(N < 1 for N in self.sizes):
            raise ConfigError(f"Invalid N-grid: {self.sizes} (must be non-empty positive sizes)")
        if list(self.sizes) != sorted(set(self.sizes)):
            raise ConfigError(f"Invalid N-grid: {self.sizes} (must be strictly ascending)")
        if self.threads < 1:
            raise ConfigError(f"Invalid threads: {self.threads} (must be >= 1)")
        if self.points < 1 or self.max_degree < 1:
            raise ConfigError(f"Invalid points/max_degree: {self.points}/{self.max_degree} (must be >= 1)")
        self.out = Path(self.out)
        self._propagate()

    @property
    def N(self) -> int:
        """Matrix size of single-size subcommands (the first of the grid)."""
        return self.sizes[0]

    def _propagate(self) -> None:
        seed, threads = self.seed, self.threads
        self.sampler = replace(self.sampler, seed=seed)
        self.condexp = replace(self.condexp, seed=seed, sampler=self.sampler)
        self.entropy = replace(self.entropy, seed=seed, threads=threads, sampler=self.sampler)
        self.transport = replace(self.transport, seed=seed, threads=threads, outer=self.sampler)

    def override(self, seed: Optional[int] = None, out: Optional[Union[str, Path]] = None,
                 threads: Optional[int] = None, checks: Optional[List[str]] = None) -> 'RunConfig':
        """Apply command-line flags."""
        return replace(self,
                       seed=self.seed if seed is None else seed,
                       out=self.out if out is None else Path(out),
                       threads=self.threads if threads is None else threads,
                       checks=self.checks if not checks else list(checks))

    def to_dict(self) -> Dict[str, Any]:
        def section(obj):
            return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)
                    if not isinstance(getattr(obj, f.name), (SamplerConfig, OdeConfig))}
        return {
            'model': section(self.model),
            'sampler': section(self.sampler),
            'ode': {**section(self.condexp.ode), **section(self.condexp)},
            'entropy': section(self.entropy),
            'transport': section(self.transport),
            'run': {'sizes': list(self.sizes), 'seed': self.seed, 'out': str(self.out),
                    'threads': self.threads, 'checks': list(self.checks),
                    'max_degree': self.max_degree, 'points': self.points},
        }


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    return value


# ------------------------------------------------------------------
# Parsing
# ------------------------------------------------------------------

_RUN_DEFAULTS = {'sizes': [8], 'seed': 0, 'out': 'results', 'threads': 1, 'checks': [],
                 'max_degree': 6, 'points': 4}


def _section_targets(section: str) -> List[Any]:
    """Default objects whose fields a section may set."""
    return {
        'model': [ModelConfig()],
        'sampler': [SamplerConfig()],
        'ode': [OdeConfig(), CondExpConfig()],
        'entropy': [QuadratureConfig()],
        'transport': [TransportConfig()],
    }.get(section, [])


def _known_keys(section: str) -> Dict[str, Any]:
    if section == 'run':
        return dict(_RUN_DEFAULTS)
    keys = {}
    for target in _section_targets(section):
        for f in fields(target):
            value = getattr(target, f.name)
            if not isinstance(value, (SamplerConfig, OdeConfig)) and f.name != 'seed':
                keys.setdefault(f.name, value)
    return keys


def _coerce(raw: Any, default: Any, key: str) -> Any:
    """Convert a file or environment value to the type of the default."""
    text = raw.strip() if isinstance(raw, str) else raw
    try:
        if isinstance(default, Enum):
            return type(default)(str(text).lower())
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            word = str(text).lower()
            if word not in _TRUE | _FALSE:
                raise ValueError(text)
            return word in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (tuple, list)):
            items = text if isinstance(text, (list, tuple)) else [p for p in str(text).split(',') if p.strip()]
            element = default[0] if default else ''
            if isinstance(element, str):
                values = [str(v).strip() for v in items]
            elif isinstance(element, int) and not isinstance(element, bool):
                values = [int(v) for v in items]
            else:
                values = [float(v) for v in items]
            return tuple(values) if isinstance(default, tuple) else values
        if default is None:
            if isinstance(text, str):
                if text.lower() in ('', 'none'):
                    return None
                return float(text) if any(ch in text for ch in '.eE') else int(text)
            return text
        return str(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid value for {key}: {raw!r} (expected {type(default).__name__})") from exc


def _line_of(text: str, section: str, key: str) -> Optional[int]:
    """Line number of key inside [section] of an INI text."""
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith('[') and stripped.endswith(']'):
            current = stripped[1:-1].strip().lower()
        elif current == section and stripped.split('=', 1)[0].split(':', 1)[0].strip().lower() == key:
            return number
    return None


def _read_ini(text: str) -> Tuple[Dict[str, Dict[str, Any]], Dict[Tuple[str, str], int]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"Missing section header: {exc.line.strip()!r}", exc.lineno) from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"Duplicate key {exc.option!r} in [{exc.section}]", exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"Duplicate section [{exc.section}]", exc.lineno) from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"Cannot parse {line.strip()!r}", lineno) from exc
    raw, lines = {}, {}
    for section in parser.sections():
        name = section.strip().lower()
        raw[name] = dict(parser.items(section))
        for key in raw[name]:
            lines[(name, key)] = _line_of(text, name, key)
    return raw, lines


def _read_json(text: str) -> Dict[str, Dict[str, Any]]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ConfigError("Invalid JSON config: expected an object of section objects")
    return {str(k).lower(): {str(key).lower(): value for key, value in v.items()} for k, v in data.items()}


def _apply_env(raw: Dict[str, Dict[str, Any]], env: Mapping[str, str]) -> None:
    for section in SECTIONS:
        for key in _known_keys(section):
            name = f"{ENV_PREFIX}{section.upper()}_{key.upper()}"
            if name in env:
                raw.setdefault(section, {})[key] = env[name]
                logger.debug("Environment override %s", name)


def build_config(raw: Dict[str, Dict[str, Any]],
                 lines: Optional[Dict[Tuple[str, str], int]] = None) -> RunConfig:
    """RunConfig from section → key → raw value."""
    lines = lines or {}
    values: Dict[str, Dict[str, Any]] = {}
    for section, entries in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown section [{section}] (must be one of {', '.join(SECTIONS)})")
        known = _known_keys(section)
        values[section] = {}
        for key, value in entries.items():
            if key not in known:
                raise ConfigError(f"Unknown key {key!r} in [{section}]", lines.get((section, key)))
            try:
                values[section][key] = _coerce(value, known[key], key)
            except ConfigError as exc:
                raise ConfigError(str(exc), lines.get((section, key))) from exc

    def pick(section, target):
        names = {f.name for f in fields(target)}
        return {k: v for k, v in values.get(section, {}).items() if k in names}

    try:
        ode = OdeConfig(**pick('ode', OdeConfig))
        run = {**_RUN_DEFAULTS, **values.get('run', {})}
        return RunConfig(
            model=ModelConfig(**pick('model', ModelConfig)),
            sampler=SamplerConfig(**pick('sampler', SamplerConfig)),
            condexp=CondExpConfig(ode=ode, **pick('ode', CondExpConfig)),
            entropy=QuadratureConfig(**pick('entropy', QuadratureConfig)),
            transport=TransportConfig(**pick('transport', TransportConfig)),
            sizes=list(run['sizes']), seed=run['seed'], out=Path(run['out']),
            threads=run['threads'], checks=list(run['checks']),
            max_degree=run['max_degree'], points=run['points'])
    except ConfigError:
        raise
    except FreeGibbsError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, fmt: str = 'ini', env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Parse INI or JSON text, then apply environment overrides."""
    if fmt == 'ini':
        raw, lines = _read_ini(text)
    elif fmt == 'json':
        raw, lines = _read_json(text), {}
    else:
        raise ConfigError(f"Invalid config format: {fmt!r} (must be 'ini' or 'json')")
    _apply_env(raw, os.environ if env is None else env)
    return build_config(raw, lines)


def load_config(path: Optional[Union[str, Path]] = None,
                env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Load a config file (JSON when the suffix is .json, INI otherwise).

    Without a path the defaults are used, still subject to environment
    overrides.
    """
    if path is None:
        raw: Dict[str, Dict[str, Any]] = {}
        _apply_env(raw, os.environ if env is None else env)
        return build_config(raw)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc.strerror}") from exc
    config = parse_config(text, 'json' if path.suffix.lower() == '.json' else 'ini', env)
    logger.info("Loaded config %s (model %s, N=%s)", path, config.model.preset.value, config.sizes)
    return config
