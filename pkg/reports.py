"""
Check Reports

Verdict containers shared by all verification routines and the float
formatting of emitted files. CSV values use 17 significant digits and JSON
values the exact round-trip repr, so a re-run with the same seed reproduces
files byte-for-byte.
"""

import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np


def format_float(value: float) -> str:
    """Shortest text with 17 significant digits; nan/inf spelled out."""
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return format(value, '.17g')


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays, complex numbers and dataclasses for json.dumps."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return {'re': float(np.real(obj)), 'im': float(np.imag(obj))}
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else format_float(value)
    if hasattr(obj, 'to_dict'):
        return to_jsonable(obj.to_dict())
    return obj


def dumps(obj: Any) -> str:
    """JSON text; floats use the shortest repr that round-trips exactly."""
    return json.dumps(to_jsonable(obj), indent=2) + "\n"


@dataclass
class CheckReport:
    """Outcome of one verification check."""
    name: str
    passed: bool
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'verdict': self.verdict, 'details': to_jsonable(self.details)}

    def __str__(self):
        return f"{self.name}: {self.verdict}"


@dataclass
class RunReport:
    """Verdicts of a run with the config echo and an environment fingerprint."""
    subcommand: str
    config: Dict[str, Any]
    checks: List[CheckReport] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def add(self, check: CheckReport) -> CheckReport:
        self.checks.append(check)
        return check

    def to_dict(self) -> Dict[str, Any]:
        return {
            'subcommand': self.subcommand,
            'passed': self.passed,
            'checks': [c.to_dict() for c in self.checks],
            'results': to_jsonable(self.results),
            'config': to_jsonable(self.config),
            'environment': environment_fingerprint(),
        }

    def write(self, path: Union[str, Path], include_timing: bool = False) -> None:
        data = self.to_dict()
        if include_timing:
            data['timing'] = dict(self.timing)
        Path(path).write_text(dumps(data))


def environment_fingerprint() -> Dict[str, str]:
    import scipy
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'machine': platform.machine(),
    }
