"""
Report assembly and serialization.

Reports are deterministic: keys sorted, no timestamps, floats written with
repr precision. Each numeric claim is a Check carrying its tolerance and the
error components that make up that tolerance.
"""

import dataclasses
import json
import sys
from fractions import Fraction

import numpy as np
import pandas as pd

SCHEMA_VERSION = 1
CSV_FLOAT_FORMAT = "%.12e"


class ReportEncoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, np.integer):
            return int(o)
        elif isinstance(o, np.floating):
            return float(o)
        elif isinstance(o, np.bool_):
            return bool(o)
        elif isinstance(o, np.ndarray):
            return o.tolist()
        elif isinstance(o, Fraction):
            return {"exact": f"{o.numerator}/{o.denominator}", "float": float(o)}
        elif dataclasses.is_dataclass(o) and not isinstance(o, type):
            return dataclasses.asdict(o)
        elif isinstance(o, (set, frozenset)):
            return sorted(o)
        return super(ReportEncoder, self).default(o)


@dataclasses.dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    errors: dict = dataclasses.field(default_factory=dict)
    message: str = ""

    @classmethod
    def upper(cls, name, value, tolerance, errors=None):
        """PASS when value <= tolerance (NaN fails)."""
        value = float(value)
        return cls(name, value, float(tolerance), bool(value <= tolerance), dict(errors or {}))

    @classmethod
    def truth(cls, name, passed, message=""):
        return cls(name, float(bool(passed)), 1.0, bool(passed), {}, message)

    @classmethod
    def failure(cls, name, error):
        return cls(name, float("nan"), 0.0, False, {}, f"{type(error).__name__}: {error}")

    def verdict(self):
        return "PASS" if self.passed else "FAIL"


def build_report(subcommand, config, checks, data=None):
    """Versioned report dictionary with the full resolved config embedded."""
    return {
        "schema": SCHEMA_VERSION,
        "subcommand": subcommand,
        "config": config,
        "checks": [dataclasses.asdict(c) for c in checks],
        "data": data or {},
        "passed": all(c.passed for c in checks),
    }


def dumps(report):
    return json.dumps(report, cls=ReportEncoder, sort_keys=True, indent=2) + "\n"


def write_report(report, out=None, fmt="json", table=None):
    """
    Write a report to `out` (stdout when None).

    With fmt == "csv" the tabular part (a DataFrame) is written instead of
    the JSON document; subcommands without a table fall back to JSON.
    """
    if fmt == "csv" and table is not None:
        text = table.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    else:
        text = dumps(report)

    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)
    return text


def checks_table(checks):
    """Check verdicts as a DataFrame (one row per check)."""
    return pd.DataFrame(
        [{"name": c.name, "value": c.value, "tolerance": c.tolerance,
          "verdict": c.verdict()} for c in checks],
        columns=["name", "value", "tolerance", "verdict"],
    )


def print_checks(checks, file=None):
    file = file or sys.stderr
    print("=" * 80, file=file)
    for c in checks:
        extra = f" ({c.message})" if c.message else ""
        print(f"{c.verdict()}  {c.name}: value={c.value:.6g} tol={c.tolerance:.3g}{extra}", file=file)
    print("=" * 80, file=file)
