import json
import math
from fractions import Fraction

import numpy as np
import pandas as pd

from phi4ce.reporting import Check, ReportEncoder, build_report, checks_table, dumps, write_report


class TestEncoder:
    def test_numpy_and_fraction(self):
        text = json.dumps({"a": np.float64(1.5), "b": np.int64(3), "c": np.arange(3), "d": Fraction(42, 1),
                           "e": np.bool_(True)}, cls=ReportEncoder, sort_keys=True)
        data = json.loads(text)
        assert data["a"] == 1.5
        assert data["b"] == 3
        assert data["c"] == [0, 1, 2]
        assert data["d"] == {"exact": "42/1", "float": 42.0}
        assert data["e"] is True

    def test_dataclass(self):
        data = json.loads(json.dumps(Check.truth("x", True), cls=ReportEncoder))
        assert data["name"] == "x"
        assert data["passed"] is True


class TestChecks:
    def test_upper(self):
        assert Check.upper("a", 1e-12, 1e-10).passed
        assert not Check.upper("a", 1e-9, 1e-10).passed
        assert not Check.upper("a", float("nan"), 1.0).passed

    def test_failure_message(self):
        check = Check.failure("k", ValueError("bad"))
        assert not check.passed
        assert math.isnan(check.value)
        assert check.message == "ValueError: bad"


class TestReports:
    def test_schema_and_verdict(self):
        report = build_report("lemma3", {"n": 6}, [Check.truth("a", True), Check.truth("b", False)])
        assert report["schema"] == 1
        assert report["passed"] is False
        assert [c["name"] for c in report["checks"]] == ["a", "b"]

    def test_dumps_is_sorted_and_stable(self):
        report = build_report("lemma3", {"n": 6}, [Check.truth("a", True)], {"z": 1, "a": 2})
        first, second = dumps(report), dumps(report)
        assert first == second
        assert list(json.loads(first)) == sorted(json.loads(first))

    def test_csv_table(self, tmp_path):
        table = pd.DataFrame({"r": [0.0, 1.0], "C_reg": [0.1, 0.05]})
        out = tmp_path / "table.csv"
        write_report({}, str(out), "csv", table)
        lines = out.read_text().splitlines()
        assert lines[0] == "r,C_reg"
        assert lines[1] == "0.000000000000e+00,1.000000000000e-01"

    def test_csv_without_table_falls_back_to_json(self, tmp_path):
        out = tmp_path / "report.json"
        write_report(build_report("x", {}, []), str(out), "csv", None)
        assert json.loads(out.read_text())["passed"] is True

    def test_checks_table(self):
        table = checks_table([Check.upper("a", 0.5, 1.0)])
        assert list(table.columns) == ["name", "value", "tolerance", "verdict"]
        assert table.loc[0, "verdict"] == "PASS"
