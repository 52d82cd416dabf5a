import calendar
import enum
import json
import os
import timeit
import warnings
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Iterator

import pytest
from _pytest.config import Config
from _pytest.terminal import TerminalReporter

from kronsbl.experiments import SweepResult

"""
This file contains fixtures for recording Monte Carlo results.

To use, declare the 'benchmarker' fixture in the test function. Run the
sweep, and then record the result by calling benchmarker.record. For example:

def test_snr_sweep(benchmarker):

    with benchmarker.record_duration('sweep_runtime'):
        result = run_sweep(spec)

    benchmarker.record_sweep_result('snr', result)

There's no need to import this file to use it. It should be declared as a plugin
inside conftest.py, and that makes it available to all tests.

Recorded values are printed at the end of the run, and written as JSON into
--out-dir when that option is given.
"""


@enum.unique
class MetricReport(str, enum.Enum):  # str is a hack to make it json serializable
    # this means that this is a constant test parameter
    # like number of trials, or number of antennas
    TEST_PARAM = "test_param"
    # reporter can use it to mark test runs with higher values as improvements
    HIGHER_IS_BETTER = "higher_is_better"
    # the same but for lower values
    LOWER_IS_BETTER = "lower_is_better"


class KronsblBenchmarker:
    """
    An object for recording sweep results. This is created for each test
    function by the benchmarker fixture
    """

    def __init__(self, property_recorder):
        # property recorder here is a pytest fixture provided by junitxml module
        # https://docs.pytest.org/en/6.2.x/reference.html#pytest.junitxml.record_property
        self.property_recorder = property_recorder

    def record(
        self,
        metric_name: str,
        metric_value: float,
        unit: str,
        report: MetricReport,
    ):
        # just to namespace the value
        name = f"kronsbl_benchmarker_{metric_name}"
        self.property_recorder(
            name,
            {
                "name": metric_name,
                "value": metric_value,
                "unit": unit,
                "report": report,
            },
        )

    @contextmanager
    def record_duration(self, metric_name: str):
        """
        Record a duration. Usage:

        with benchmarker.record_duration('sweep_runtime'):
            run_sweep(spec)   # measure this
        """
        start = timeit.default_timer()
        yield
        end = timeit.default_timer()

        self.record(
            metric_name=metric_name,
            metric_value=end - start,
            unit="s",
            report=MetricReport.LOWER_IS_BETTER,
        )

    def record_sweep_result(self, prefix: str, result: SweepResult):
        """Record mean NMSE, its standard error and mean iterations of every cell."""
        for cell in result.cells:
            key = f"{prefix}.{result.sweep_variable}={cell.value}.{cell.estimator}"
            self.record(f"{key}.nmse", cell.nmse_mean, "", MetricReport.LOWER_IS_BETTER)
            self.record(f"{key}.nmse_stderr", cell.nmse_stderr, "", MetricReport.TEST_PARAM)
            self.record(f"{key}.iterations", cell.iters_mean, "", MetricReport.LOWER_IS_BETTER)
            if cell.failures:
                self.record(f"{key}.failures", cell.failures, "", MetricReport.LOWER_IS_BETTER)


@pytest.fixture(scope="function")
def benchmarker(record_property) -> Iterator[KronsblBenchmarker]:
    yield KronsblBenchmarker(record_property)


def pytest_addoption(parser):
    parser.addoption(
        "--out-dir",
        dest="out_dir",
        help="Directory to output Monte Carlo results to.",
    )


def get_out_path(target_dir: Path, revision: str) -> Path:
    """
    get output file path
    if running in the CI uses commit revision
    to avoid duplicates uses counter
    """
    # use UTC timestamp as a counter marker to avoid weird behaviour
    # when for example files are deleted
    ts = calendar.timegm(datetime.utcnow().utctimetuple())
    path = target_dir / f"{ts}_{revision}.json"
    assert not path.exists()
    return path


# Hook to print the results at the end
@pytest.hookimpl(hookwrapper=True)
def pytest_terminal_summary(terminalreporter: TerminalReporter, exitstatus: int, config: Config):
    yield
    revision = os.getenv("GITHUB_SHA", "local")

    result = []
    for test_report in terminalreporter.stats.get("passed", []):
        result_entry = []
        for _, recorded_property in test_report.user_properties:
            if not isinstance(recorded_property, dict) or "unit" not in recorded_property:
                continue
            result_entry.append(recorded_property)
        if result_entry:
            result.append(
                {
                    "suit": test_report.nodeid,
                    "total_duration": test_report.duration,
                    "data": result_entry,
                }
            )

    if not result:
        return

    terminalreporter.section("Monte Carlo results", "-")
    for suit in result:
        for recorded_property in suit["data"]:
            terminalreporter.write("{}.{}: ".format(suit["suit"], recorded_property["name"]))
            unit = recorded_property["unit"]
            value = recorded_property["value"]
            if unit == "s" and isinstance(value, float):
                terminalreporter.write("{0:,.3f}".format(value), green=True)
            elif isinstance(value, float):
                terminalreporter.write("{0:.4e}".format(value), green=True)
            else:
                terminalreporter.write(str(value), green=True)
            terminalreporter.line(" {}".format(unit))

    out_dir = config.getoption("out_dir")
    if out_dir is None:
        warnings.warn("no out dir provided to store Monte Carlo results")
        return

    get_out_path(Path(out_dir), revision=revision).write_text(
        json.dumps({"revision": revision, "result": result}, indent=4)
    )
