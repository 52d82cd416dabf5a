"""
Monte Carlo sweeps: NMSE of every selected estimator as one scenario
parameter varies.

Trials are paired: within a trial every estimator sees the same channel and
the same noisy observation. Each (value, trial) pair draws from its own RNG
stream, so results do not depend on the number of workers.
"""

import concurrent.futures
import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from kronsbl.channel_sim import (
    SWEEP_FIELDS,
    ChannelScenario,
    build_dictionary,
    generate_channel,
    observe,
    reconstruct_channel,
    trial_rng,
)
from kronsbl.errors import ConditioningError, ParameterError
from kronsbl.estimators import (
    ESTIMATORS,
    ConvergencePolicy,
    ESblHyper,
    EstimatorSettings,
    SblHyper,
    run_estimator,
)
from kronsbl.log_helper import getLogger
from kronsbl.metrics import SweepMetrics
from kronsbl.numerics import DictionaryKron

log = getLogger("kronsbl.experiments")

NMSE_MODES = ("ratio_of_means", "mean_of_ratios")
INTEGER_VARIABLES = ("pilot_length", "num_antennas", "num_scatterers")

CSV_COLUMNS = [
    "sweep_var",
    "value",
    "estimator",
    "nmse_mean",
    "nmse_stderr",
    "iters_mean",
    "walltime_mean",
    "trials",
    "failures",
]

# Numerical failures that exclude a single (trial, estimator) run from the aggregates
TRIAL_FAILURES = (ConditioningError, FloatingPointError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class SweepSpec:
    base_scenario: ChannelScenario
    sweep_variable: str
    sweep_values: Tuple[Any, ...]
    estimators: Tuple[str, ...] = tuple(sorted(ESTIMATORS))
    num_trials: int = 1000
    sbl_hyper: SblHyper = SblHyper()
    esbl_hyper: ESblHyper = ESblHyper()
    policy: ConvergencePolicy = ConvergencePolicy()
    workers: int = 1
    nmse_mode: str = "ratio_of_means"
    timing: bool = False

    def __post_init__(self):
        if self.sweep_variable not in SWEEP_FIELDS:
            raise ParameterError(
                f"unknown sweep variable '{self.sweep_variable}',"
                f" expected one of {sorted(SWEEP_FIELDS)}"
            )
        values = tuple(self.sweep_values)
        if not values:
            raise ParameterError("sweep values must not be empty")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ParameterError(f"sweep values must be strictly increasing, got {list(values)}")
        if self.sweep_variable in INTEGER_VARIABLES:
            if any(isinstance(v, bool) or int(v) != v for v in values):
                raise ParameterError(f"{self.sweep_variable} values must be integers")
            values = tuple(int(v) for v in values)
        else:
            values = tuple(float(v) for v in values)
        object.__setattr__(self, "sweep_values", values)

        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ParameterError(f"unknown estimators {unknown}, expected {sorted(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ParameterError(f"duplicate estimators in {list(self.estimators)}")
        object.__setattr__(self, "estimators", tuple(sorted(self.estimators)))

        if self.num_trials < 1:
            raise ParameterError(f"num_trials must be at least 1, got {self.num_trials}")
        if self.workers < 1:
            raise ParameterError(f"workers must be at least 1, got {self.workers}")
        if self.nmse_mode not in NMSE_MODES:
            raise ParameterError(f"nmse_mode must be one of {NMSE_MODES}, got {self.nmse_mode}")

        # fail now rather than halfway through the sweep, e.g. on K > N
        for value in values:
            self.base_scenario.with_value(self.sweep_variable, value)

    @property
    def settings(self) -> EstimatorSettings:
        return EstimatorSettings(self.sbl_hyper, self.esbl_hyper, self.policy)

    def scenario_at(self, value: Any) -> ChannelScenario:
        return self.base_scenario.with_value(self.sweep_variable, value)


@dataclass(frozen=True)
class TrialRecord:
    value_index: int
    trial: int
    estimator: str
    error_energy: float
    channel_energy: float
    iterations: int = 0
    wall_time: float = 0.0
    converged: bool = True
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class SweepCell:
    value: Any
    estimator: str
    nmse_mean: float
    nmse_stderr: float
    iters_mean: float
    walltime_mean: float
    trials: int
    failures: int = 0

    def __eq__(self, other: object) -> bool:
        # cells where every trial failed hold NaN and must still match their CSV copy
        if not isinstance(other, SweepCell):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if a != b and not (_is_nan(a) and _is_nan(b)):
                return False
        return True


def _is_nan(x: Any) -> bool:
    return isinstance(x, float) and math.isnan(x)


@dataclass
class SweepResult:
    sweep_variable: str
    cells: List[SweepCell] = field(default_factory=list)
    records: List[TrialRecord] = field(default_factory=list, compare=False)
    nmse_mode: str = field(default="ratio_of_means", compare=False)

    @property
    def values(self) -> List[Any]:
        return list(dict.fromkeys(c.value for c in self.cells))

    def cell(self, value: Any, estimator: str) -> SweepCell:
        for c in self.cells:
            if c.value == value and c.estimator == estimator:
                return c
        raise KeyError(f"no cell for {self.sweep_variable}={value}, estimator={estimator}")

    def trial_records(self, value: Any, estimator: str) -> List[TrialRecord]:
        value_index = self.values.index(value)
        return [
            r for r in self.records if r.value_index == value_index and r.estimator == estimator
        ]


def _energies(estimates: Any, truths: Any) -> Tuple[np.ndarray, np.ndarray]:
    def as_batch(x: Any) -> List[np.ndarray]:
        if isinstance(x, np.ndarray) and x.ndim == 2 or hasattr(x, "H"):
            x = [x]
        return [np.asarray(getattr(item, "H", item), dtype=complex) for item in x]

    est, true = as_batch(estimates), as_batch(truths)
    if len(est) != len(true):
        raise ParameterError(f"batch sizes differ: {len(est)} estimates, {len(true)} channels")
    errors, energies = [], []
    for h_hat, h in zip(est, true):
        if h_hat.shape != h.shape:
            raise ParameterError(f"estimate shape {h_hat.shape} differs from {h.shape}")
        errors.append(np.sum(np.abs(h_hat - h) ** 2))
        energies.append(np.sum(np.abs(h) ** 2))
    return np.array(errors, dtype=float), np.array(energies, dtype=float)


def nmse_stats(
    errors: Sequence[float], energies: Sequence[float], mode: str = "ratio_of_means"
) -> Tuple[float, float]:
    """
    Mean NMSE and its standard error from per-trial squared errors and
    channel energies.

    ratio_of_means is Σe/Σs; its standard error comes from the linearization
    d_t = (e_t − R·s_t)/s̄. mean_of_ratios averages e_t/s_t.
    """
    e = np.asarray(errors, dtype=float)
    s = np.asarray(energies, dtype=float)
    n = len(e)
    if n == 0:
        raise ParameterError("cannot compute NMSE of an empty batch")
    if mode not in NMSE_MODES:
        raise ParameterError(f"nmse mode must be one of {NMSE_MODES}, got {mode}")
    if np.any(s <= 0):
        raise ParameterError("channel energies must be positive")

    if mode == "ratio_of_means":
        mean = float(np.sum(e) / np.sum(s))
        deviations = (e - mean * s) / np.mean(s)
    else:
        ratios = e / s
        mean = float(np.mean(ratios))
        deviations = ratios
    stderr = float(np.std(deviations, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, stderr


def nmse(estimates: Any, truths: Any, mode: str = "ratio_of_means") -> float:
    errors, energies = _energies(estimates, truths)
    return nmse_stats(errors, energies, mode)[0]


def _run_trial(
    spec: SweepSpec,
    scenario: ChannelScenario,
    dictionary: DictionaryKron,
    value_index: int,
    trial: int,
) -> List[TrialRecord]:
    rng = trial_rng(spec.base_scenario.seed, value_index, trial)
    channel, _ = generate_channel(scenario, rng)
    observation = observe(channel, dictionary.pilot, scenario.snr_db, rng)
    channel_energy = channel.energy()

    records = []
    for name in spec.estimators:
        try:
            report = run_estimator(
                name, dictionary, observation.z, scenario.estimation_sigma2, spec.settings
            )
            estimate = reconstruct_channel(
                report.u_hat, dictionary.transform, scenario.num_antennas, scenario.num_users
            )
            error_energy = float(np.sum(np.abs(estimate.H - channel.H) ** 2))
            if not math.isfinite(error_energy):
                raise FloatingPointError("estimate has non-finite entries")
        except TRIAL_FAILURES as e:
            records.append(
                TrialRecord(
                    value_index,
                    trial,
                    name,
                    error_energy=math.nan,
                    channel_energy=channel_energy,
                    converged=False,
                    failed=True,
                    error=str(e),
                )
            )
            continue
        records.append(
            TrialRecord(
                value_index,
                trial,
                name,
                error_energy=error_energy,
                channel_energy=channel_energy,
                iterations=report.iterations,
                wall_time=report.wall_time,
                converged=report.converged,
            )
        )
    return records


def _aggregate(spec: SweepSpec, value: Any, records: List[TrialRecord]) -> List[SweepCell]:
    cells = []
    for name in spec.estimators:
        ok = [r for r in records if r.estimator == name and not r.failed]
        failures = sum(1 for r in records if r.estimator == name and r.failed)
        if ok:
            mean, stderr = nmse_stats(
                [r.error_energy for r in ok], [r.channel_energy for r in ok], spec.nmse_mode
            )
            iters_mean = float(np.mean([r.iterations for r in ok]))
            walltime_mean = float(np.mean([r.wall_time for r in ok])) if spec.timing else 0.0
        else:
            mean = stderr = iters_mean = math.nan
            walltime_mean = 0.0
        cells.append(
            SweepCell(
                value,
                name,
                nmse_mean=mean,
                nmse_stderr=stderr,
                iters_mean=iters_mean,
                walltime_mean=walltime_mean,
                trials=spec.num_trials,
                failures=failures,
            )
        )
    return cells


def run_sweep(spec: SweepSpec, metrics: Optional[SweepMetrics] = None) -> SweepResult:
    result = SweepResult(spec.sweep_variable, nmse_mode=spec.nmse_mode)

    for value_index, value in enumerate(spec.sweep_values):
        scenario = spec.scenario_at(value)
        dictionary = build_dictionary(scenario)
        # computed once here so that worker threads only read the cached Grams
        log.debug(f"{spec.sweep_variable}={value}: Gram structure {dictionary.structure.value}")

        def run(trial: int) -> List[TrialRecord]:
            return _run_trial(spec, scenario, dictionary, value_index, trial)

        if spec.workers > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=spec.workers) as pool:
                per_trial = list(pool.map(run, range(spec.num_trials)))
        else:
            per_trial = [run(trial) for trial in range(spec.num_trials)]

        records = [r for trial_records in per_trial for r in trial_records]
        for r in records:
            if r.failed:
                log.warning(
                    f"{spec.sweep_variable}={value} trial {r.trial}:"
                    f" {r.estimator} excluded: {r.error}"
                )
            if metrics is not None:
                if r.failed:
                    metrics.observe_failure(r.estimator)
                else:
                    metrics.observe_run(r.estimator, r.iterations, r.wall_time)

        result.records.extend(records)
        result.cells.extend(_aggregate(spec, value, records))
        failed = sum(1 for r in records if r.failed)
        log.info(
            f"{spec.sweep_variable}={value}: {spec.num_trials} trials done"
            + (f", {failed} estimator runs excluded" if failed else "")
        )

    return result


def paired_difference(
    result: SweepResult, value: Any, first: str, second: str
) -> Tuple[float, float]:
    """
    Mean and standard error of NMSE(first) − NMSE(second) over the trials in
    which both estimators succeeded.
    """
    a = {r.trial: r for r in result.trial_records(value, first) if not r.failed}
    b = {r.trial: r for r in result.trial_records(value, second) if not r.failed}
    trials = sorted(a.keys() & b.keys())
    if not trials:
        raise ParameterError(f"no paired trials for {first} and {second} at {value}")
    diff = np.array([a[t].error_energy - b[t].error_energy for t in trials])
    energy = np.array([a[t].channel_energy for t in trials])
    if result.nmse_mode == "ratio_of_means":
        d = diff / np.mean(energy)
    else:
        d = diff / energy
    stderr = float(np.std(d, ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    return float(np.mean(d)), stderr


def _format_float(x: float) -> str:
    return f"{x:.16e}"


def _format_value(value: Any) -> str:
    if isinstance(value, int):
        return str(value)
    return _format_float(float(value))


def _csv_rows(result: SweepResult) -> Iterable[List[str]]:
    yield CSV_COLUMNS
    for c in result.cells:
        yield [
            result.sweep_variable,
            _format_value(c.value),
            c.estimator,
            _format_float(c.nmse_mean),
            _format_float(c.nmse_stderr),
            _format_float(c.iters_mean),
            _format_float(c.walltime_mean),
            str(c.trials),
            str(c.failures),
        ]


def write_atomic(path: Union[str, Path], text: str):
    """Write through a temporary file in the target directory and rename on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_csv(result: SweepResult, path: Union[str, Path]):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(_csv_rows(result))
    write_atomic(path, buf.getvalue())


def read_csv(path: Union[str, Path], nmse_mode: str = "ratio_of_means") -> SweepResult:
    """Parse a file written by emit_csv. A header-only file gives an empty result."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ParameterError(f"{path}: unexpected CSV header {header}")
        rows = list(reader)

    result = SweepResult("", nmse_mode=nmse_mode)
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(CSV_COLUMNS):
            raise ParameterError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields")
        sweep_var, value, estimator = row[0], row[1], row[2]
        if result.sweep_variable and sweep_var != result.sweep_variable:
            raise ParameterError(f"{path}:{lineno}: mixed sweep variables")
        result.sweep_variable = sweep_var
        result.cells.append(
            SweepCell(
                value=int(value) if sweep_var in INTEGER_VARIABLES else float(value),
                estimator=estimator,
                nmse_mean=float(row[3]),
                nmse_stderr=float(row[4]),
                iters_mean=float(row[5]),
                walltime_mean=float(row[6]),
                trials=int(row[7]),
                failures=int(row[8]),
            )
        )
    return result


def format_summary(result: SweepResult) -> str:
    """Fixed-width table of the aggregates, one line per cell."""
    lines = [
        f"{result.sweep_variable:>14} {'estimator':>9} {'nmse':>12} {'stderr':>10}"
        f" {'iters':>8} {'failed':>6}"
    ]
    for c in result.cells:
        lines.append(
            f"{c.value!s:>14} {c.estimator:>9} {c.nmse_mean:>12.4e} {c.nmse_stderr:>10.2e}"
            f" {c.iters_mean:>8.1f} {c.failures:>6}"
        )
    return "\n".join(lines)
