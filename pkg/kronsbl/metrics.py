from pathlib import Path
from typing import Union

from prometheus_client import CollectorRegistry, Counter, Histogram, Summary, generate_latest

ITERATION_BUCKETS = (1, 2, 5, 10, 20, 50, 100, 200, 500, float("inf"))


class SweepMetrics:
    """
    Prometheus telemetry for a sweep, held in a private registry so that
    concurrent sweeps in one process never share counters.
    """

    registry: CollectorRegistry

    def __init__(self):
        self.registry = CollectorRegistry()
        self.trials = Counter(
            "kronsbl_trials_total",
            "Estimator runs attempted",
            ["estimator"],
            registry=self.registry,
        )
        self.failures = Counter(
            "kronsbl_trial_failures_total",
            "Estimator runs excluded from aggregates after a numerical failure",
            ["estimator"],
            registry=self.registry,
        )
        self.iterations = Histogram(
            "kronsbl_estimator_iterations",
            "Iterations until the stopping rule fired",
            ["estimator"],
            buckets=ITERATION_BUCKETS,
            registry=self.registry,
        )
        self.seconds = Summary(
            "kronsbl_estimator_seconds",
            "Wall time of a single estimator run",
            ["estimator"],
            registry=self.registry,
        )

    def observe_run(self, estimator: str, iterations: int, seconds: float):
        self.trials.labels(estimator=estimator).inc()
        self.iterations.labels(estimator=estimator).observe(iterations)
        self.seconds.labels(estimator=estimator).observe(seconds)

    def observe_failure(self, estimator: str):
        self.trials.labels(estimator=estimator).inc()
        self.failures.labels(estimator=estimator).inc()

    def exposition(self) -> str:
        return generate_latest(self.registry).decode("utf-8")

    def write(self, path: Union[str, Path]):
        Path(path).write_text(self.exposition())
