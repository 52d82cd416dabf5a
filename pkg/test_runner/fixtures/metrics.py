from collections import defaultdict
from typing import Dict, List

import pytest
from prometheus_client.parser import text_string_to_metric_families
from prometheus_client.samples import Sample

from kronsbl.metrics import SweepMetrics


class Metrics:
    metrics: Dict[str, List[Sample]]

    def __init__(self):
        self.metrics = defaultdict(list)

    def query_all(self, name: str, filter: Dict[str, str]) -> List[Sample]:
        return [
            sample
            for sample in self.metrics[name]
            if all(sample.labels.get(k) == v for k, v in filter.items())
        ]

    def value(self, name: str, estimator: str) -> float:
        res = self.query_all(name, {"estimator": estimator})
        assert len(res) == 1, f"expected single sample for {name} {estimator}, found {res}"
        return float(res[0].value)


def parse_metrics(text: str) -> Metrics:
    metrics = Metrics()
    for family in text_string_to_metric_families(text):
        for sample in family.samples:
            metrics.metrics[sample.name].append(sample)
    return metrics


# per-estimator samples exported by SweepMetrics once the estimator has run
SWEEP_PER_ESTIMATOR_METRICS = [
    "kronsbl_trials_total",
    "kronsbl_estimator_iterations_bucket",
    "kronsbl_estimator_iterations_count",
    "kronsbl_estimator_iterations_sum",
    "kronsbl_estimator_seconds_count",
    "kronsbl_estimator_seconds_sum",
]


@pytest.fixture(scope="function")
def sweep_metrics() -> SweepMetrics:
    return SweepMetrics()
