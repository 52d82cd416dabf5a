pytest_plugins = (
    "fixtures.kronsbl_fixtures",
    "fixtures.benchmark_fixture",
    "fixtures.metrics",
)
