import logging.config
import os
import shutil
import zlib
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import pytest

from kronsbl.channel_sim import ChannelScenario
from kronsbl.log_helper import LOGGING, getLogger
from kronsbl.numerics import DictionaryKron, GramStructure
from kronsbl.oracles import random_dictionary

"""
This file contains the core fixtures for kronsbl tests.

- test_output_dir: a fresh directory per test, under $TEST_OUTPUT
  (default: <repo>/test_output)
- rng: a numpy Generator seeded from the test name, so every test draws the
  same numbers on every run and in every xdist worker
- make_dictionary: random DictionaryKron of a requested Gram structure

Tests can be marked with pytest.mark.slow. They are skipped unless pytest is
run with --runslow.
"""

DEFAULT_OUTPUT_DIR = "test_output"

log = getLogger("kronsbl.tests")

# set in pytest_configure()
top_output_dir = ""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: mark test as slow to run")

    global top_output_dir
    env_test_output = os.environ.get("TEST_OUTPUT")
    if env_test_output is not None:
        top_output_dir = env_test_output
    else:
        base_dir = Path(__file__).resolve().parents[2]
        top_output_dir = str(base_dir / DEFAULT_OUTPUT_DIR)
    Path(top_output_dir).mkdir(exist_ok=True)


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        # --runslow given in cli: do not skip slow tests
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="function")
def test_output_dir(request: Any) -> Iterator[Path]:
    """Create the working directory for an individual test."""
    test_dir = Path(top_output_dir) / request.node.name.replace("/", "-")
    log.info(f"test_output_dir is {test_dir}")
    shutil.rmtree(test_dir, ignore_errors=True)
    test_dir.mkdir(parents=True)
    yield test_dir


@pytest.fixture(scope="function")
def rng(request: Any) -> np.random.Generator:
    seed = zlib.crc32(request.node.nodeid.encode())
    return np.random.default_rng(seed)


@pytest.fixture(autouse=True)
def restore_logging() -> Iterator[None]:
    # the CLI detaches "kronsbl" from the root logger; reattach it for caplog
    yield
    logging.config.dictConfig(LOGGING)


@pytest.fixture(scope="function")
def make_dictionary(rng: np.random.Generator) -> Callable[..., DictionaryKron]:
    def factory(structure: GramStructure, **dims: int) -> DictionaryKron:
        return random_dictionary(rng, structure, **dims)

    return factory


@pytest.fixture(scope="function")
def small_scenario() -> ChannelScenario:
    return ChannelScenario(num_antennas=16, num_users=2, pilot_length=4, snr_db=10.0, seed=3)
