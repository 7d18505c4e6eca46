"""Shared fixtures; scenario builds are expensive and cached per session."""

import time

import pytest

from ioaf.cli import main as cli_main
from ioaf.numerics import SeededRng
from ioaf.protocol import run_protocol
from ioaf.scenarios import SCENARIO_NAMES, build_scenario

CANONICAL_SEED = 0

# Wall-clock seconds for building and evaluating all scenarios, filled in by
# the fixture on first use.
SUITE_TIMING = {}


@pytest.fixture(scope="session")
def evaluations():
    """Each built-in scenario with its full pipeline report at seed 0."""
    start = time.perf_counter()
    out = {}
    for name in SCENARIO_NAMES:
        scenario = build_scenario(name, CANONICAL_SEED)
        out[name] = (scenario, run_protocol(scenario, SeededRng(CANONICAL_SEED)))
    SUITE_TIMING["seconds"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def fixture_model_dir(tmp_path_factory):
    """Model and dataset files written by the train subcommand at seed 0."""
    out = tmp_path_factory.mktemp("fixture-models")
    assert cli_main(["train", "--out", str(out), "--seed", "0"]) == 0
    return out
