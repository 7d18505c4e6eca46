"""Built-in scenarios: engineered failures the pipeline provably repairs."""

import math

import numpy as np
import pytest

from ioaf.attacks import get_preset
from ioaf.errors import DataValidationError
from ioaf.models import clean_accuracy, predict
from ioaf.numerics import SeededRng
from ioaf.protocol import (
    FAILURE_INDICATORS,
    STAGE_LABELS,
    robust_accuracy,
    run_protocol,
)
from ioaf.scenarios import SCENARIO_NAMES, build_scenario, sanity_config

from conftest import CANONICAL_SEED

EXPECTED = {
    "kwta": dict(failure="F1", preset="kwta-weak", applied=("M1",), initial=0.12),
    "ensemble": dict(failure="F2", preset="ensemble-weak", applied=("M2",),
                     initial=0.55),
    "distillation": dict(failure="F3", preset="distill-weak", applied=("M3",),
                         initial=1.00),
    "tws": dict(failure="F4", preset="tws-weak", applied=("M1", "M5"),
                initial=0.60),
}


def test_scenario_names_fixed():
    assert SCENARIO_NAMES == ("kwta", "ensemble", "distillation", "tws")


def test_unknown_scenario_rejected():
    with pytest.raises(DataValidationError):
        build_scenario("mnist")
    with pytest.raises(DataValidationError):
        sanity_config("mnist")


def test_builds_are_cached():
    assert build_scenario("ensemble", CANONICAL_SEED) is build_scenario(
        "ensemble", CANONICAL_SEED
    )


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_slice_is_clean_and_in_box(evaluations, name):
    scenario, _ = evaluations[name]
    ds = scenario.dataset
    assert len(ds) == 100
    assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0
    for i in range(len(ds)):
        assert predict(scenario.target, ds.features[i]) == int(ds.labels[i])


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_scenario_wiring(evaluations, name):
    scenario, _ = evaluations[name]
    assert scenario.name == name
    assert scenario.failure == EXPECTED[name]["failure"]
    assert scenario.weak == get_preset(EXPECTED[name]["preset"])


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_designated_indicator_active_at_initial(evaluations, name):
    scenario, report = evaluations[name]
    initial = report.stages[0]
    designated = FAILURE_INDICATORS[scenario.failure]
    assert any(initial.indicators.is_active(n) for n in designated)


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_stage_progression(evaluations, name):
    _, report = evaluations[name]
    assert tuple(s.label for s in report.stages) == STAGE_LABELS
    applied = tuple(s.label for s in report.stages if s.applied)
    assert applied == EXPECTED[name]["applied"]
    ras = [s.robust_accuracy for s in report.stages]
    assert all(a >= b for a, b in zip(ras, ras[1:]))
    assert ras[0] == pytest.approx(EXPECTED[name]["initial"], abs=1e-12)
    assert ras[-1] == 0.0


def test_mitigations_after_recovery_report_no_failed(evaluations):
    _, report = evaluations["kwta"]
    for stage in report.stages[2:6]:
        assert "no failed attacks" in stage.warning


def test_rerun_reproduces_report(evaluations):
    scenario, report = evaluations["ensemble"]
    again = run_protocol(scenario, SeededRng(CANONICAL_SEED))
    for a, b in zip(report.stages, again.stages):
        assert a.label == b.label
        assert a.robust_accuracy == b.robust_accuracy
        assert a.indicators.aggregates == b.indicators.aggregates
        assert a.fingerprint == b.fingerprint


def test_tws_surrogate_is_sloppy_but_not_chance(evaluations):
    scenario, _ = evaluations["tws"]
    assert scenario.surrogate is not scenario.target
    assert scenario.target.rejector is not None
    acc = clean_accuracy(scenario.surrogate, scenario.dataset)
    assert 0.4 < acc < 0.95


@pytest.mark.parametrize("name", SCENARIO_NAMES)
def test_sanity_config_is_unbounded(name):
    cfg = sanity_config(name)
    assert math.isinf(cfg.epsilon)
    assert cfg.policy == "best-loss"
    assert cfg.init == "random-in-ball"
    assert cfg.steps >= 200


def test_sanity_attack_flattens_ensemble(evaluations):
    scenario, _ = evaluations["ensemble"]
    ra, _ = robust_accuracy(
        scenario.target,
        scenario.target,
        scenario.dataset,
        sanity_config("ensemble"),
        SeededRng(CANONICAL_SEED).substream("sanity", "ensemble"),
    )
    assert ra == 0.0
