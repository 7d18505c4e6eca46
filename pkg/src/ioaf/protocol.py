"""Security evaluation harness and the mitigation pipeline.

``robust_accuracy`` attacks every sample of a dataset and counts an attack
unsuccessful when the clean prediction is correct and the adversarial point
is still classified the same or rejected. ``run_protocol`` drives the full
evaluation of a scenario: run the weak attack, read the indicator report,
apply the mitigations M1 to M5 in order when their triggering indicator is
active, re-attack the samples that still resist after each change, and
record one stage row per mitigation. Skipped stages repeat the previous
row, so every report carries the same seven stages: Initial, M1 to M5 and
Final. ``correlation_report`` pools the per-stage (mean indicator, robust
accuracy) pairs of several evaluations into a Pearson correlation and
scatter rows.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

from .attacks import AttackConfig, _select_returned, run_attack
from .errors import DataValidationError, DegenerateInputError, IoafError
from .indicators import (
    INDICATOR_NAMES,
    IndicatorConfig,
    IndicatorReport,
    aggregate,
    report_from_doc,
    report_to_doc,
    select_best_restart,
)
from .models import Dataset, MlpClassifier
from .numerics import SeededRng, pearson_correlation
from .traces import AttackTrace

EVALUATION_SCHEMA = "ioaf-evaluation/1"

STAGE_LABELS = ("Initial", "M1", "M2", "M3", "M4", "M5", "Final")
MITIGATIONS = ("M1", "M2", "M3", "M4", "M5")
FAILURES = ("F1", "F2", "F3", "F4")

# Which indicators quantify each failure class.
FAILURE_INDICATORS = {
    "F1": ("i1",),
    "F2": ("i2", "i3"),
    "F3": ("i3", "i4"),
    "F4": ("i5",),
}

# Which indicators trigger each mitigation.
MITIGATION_TRIGGERS = {
    "M1": ("i1",),
    "M2": ("i2", "i3"),
    "M3": ("i3", "i4"),
    "M4": ("i3", "i4"),
    "M5": ("i5",),
}

SCATTER_CSV_HEADER = ("scenario", "stage", "mean_indicator", "robust_accuracy")


@dataclass(frozen=True)
class ProtocolConfig:
    """Tunables of the mitigation pipeline.

    ``m2_multiplier`` scales the step size up (indicator i2) or down
    (indicator i3 alone); ``m2_step_floor`` is the minimum iteration count
    after an increase. ``smooth_m`` and ``smooth_sigma`` parameterize the
    gradient smoothing that M3 adds when the loss keeps oscillating after a
    step-size decrease.
    """

    m2_multiplier: float = 5.0
    m2_step_floor: int = 50
    smooth_m: int = 100
    smooth_sigma: float = 0.031
    indicators: IndicatorConfig = IndicatorConfig()

    def __post_init__(self):
        if not (math.isfinite(self.m2_multiplier) and self.m2_multiplier > 1):
            raise DataValidationError(
                f"m2_multiplier must be > 1, got {self.m2_multiplier}"
            )
        if self.m2_step_floor < 1:
            raise DataValidationError(
                f"m2_step_floor must be >= 1, got {self.m2_step_floor}"
            )
        if self.smooth_m < 1:
            raise DataValidationError(f"smooth_m must be >= 1, got {self.smooth_m}")
        if not (math.isfinite(self.smooth_sigma) and self.smooth_sigma >= 0):
            raise DataValidationError(
                f"smooth_sigma must be finite and >= 0, got {self.smooth_sigma}"
            )


@dataclass(frozen=True)
class Scenario:
    """One defended model plus the weak attack that fails against it."""

    name: str
    target: MlpClassifier
    surrogate: MlpClassifier
    dataset: Dataset
    weak: AttackConfig
    failure: str

    def __post_init__(self):
        if not self.name:
            raise DataValidationError("scenario name must be nonempty")
        if self.failure not in FAILURE_INDICATORS:
            raise DataValidationError(f"unknown failure class {self.failure!r}")
        if len(self.dataset) == 0:
            raise DataValidationError("scenario dataset must be nonempty")
        if (
            self.target.input_dim != self.dataset.dim
            or self.surrogate.input_dim != self.dataset.dim
        ):
            raise DataValidationError("models and dataset disagree on input dimension")

    @property
    def designated_indicators(self) -> tuple[str, ...]:
        return FAILURE_INDICATORS[self.failure]


@dataclass(frozen=True)
class StageRecord:
    """One pipeline row: a mitigation's effect, or a repeat when skipped."""

    label: str
    robust_accuracy: float
    indicators: IndicatorReport
    fingerprint: str
    applied: bool
    warning: str | None = None

    def __post_init__(self):
        if self.label not in STAGE_LABELS:
            raise DataValidationError(f"unknown stage label {self.label!r}")
        if not (math.isfinite(self.robust_accuracy) and 0 <= self.robust_accuracy <= 1):
            raise DataValidationError(
                f"robust accuracy must be in [0, 1], got {self.robust_accuracy}"
            )


@dataclass(frozen=True)
class EvaluationReport:
    """Full pipeline output for one scenario."""

    scenario: str
    stages: tuple[StageRecord, ...]
    correlation: tuple[float, float] | None

    def __post_init__(self):
        labels = tuple(s.label for s in self.stages)
        if labels != STAGE_LABELS:
            raise DataValidationError(
                f"stages must be exactly {STAGE_LABELS}, got {labels}"
            )

    @property
    def pairs(self) -> list[tuple[float, float]]:
        """(mean indicator, robust accuracy) per stage."""
        return [(s.indicators.mean_indicator, s.robust_accuracy) for s in self.stages]

    def stage(self, label: str) -> StageRecord:
        for s in self.stages:
            if s.label == label:
                return s
        raise DataValidationError(f"unknown stage label {label!r}")


@dataclass(frozen=True)
class MitigationOutcome:
    """What one mitigation decided to do."""

    mitigation: str
    applied: bool
    config: AttackConfig
    recount_only: bool = False
    switch_surrogate: bool = False
    alpha_branch: str | None = None
    warning: str | None = None


def recount_success(trace: AttackTrace, policy: str = "best-loss") -> bool:
    """Success flag the trace would report under another return policy.

    Pure recount from the stored per-iterate flags; the trace itself is
    never modified.
    """
    succ = [it.success_target for it in trace.iterates]
    losses = [it.loss_surrogate for it in trace.iterates]
    return succ[_select_returned(succ, losses, policy)]


def effective_trace(trace: AttackTrace, policy: str) -> AttackTrace:
    """View of a trace under the current return policy.

    Traces recorded under another policy get their returned index
    recomputed in a copy; stored traces stay bitwise identical.
    """
    if trace.config.get("policy") == policy:
        return trace
    succ = [it.success_target for it in trace.iterates]
    losses = [it.loss_surrogate for it in trace.iterates]
    config = dict(trace.config)
    config["policy"] = policy
    return replace(
        trace,
        returned_index=_select_returned(succ, losses, policy),
        config=config,
    )


def _attack_batch(
    target: MlpClassifier,
    surrogate: MlpClassifier,
    dataset: Dataset,
    ids: Sequence[int],
    config: AttackConfig,
    rng: SeededRng,
    stage: str,
    jobs: int,
) -> dict[int, tuple[AttackTrace, ...]]:
    """Attack the listed samples; deterministic for any job count."""

    def one(i: int) -> tuple[int, tuple[AttackTrace, ...]]:
        sub = rng.substream("stage", stage, "sample", int(i))
        result = run_attack(
            surrogate,
            target,
            dataset.features[i],
            int(dataset.labels[i]),
            config,
            sub,
            sample_id=int(i),
        )
        return i, result.traces

    if jobs <= 1:
        return dict(one(i) for i in ids)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return dict(pool.map(one, ids))


def robust_accuracy(
    target: MlpClassifier,
    surrogate: MlpClassifier,
    dataset: Dataset,
    config: AttackConfig,
    rng: SeededRng,
    jobs: int = 1,
) -> tuple[float, list[AttackTrace]]:
    """Attack every sample and count the robust ones.

    A sample counts as robust when its clean prediction is correct and the
    attack's returned point is still classified the same or rejected.
    Samples misclassified before the attack count as successful attacks.
    """
    if len(dataset) == 0:
        raise DataValidationError("robust accuracy needs a nonempty dataset")
    batches = _attack_batch(
        target, surrogate, dataset, range(len(dataset)), config, rng, "attack", jobs
    )
    robust = 0
    traces: list[AttackTrace] = []
    for i in sorted(batches):
        sample_traces = batches[i]
        traces.extend(sample_traces)
        best = select_best_restart(sample_traces)
        if best.clean_correct and not best.returned.success_target:
            robust += 1
    return robust / len(dataset), traces


def apply_mitigation(
    mitigation: str,
    config: AttackConfig,
    report: IndicatorReport,
    protocol: ProtocolConfig | None = None,
    *,
    target_has_reject: bool = False,
    alpha_decreased: bool = False,
) -> MitigationOutcome:
    """Turn one mitigation's rule into a config change.

    A mitigation whose triggering indicator is inactive returns a no-op
    outcome with a warning instead of raising.
    """
    pc = protocol or ProtocolConfig()
    if mitigation not in MITIGATION_TRIGGERS:
        raise DataValidationError(f"unknown mitigation {mitigation!r}")
    triggers = MITIGATION_TRIGGERS[mitigation]
    if not any(report.is_active(name) for name in triggers):
        return MitigationOutcome(
            mitigation=mitigation,
            applied=False,
            config=config,
            warning=f"{mitigation} skipped: no triggering indicator "
            f"({', '.join(triggers)}) is active",
        )
    if mitigation == "M1":
        return MitigationOutcome(
            mitigation, True, replace(config, policy="best-loss"), recount_only=True
        )
    if mitigation == "M2":
        if report.is_active("i2"):
            new = replace(
                config,
                alpha=config.alpha * pc.m2_multiplier,
                steps=max(config.steps, pc.m2_step_floor),
            )
            return MitigationOutcome(mitigation, True, new, alpha_branch="increase")
        new = replace(config, alpha=config.alpha / pc.m2_multiplier)
        return MitigationOutcome(mitigation, True, new, alpha_branch="decrease")
    if mitigation == "M3":
        new = replace(config, loss="logit-difference")
        if alpha_decreased and report.is_active("i3"):
            new = replace(new, smooth_m=pc.smooth_m, smooth_sigma=pc.smooth_sigma)
        return MitigationOutcome(mitigation, True, new)
    if mitigation == "M4":
        new = replace(config, restarts=max(config.restarts, 5), init="random-in-ball")
        return MitigationOutcome(mitigation, True, new)
    new = replace(config, loss="rejection-aware") if target_has_reject else config
    return MitigationOutcome(mitigation, True, new, switch_surrogate=True)


class _PipelineState:
    """Current traces, clean flags and policy view during a protocol run."""

    def __init__(self, scenario: Scenario, indicators: IndicatorConfig):
        self.scenario = scenario
        self.indicators = indicators
        self.traces: dict[int, tuple[AttackTrace, ...]] = {}
        self.clean: dict[int, bool] = {}

    def absorb(self, batches: Mapping[int, tuple[AttackTrace, ...]]) -> None:
        for i, sample_traces in batches.items():
            self.traces[i] = sample_traces
            self.clean[i] = sample_traces[0].clean_correct

    def snapshot(self, policy: str) -> tuple[float, IndicatorReport, list[int]]:
        """Robust accuracy, indicator report and failed ids under a policy."""
        groups = {
            sid: [effective_trace(t, policy) for t in sample_traces]
            for sid, sample_traces in self.traces.items()
        }
        report = aggregate(groups, self.indicators)
        robust = 0
        failed: list[int] = []
        for sid in sorted(groups):
            success = select_best_restart(groups[sid]).returned.success_target
            if not success:
                failed.append(sid)
            if self.clean[sid] and not success:
                robust += 1
        return robust / len(groups), report, failed


def run_protocol(
    scenario: Scenario,
    rng: SeededRng,
    protocol: ProtocolConfig | None = None,
    jobs: int = 1,
) -> EvaluationReport:
    """Evaluate a scenario through the full mitigation pipeline.

    Stages are sequential; the per-sample attacks inside a stage draw from
    per-sample substreams, so any job count yields identical output. After
    an applied M5 the still-failed samples get one extra round: the
    mitigations M1 to M4 are re-checked against the post-M5 report and any
    newly triggered ones are folded into the Final stage.
    """
    pc = protocol or ProtocolConfig()
    state = _PipelineState(scenario, pc.indicators)
    config = scenario.weak
    surrogate = scenario.surrogate
    target = scenario.target

    def attack(ids: Sequence[int], stage: str) -> None:
        try:
            state.absorb(
                _attack_batch(
                    target, surrogate, scenario.dataset, ids, config, rng, stage, jobs
                )
            )
        except IoafError as e:
            e.args = (f"stage {stage}: {e}",)
            raise

    attack(range(len(scenario.dataset)), "Initial")
    ra, report, failed = state.snapshot(config.policy)
    stages = [StageRecord("Initial", ra, report, config.fingerprint, applied=False)]
    alpha_decreased = False

    for mitigation in MITIGATIONS:
        previous = stages[-1]
        if not failed:
            # Every attack succeeded; there is nothing left to mitigate.
            stages.append(replace(previous, label=mitigation, applied=False,
                                  warning=f"{mitigation} skipped: no failed attacks"))
            continue
        outcome = apply_mitigation(
            mitigation,
            config,
            previous.indicators,
            pc,
            target_has_reject=target.rejector is not None,
            alpha_decreased=alpha_decreased,
        )
        if not outcome.applied:
            stages.append(replace(previous, label=mitigation, applied=False,
                                  warning=outcome.warning))
            continue
        config = outcome.config
        if outcome.alpha_branch == "decrease":
            alpha_decreased = True
        if outcome.switch_surrogate:
            surrogate = target
        if not outcome.recount_only:
            attack(failed, mitigation)
        ra, report, failed = state.snapshot(config.policy)
        stages.append(StageRecord(mitigation, ra, report, config.fingerprint, True))

    m5 = stages[-1]
    final = replace(m5, label="Final", applied=False, warning=None)
    if m5.applied and failed:
        retriggered = False
        needs_attack = False
        for mitigation in ("M1", "M2", "M3", "M4"):
            outcome = apply_mitigation(
                mitigation,
                config,
                m5.indicators,
                pc,
                target_has_reject=target.rejector is not None,
                alpha_decreased=alpha_decreased,
            )
            if not outcome.applied:
                continue
            retriggered = True
            config = outcome.config
            if outcome.alpha_branch == "decrease":
                alpha_decreased = True
            if not outcome.recount_only:
                needs_attack = True
        if retriggered:
            if needs_attack:
                attack(failed, "Final")
            ra, report, failed = state.snapshot(config.policy)
            final = StageRecord("Final", ra, report, config.fingerprint, True)
    stages.append(final)

    pairs = [(s.indicators.mean_indicator, s.robust_accuracy) for s in stages]
    try:
        correlation = pearson_correlation(
            [p[0] for p in pairs], [p[1] for p in pairs]
        )
    except DegenerateInputError:
        correlation = None
    return EvaluationReport(
        scenario=scenario.name, stages=tuple(stages), correlation=correlation
    )


def correlation_report(
    evaluations: Sequence[EvaluationReport],
) -> tuple[float, float, list[tuple[str, str, float, float]]]:
    """Pearson r and p over all stage pairs, plus scatter rows.

    Scatter rows are (scenario, stage, mean indicator, robust accuracy),
    one per stage of every evaluation.
    """
    rows = [
        (ev.scenario, s.label, s.indicators.mean_indicator, s.robust_accuracy)
        for ev in evaluations
        for s in ev.stages
    ]
    if len(rows) < 3:
        raise DegenerateInputError(
            f"correlation needs at least 3 stage pairs, got {len(rows)}"
        )
    r, p = pearson_correlation([row[2] for row in rows], [row[3] for row in rows])
    return r, p, rows


def write_scatter_csv(
    path: Union[str, Path], rows: Sequence[tuple[str, str, float, float]]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCATTER_CSV_HEADER)
        for scenario, stage, mean_indicator, ra in rows:
            writer.writerow([scenario, stage, repr(float(mean_indicator)), repr(float(ra))])


def evaluation_to_doc(report: EvaluationReport) -> dict:
    return {
        "schema": EVALUATION_SCHEMA,
        "scenario": report.scenario,
        "correlation": None
        if report.correlation is None
        else {"r": report.correlation[0], "p": report.correlation[1]},
        "stages": [
            {
                "label": s.label,
                "robust_accuracy": s.robust_accuracy,
                "fingerprint": s.fingerprint,
                "applied": s.applied,
                "warning": s.warning,
                "indicators": report_to_doc(s.indicators),
            }
            for s in report.stages
        ],
    }


def _require(doc: Mapping, key: str, kind, context: str):
    if key not in doc:
        raise DataValidationError(f"{context}: missing field {key!r}")
    value = doc[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataValidationError(f"{context}: field {key!r} must be a number")
        return float(value)
    if not isinstance(value, kind):
        raise DataValidationError(f"{context}: field {key!r} must be {kind.__name__}")
    return value


def evaluation_from_doc(doc: Mapping) -> EvaluationReport:
    if not isinstance(doc, Mapping):
        raise DataValidationError("evaluation report must be a JSON object")
    ctx = "evaluation report"
    schema = _require(doc, "schema", str, ctx)
    if schema != EVALUATION_SCHEMA:
        raise DataValidationError(f"{ctx}: unknown schema {schema!r}")
    correlation_doc = doc.get("correlation")
    correlation = None
    if correlation_doc is not None:
        if not isinstance(correlation_doc, Mapping):
            raise DataValidationError(f"{ctx}: correlation must be an object or null")
        correlation = (
            _require(correlation_doc, "r", float, f"{ctx}.correlation"),
            _require(correlation_doc, "p", float, f"{ctx}.correlation"),
        )
    stages = []
    for i, s in enumerate(_require(doc, "stages", list, ctx)):
        sctx = f"{ctx}.stages[{i}]"
        if not isinstance(s, Mapping):
            raise DataValidationError(f"{sctx}: must be an object")
        warning = s.get("warning")
        if warning is not None and not isinstance(warning, str):
            raise DataValidationError(f"{sctx}: warning must be a string or null")
        stages.append(
            StageRecord(
                label=_require(s, "label", str, sctx),
                robust_accuracy=_require(s, "robust_accuracy", float, sctx),
                indicators=report_from_doc(_require(s, "indicators", dict, sctx)),
                fingerprint=_require(s, "fingerprint", str, sctx),
                applied=_require(s, "applied", bool, sctx),
                warning=warning,
            )
        )
    return EvaluationReport(
        scenario=_require(doc, "scenario", str, ctx),
        stages=tuple(stages),
        correlation=correlation,
    )


def serialize_evaluation(report: EvaluationReport) -> str:
    """Canonical JSON text; identical reports give identical bytes."""
    return json.dumps(
        evaluation_to_doc(report), sort_keys=True, separators=(",", ":"), allow_nan=False
    )


def ingest_evaluation(text: str) -> EvaluationReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataValidationError(f"evaluation parse error at byte {e.pos}") from e
    return evaluation_from_doc(doc)


STAGE_CSV_HEADER = ("scenario",) + STAGE_LABELS


def stage_row(report: EvaluationReport) -> list[str]:
    """Scenario name plus per-stage robust accuracy in percent, 1 decimal."""
    return [report.scenario] + [
        f"{100.0 * s.robust_accuracy:.1f}" for s in report.stages
    ]


def render_stage_markdown(evaluations: Sequence[EvaluationReport]) -> str:
    """Markdown table of robust accuracies, one row per scenario."""
    lines = [
        "| " + " | ".join(STAGE_CSV_HEADER) + " |",
        "| --- |" + " ---: |" * len(STAGE_LABELS),
    ]
    for ev in evaluations:
        lines.append("| " + " | ".join(stage_row(ev)) + " |")
    return "\n".join(lines) + "\n"


def write_stage_csv(
    path: Union[str, Path], evaluations: Sequence[EvaluationReport]
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STAGE_CSV_HEADER)
        for ev in evaluations:
            writer.writerow(stage_row(ev))


def parse_stage_table(text: str) -> dict[str, tuple[float, ...]]:
    """Stage accuracies (as fractions) read back from a rendered table.

    Accepts the Markdown and the CSV layout produced above; the inverse of
    the renderers up to the printed precision.
    """
    rows: list[list[str]] = []
    stripped = text.strip()
    if stripped.startswith("|"):
        for line in stripped.splitlines():
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            if cells == [""]:
                continue
            if all(c and set(c) <= set("-:") for c in cells):
                continue
            rows.append(cells)
    else:
        rows = [list(r) for r in csv.reader(stripped.splitlines()) if r]
    if not rows:
        raise DataValidationError("stage table: no rows found")
    header = tuple(rows[0])
    if header != STAGE_CSV_HEADER:
        raise DataValidationError(
            f"stage table: header {header!r} does not match {STAGE_CSV_HEADER!r}"
        )
    parsed: dict[str, tuple[float, ...]] = {}
    for cells in rows[1:]:
        if len(cells) != len(STAGE_CSV_HEADER):
            raise DataValidationError(
                f"stage table: row has {len(cells)} cells, expected "
                f"{len(STAGE_CSV_HEADER)}"
            )
        try:
            values = tuple(float(c) / 100.0 for c in cells[1:])
        except ValueError as e:
            raise DataValidationError(f"stage table: {e}") from e
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise DataValidationError(
                    f"stage table: accuracy {100 * v:.1f} outside 0..100"
                )
        parsed[cells[0]] = values
    return parsed


def render_indicator_markdown(evaluations: Sequence[EvaluationReport]) -> str:
    """Markdown indicator table, one row per scenario stage.

    Columns hold the aggregate indicator values, their mean and the robust
    accuracy; absent indicators render as dashes.
    """
    names = [n.upper() for n in INDICATOR_NAMES]
    lines = [
        "| scenario | stage | " + " | ".join(names) + " | mean | RA |",
        "| --- | --- |" + " ---: |" * (len(names) + 2),
    ]
    for ev in evaluations:
        for s in ev.stages:
            cells = [ev.scenario, s.label]
            for value, absent in zip(s.indicators.aggregates, s.indicators.absent):
                cells.append("-" if absent else f"{value:.2f}")
            cells.append(f"{s.indicators.mean_indicator:.2f}")
            cells.append(f"{100.0 * s.robust_accuracy:.1f}")
            lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
