"""Failure indicators computed from attack traces.

Five per-sample signals diagnose why a gradient attack failed. Two are
binary: silent success (the returned point fails although the path walked
through a valid adversarial point) and non-transferability (the returned
point fools the surrogate but not the target). Three are continuous scores
on the attack path: the break-point angle of the loss curve, the share of
increasing loss variation, and the fraction of near-zero gradients.
``aggregate`` reduces a batch of traces to an ``IndicatorReport`` with
per-indicator means, activation flags and an overall mean, and the report
serializes to JSON and to a CSV table with one row per model and attack.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .errors import (
    DataValidationError,
    DegenerateInputError,
    NonFiniteEvaluationError,
)
from .traces import AttackTrace

REPORT_SCHEMA = "ioaf-indicators/1"

INDICATOR_NAMES = ("i1", "i2", "i3", "i4", "i5")
BINARY_INDICATORS = ("i1", "i5")
I3_MODES = ("variation-ratio", "increasing-area")
CONTINUOUS_SCOPES = ("all", "failed")

DEFAULT_TAU = 1e-9

# Perpendicular distances at or below this count as lying on the chord.
_FLAT_TOL = 1e-9
# Slack when checking an iterate's perturbation against the budget.
_BUDGET_TOL = 1e-9

INDICATOR_CSV_HEADER = (
    "model",
    "attack",
    "i1",
    "i2",
    "i3",
    "i4",
    "i5",
    "mean_indicator",
    "robust_accuracy",
)


@dataclass(frozen=True)
class IndicatorConfig:
    """Knobs for indicator computation and activation.

    ``tau`` is the gradient-norm threshold under which a gradient counts as
    zero. ``i3_mode`` picks the increasing-loss formula. ``continuous_scope``
    controls whether the continuous indicators average over all samples or
    only over failed attacks; the binary ones always average over failed
    attacks. Binary indicators are active when their aggregate exceeds
    ``binary_threshold``, continuous ones when theirs reaches
    ``continuous_threshold``.
    """

    tau: float = DEFAULT_TAU
    i3_mode: str = "variation-ratio"
    continuous_scope: str = "all"
    binary_threshold: float = 0.0
    continuous_threshold: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise DataValidationError(f"tau must be finite and >= 0, got {self.tau}")
        if self.i3_mode not in I3_MODES:
            raise DataValidationError(f"unknown i3 mode {self.i3_mode!r}")
        if self.continuous_scope not in CONTINUOUS_SCOPES:
            raise DataValidationError(
                f"unknown continuous scope {self.continuous_scope!r}"
            )
        for name in ("binary_threshold", "continuous_threshold"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DataValidationError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "i3_mode": self.i3_mode,
            "continuous_scope": self.continuous_scope,
            "binary_threshold": self.binary_threshold,
            "continuous_threshold": self.continuous_threshold,
        }


def _check_finite(losses: Sequence[float], what: str) -> list[float]:
    values = [float(v) for v in losses]
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteEvaluationError(f"{what} contains a non-finite value")
    return values


def silent_success(trace: AttackTrace) -> int:
    """1 when the attack failed but its path holds a valid adversarial point.

    The returned point must fail on the target while some iterate succeeds
    on the target within the perturbation budget stored in the trace config.
    """
    if trace.returned.success_target:
        return 0
    epsilon = float(trace.config.get("epsilon", math.inf))
    for it in trace.iterates:
        if it.success_target and it.delta_norm <= epsilon + _BUDGET_TOL:
            return 1
    return 0


def break_point_angle(losses: Sequence[float]) -> float:
    """|cos| of the angle at the loss curve's farthest point from its chord.

    The curve is normalized to the unit square first. A flat triangle
    (curve hugging the chord, angle near pi) scores 1 and means the loss was
    still moving at the end; a right angle (sharp drop then plateau) scores
    near 0. A constant curve scores 0 by convention.
    """
    values = _check_finite(losses, "loss curve")
    n = len(values)
    if n < 3:
        raise DegenerateInputError(f"break point needs at least 3 points, got {n}")
    lo, hi = min(values), max(values)
    if hi == lo:
        return 0.0
    xs = [i / (n - 1) for i in range(n)]
    ys = [(v - lo) / (hi - lo) for v in values]
    ax, ay = xs[0], ys[0]
    bx, by = xs[-1], ys[-1]
    chord = math.hypot(bx - ax, by - ay)
    dists = [
        abs((bx - ax) * (ay - y) - (ax - x) * (by - ay)) / chord
        for x, y in zip(xs, ys)
    ]
    peak = max(dists)
    if peak <= _FLAT_TOL:
        return 1.0
    b = dists.index(peak)
    v1 = (ax - xs[b], ay - ys[b])
    v2 = (bx - xs[b], by - ys[b])
    cos = (v1[0] * v2[0] + v1[1] * v2[1]) / (math.hypot(*v1) * math.hypot(*v2))
    return abs(max(-1.0, min(1.0, cos)))


def increasing_loss(losses: Sequence[float], mode: str = "variation-ratio") -> float:
    """Share of the loss curve's movement that goes the wrong way.

    Default mode is the variation ratio: increasing variation over total
    variation, which is 0 exactly when the curve never increases and tends
    to 1 under pure increase. The ``increasing-area`` mode instead measures
    the area under the unit-square-normalized curve restricted to
    increasing segments.
    """
    if mode not in I3_MODES:
        raise DataValidationError(f"unknown i3 mode {mode!r}")
    values = _check_finite(losses, "loss curve")
    n = len(values)
    if n < 2:
        raise DegenerateInputError(f"increasing loss needs at least 2 points, got {n}")
    if mode == "variation-ratio":
        ups = sum(max(0.0, b - a) for a, b in zip(values, values[1:]))
        total = sum(abs(b - a) for a, b in zip(values, values[1:]))
        return ups / total if total > 0 else 0.0
    lo, hi = min(values), max(values)
    if hi == lo:
        return 0.0
    ys = [(v - lo) / (hi - lo) for v in values]
    dx = 1.0 / (n - 1)
    return sum(
        (a + b) / 2.0 * dx for a, b in zip(ys, ys[1:]) if b > a
    )


def zero_gradients(grad_norms: Sequence[float], tau: float = DEFAULT_TAU) -> float:
    """Fraction of path points whose gradient norm is at most ``tau``."""
    if not (math.isfinite(tau) and tau >= 0):
        raise DataValidationError(f"tau must be finite and >= 0, got {tau}")
    norms = [float(g) for g in grad_norms]
    if not norms:
        raise DegenerateInputError("zero gradients needs at least 1 point")
    return sum(1 for g in norms if g <= tau) / len(norms)


def non_transferability(trace: AttackTrace) -> int:
    """1 when the returned point fools the surrogate but not the target."""
    r = trace.returned
    return int(trace.surrogate_distinct and r.success_surrogate and not r.success_target)


def select_best_restart(traces: Sequence[AttackTrace]) -> AttackTrace:
    """Pick the restart the attack engine would report.

    Successful restarts beat failed ones, then lower surrogate loss at the
    returned point, then the earlier restart.
    """
    if not traces:
        raise DataValidationError("no traces to select from")
    return min(
        traces,
        key=lambda t: (
            not t.returned.success_target,
            t.returned.loss_surrogate,
            t.restart,
        ),
    )


@dataclass(frozen=True)
class SampleIndicators:
    """Indicator values for one sample's best restart."""

    sample_id: int
    failed: bool
    i1: float
    i2: float
    i3: float
    i4: float
    i5: float

    def __post_init__(self):
        for name in INDICATOR_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DataValidationError(f"{name} must be in [0, 1], got {v}")
        for name in BINARY_INDICATORS:
            if getattr(self, name) not in (0.0, 1.0):
                raise DataValidationError(f"{name} must be 0 or 1")

    @property
    def values(self) -> tuple[float, float, float, float, float]:
        return (self.i1, self.i2, self.i3, self.i4, self.i5)


def _indicators_from_best(best: AttackTrace, config: IndicatorConfig) -> SampleIndicators:
    losses = [it.loss_surrogate for it in best.iterates if math.isfinite(it.loss_surrogate)]
    # Too-short curves (halted runs) carry no curve-shape signal.
    i2 = break_point_angle(losses) if len(losses) >= 3 else 0.0
    i3 = increasing_loss(losses, config.i3_mode) if len(losses) >= 2 else 0.0
    i4 = zero_gradients([it.grad_norm for it in best.iterates], config.tau)
    return SampleIndicators(
        sample_id=best.sample_id,
        failed=not best.returned.success_target,
        i1=float(silent_success(best)),
        i2=i2,
        i3=i3,
        i4=i4,
        i5=float(non_transferability(best)),
    )


def sample_indicators(
    traces: Sequence[AttackTrace], config: IndicatorConfig | None = None
) -> SampleIndicators:
    """Compute all five indicators for one sample's restarts."""
    return _indicators_from_best(select_best_restart(traces), config or IndicatorConfig())


@dataclass(frozen=True)
class IndicatorReport:
    """Aggregated indicators for a batch of attacked samples.

    ``aggregates`` holds the five per-indicator means, ``absent`` marks
    indicators that do not apply to the batch (no surrogate split for i5,
    best-point return policy for i1) and is rendered as a dash, ``active``
    applies the activation thresholds, and ``mean_indicator`` is the mean
    of the five aggregates with absent ones counted as 0.
    """

    samples: tuple[SampleIndicators, ...]
    aggregates: tuple[float, float, float, float, float]
    absent: tuple[bool, bool, bool, bool, bool]
    active: tuple[bool, bool, bool, bool, bool]
    mean_indicator: float
    num_samples: int
    num_failed: int
    config: IndicatorConfig

    def __post_init__(self):
        if self.num_samples != len(self.samples) or self.num_samples < 1:
            raise DataValidationError("sample count does not match the sample list")
        if not 0 <= self.num_failed <= self.num_samples:
            raise DataValidationError("failed count out of range")
        for v in self.aggregates + (self.mean_indicator,):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise DataValidationError(f"aggregate {v} out of [0, 1]")

    def value(self, name: str) -> float:
        return self.aggregates[INDICATOR_NAMES.index(name)]

    def is_active(self, name: str) -> bool:
        return self.active[INDICATOR_NAMES.index(name)]

    def is_absent(self, name: str) -> bool:
        return self.absent[INDICATOR_NAMES.index(name)]


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def aggregate(
    groups: Mapping[int, Sequence[AttackTrace]],
    config: IndicatorConfig | None = None,
) -> IndicatorReport:
    """Reduce traces grouped by sample to an ``IndicatorReport``.

    Per sample only the best restart counts. The binary indicators average
    over failed attacks (0 when every attack succeeded); the continuous
    ones average over all samples unless the config restricts them to
    failed ones.
    """
    cfg = config or IndicatorConfig()
    if not groups:
        raise DataValidationError("cannot aggregate an empty trace group")
    bests: list[AttackTrace] = []
    per: list[SampleIndicators] = []
    for sid in sorted(groups):
        sample_traces = groups[sid]
        if not sample_traces:
            raise DataValidationError(f"sample {sid} has no traces")
        best = select_best_restart(sample_traces)
        bests.append(best)
        per.append(_indicators_from_best(best, cfg))
    failed = [s for s in per if s.failed]
    pool = failed if cfg.continuous_scope == "failed" else per

    aggregates = (
        _mean([s.i1 for s in failed]),
        _mean([s.i2 for s in pool]),
        _mean([s.i3 for s in pool]),
        _mean([s.i4 for s in pool]),
        _mean([s.i5 for s in failed]),
    )
    absent = (
        all(t.config.get("policy") == "best-loss" for t in bests),
        False,
        False,
        False,
        not any(t.surrogate_distinct for t in bests),
    )
    active = tuple(
        (v > cfg.binary_threshold)
        if name in BINARY_INDICATORS
        else (v >= cfg.continuous_threshold)
        for name, v in zip(INDICATOR_NAMES, aggregates)
    )
    return IndicatorReport(
        samples=tuple(per),
        aggregates=aggregates,
        absent=absent,
        active=active,
        mean_indicator=_mean(aggregates),
        num_samples=len(per),
        num_failed=len(failed),
        config=cfg,
    )


def report_to_doc(report: IndicatorReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "config": report.config.to_dict(),
        "num_samples": report.num_samples,
        "num_failed": report.num_failed,
        "aggregates": dict(zip(INDICATOR_NAMES, report.aggregates)),
        "absent": dict(zip(INDICATOR_NAMES, report.absent)),
        "active": dict(zip(INDICATOR_NAMES, report.active)),
        "mean_indicator": report.mean_indicator,
        "samples": [
            {
                "sample_id": s.sample_id,
                "failed": s.failed,
                **dict(zip(INDICATOR_NAMES, s.values)),
            }
            for s in report.samples
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
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise DataValidationError(
            f"{context}: field {key!r} must be {kind.__name__}"
        )
    return value


def _indicator_map(doc: Mapping, key: str, kind, context: str) -> tuple:
    sub = _require(doc, key, dict, context)
    return tuple(_require(sub, name, kind, f"{context}.{key}") for name in INDICATOR_NAMES)


def report_from_doc(doc: Mapping) -> IndicatorReport:
    """Validate and rebuild a report from its JSON document."""
    if not isinstance(doc, Mapping):
        raise DataValidationError("indicator report must be a JSON object")
    ctx = "indicator report"
    schema = _require(doc, "schema", str, ctx)
    if schema != REPORT_SCHEMA:
        raise DataValidationError(f"{ctx}: unknown schema {schema!r}")
    cfg_doc = _require(doc, "config", dict, ctx)
    cfg = IndicatorConfig(
        tau=_require(cfg_doc, "tau", float, f"{ctx}.config"),
        i3_mode=_require(cfg_doc, "i3_mode", str, f"{ctx}.config"),
        continuous_scope=_require(cfg_doc, "continuous_scope", str, f"{ctx}.config"),
        binary_threshold=_require(cfg_doc, "binary_threshold", float, f"{ctx}.config"),
        continuous_threshold=_require(
            cfg_doc, "continuous_threshold", float, f"{ctx}.config"
        ),
    )
    samples = []
    for i, s in enumerate(_require(doc, "samples", list, ctx)):
        sctx = f"{ctx}.samples[{i}]"
        if not isinstance(s, Mapping):
            raise DataValidationError(f"{sctx}: must be an object")
        samples.append(
            SampleIndicators(
                sample_id=_require(s, "sample_id", int, sctx),
                failed=_require(s, "failed", bool, sctx),
                **{name: _require(s, name, float, sctx) for name in INDICATOR_NAMES},
            )
        )
    return IndicatorReport(
        samples=tuple(samples),
        aggregates=_indicator_map(doc, "aggregates", float, ctx),
        absent=_indicator_map(doc, "absent", bool, ctx),
        active=_indicator_map(doc, "active", bool, ctx),
        mean_indicator=_require(doc, "mean_indicator", float, ctx),
        num_samples=_require(doc, "num_samples", int, ctx),
        num_failed=_require(doc, "num_failed", int, ctx),
        config=cfg,
    )


def serialize_report(report: IndicatorReport) -> str:
    """Canonical JSON text; identical reports give identical bytes."""
    return json.dumps(
        report_to_doc(report), sort_keys=True, separators=(",", ":"), allow_nan=False
    )


def ingest_report(text: str) -> IndicatorReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataValidationError(f"indicator report parse error at byte {e.pos}") from e
    return report_from_doc(doc)


def indicator_csv_row(
    model: str,
    attack: str,
    report: IndicatorReport,
    robust_accuracy: float | None = None,
) -> list[str]:
    """One CSV row per model and attack pair; absent values render as dashes."""
    cells = [model, attack]
    for name, value, absent in zip(INDICATOR_NAMES, report.aggregates, report.absent):
        cells.append("-" if absent else repr(value))
    cells.append(repr(report.mean_indicator))
    cells.append("-" if robust_accuracy is None else repr(float(robust_accuracy)))
    return cells


def write_indicator_csv(
    path: Union[str, Path],
    entries: Iterable[tuple[str, str, IndicatorReport, float | None]],
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDICATOR_CSV_HEADER)
        for model, attack, report, ra in entries:
            writer.writerow(indicator_csv_row(model, attack, report, ra))
