"""Attack trace records and the JSON-lines interchange format.

A trace stores one restart of one attack: the per-iteration losses, gradient
and perturbation norms, and success flags, plus enough run metadata (config,
sample, restart) for downstream analysis. Traces serialize canonically to one
JSON object per line under the schema tag "ioaf-trace/1"; serializing the same
trace twice yields identical bytes, and every finite float survives a
round-trip bit-exactly. Non-finite floats are encoded as the marker strings
"NaN", "Infinity" and "-Infinity".
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Union

from .errors import TraceFormatError, TraceStateError

TRACE_SCHEMA = "ioaf-trace/1"

STATUS_OK = "ok"
STATUS_HALTED = "halted_non_finite"

_MARKERS = {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}


def _encode_float(x: float) -> Union[float, str]:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return x


def _encode_value(v):
    if isinstance(v, bool) or v is None or isinstance(v, (int, str)):
        return v
    if isinstance(v, float):
        return _encode_float(v)
    if isinstance(v, Mapping):
        return {str(k): _encode_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode_value(x) for x in v]
    raise TraceFormatError(f"unsupported config value type {type(v).__name__}")


def _decode_value(v):
    if isinstance(v, str) and v in _MARKERS:
        return _MARKERS[v]
    if isinstance(v, dict):
        return {k: _decode_value(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_decode_value(x) for x in v]
    return v


def config_fingerprint(config: Mapping) -> str:
    """Twelve hex digits identifying a config, stable across key order."""
    payload = json.dumps(
        _encode_value(config), sort_keys=True, separators=(",", ":"), allow_nan=False
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _float_eq(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


@dataclass(frozen=True, eq=False)
class IterateRecord:
    """One point on the attack path.

    Losses follow the engine's minimize convention. ``grad_norm`` is the L2
    norm of the gradient the update actually used (smoothed if smoothing was
    on); ``delta_norm`` is the perturbation norm in the attack's own p-norm.
    """

    loss_surrogate: float
    loss_target: float
    grad_norm: float
    delta_norm: float
    success_surrogate: bool
    success_target: bool

    def __post_init__(self):
        for name in ("loss_surrogate", "loss_target", "grad_norm", "delta_norm"):
            v = getattr(self, name)
            if not isinstance(v, float):
                object.__setattr__(self, name, float(v))
        if math.isfinite(self.grad_norm) and self.grad_norm < 0:
            raise TraceFormatError(f"grad_norm must be >= 0, got {self.grad_norm}")
        if math.isfinite(self.delta_norm) and self.delta_norm < 0:
            raise TraceFormatError(f"delta_norm must be >= 0, got {self.delta_norm}")

    def __eq__(self, other):
        # NaN markers must round-trip, so NaN compares equal to NaN here.
        if not isinstance(other, IterateRecord):
            return NotImplemented
        return (
            _float_eq(self.loss_surrogate, other.loss_surrogate)
            and _float_eq(self.loss_target, other.loss_target)
            and _float_eq(self.grad_norm, other.grad_norm)
            and _float_eq(self.delta_norm, other.delta_norm)
            and self.success_surrogate == other.success_surrogate
            and self.success_target == other.success_target
        )

    @property
    def non_finite(self) -> bool:
        return not all(
            math.isfinite(v)
            for v in (self.loss_surrogate, self.loss_target, self.grad_norm, self.delta_norm)
        )


@dataclass(frozen=True)
class AttackTrace:
    """One restart of one attack, immutable once built."""

    sample_id: int
    label: int
    clean_correct: bool
    config: Mapping
    restart: int
    returned_index: int
    surrogate_distinct: bool
    status: str
    iterates: tuple

    def __post_init__(self):
        if not self.iterates:
            raise TraceFormatError("trace must contain at least one iterate")
        if not 0 <= self.returned_index < len(self.iterates):
            raise TraceFormatError(
                f"returned_index {self.returned_index} out of range for "
                f"{len(self.iterates)} iterates"
            )
        if self.status not in (STATUS_OK, STATUS_HALTED):
            raise TraceFormatError(f"unknown trace status {self.status!r}")
        if self.status == STATUS_OK and any(it.non_finite for it in self.iterates):
            raise TraceFormatError(
                f"non-finite iterate requires status {STATUS_HALTED!r}"
            )

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)

    @property
    def returned(self) -> IterateRecord:
        return self.iterates[self.returned_index]


class TraceBuilder:
    """Append-only recorder for a single attack restart.

    The attack loop is the only writer; ``finalize`` freezes the trace and
    further appends raise.
    """

    def __init__(
        self,
        sample_id: int,
        label: int,
        clean_correct: bool,
        config: Mapping,
        restart: int = 0,
        surrogate_distinct: bool = False,
    ):
        self._sample_id = int(sample_id)
        self._label = int(label)
        self._clean_correct = bool(clean_correct)
        self._config = dict(config)
        self._restart = int(restart)
        self._surrogate_distinct = bool(surrogate_distinct)
        self._iterates: list[IterateRecord] = []
        self._finalized = False

    def __len__(self) -> int:
        return len(self._iterates)

    @property
    def halted(self) -> bool:
        return any(it.non_finite for it in self._iterates)

    def record(
        self,
        loss_surrogate: float,
        loss_target: float,
        grad_norm: float,
        delta_norm: float,
        success_surrogate: bool,
        success_target: bool,
    ) -> IterateRecord:
        if self._finalized:
            raise TraceStateError("cannot record into a finalized trace")
        rec = IterateRecord(
            float(loss_surrogate),
            float(loss_target),
            float(grad_norm),
            float(delta_norm),
            bool(success_surrogate),
            bool(success_target),
        )
        self._iterates.append(rec)
        return rec

    def finalize(self, returned_index: int) -> AttackTrace:
        if self._finalized:
            raise TraceStateError("trace already finalized")
        self._finalized = True
        return AttackTrace(
            sample_id=self._sample_id,
            label=self._label,
            clean_correct=self._clean_correct,
            config=self._config,
            restart=self._restart,
            returned_index=int(returned_index),
            surrogate_distinct=self._surrogate_distinct,
            status=STATUS_HALTED if self.halted else STATUS_OK,
            iterates=tuple(self._iterates),
        )


_ITERATE_FIELDS = (
    "loss_surrogate",
    "loss_target",
    "grad_norm",
    "delta_norm",
    "success_surrogate",
    "success_target",
)


def trace_to_doc(trace: AttackTrace) -> dict:
    return {
        "schema": TRACE_SCHEMA,
        "sample_id": trace.sample_id,
        "label": trace.label,
        "clean_correct": trace.clean_correct,
        "surrogate_distinct": trace.surrogate_distinct,
        "restart": trace.restart,
        "returned_index": trace.returned_index,
        "status": trace.status,
        "config": _encode_value(trace.config),
        "iterates": [
            {
                "loss_surrogate": _encode_float(it.loss_surrogate),
                "loss_target": _encode_float(it.loss_target),
                "grad_norm": _encode_float(it.grad_norm),
                "delta_norm": _encode_float(it.delta_norm),
                "success_surrogate": it.success_surrogate,
                "success_target": it.success_target,
            }
            for it in trace.iterates
        ],
    }


def serialize_trace(trace: AttackTrace) -> str:
    """One canonical JSON line, without trailing newline."""
    return json.dumps(trace_to_doc(trace), sort_keys=True, separators=(",", ":"), allow_nan=False)


def _reject_constant(name: str):
    raise TraceFormatError(
        f"non-finite value {name!r} without marker; use the string form"
    )


def _require(doc: dict, key: str, kind, context: str):
    if key not in doc:
        raise TraceFormatError(f"{context}: missing field {key!r}")
    v = doc[key]
    if kind is bool:
        if not isinstance(v, bool):
            raise TraceFormatError(f"{context}: field {key!r} must be a boolean")
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise TraceFormatError(f"{context}: field {key!r} must be an integer")
    elif kind is float:
        if isinstance(v, str):
            if v not in _MARKERS:
                raise TraceFormatError(
                    f"{context}: field {key!r} has unknown marker {v!r}"
                )
            return _MARKERS[v]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TraceFormatError(f"{context}: field {key!r} must be a number")
        return float(v)
    elif not isinstance(v, kind):
        raise TraceFormatError(f"{context}: field {key!r} must be {kind.__name__}")
    return v


def ingest_trace(line: str) -> AttackTrace:
    """Parse and validate one serialized trace line."""
    try:
        doc = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise TraceFormatError(f"trace parse error at byte {e.pos}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise TraceFormatError("trace document must be a JSON object")
    schema = _require(doc, "schema", str, "trace")
    if schema != TRACE_SCHEMA:
        raise TraceFormatError(f"unsupported trace schema {schema!r}")
    iterates_raw = _require(doc, "iterates", list, "trace")
    iterates = []
    for i, raw in enumerate(iterates_raw):
        ctx = f"iterate {i}"
        if not isinstance(raw, dict):
            raise TraceFormatError(f"{ctx}: must be a JSON object")
        iterates.append(
            IterateRecord(
                _require(raw, "loss_surrogate", float, ctx),
                _require(raw, "loss_target", float, ctx),
                _require(raw, "grad_norm", float, ctx),
                _require(raw, "delta_norm", float, ctx),
                _require(raw, "success_surrogate", bool, ctx),
                _require(raw, "success_target", bool, ctx),
            )
        )
    return AttackTrace(
        sample_id=_require(doc, "sample_id", int, "trace"),
        label=_require(doc, "label", int, "trace"),
        clean_correct=_require(doc, "clean_correct", bool, "trace"),
        config=_decode_value(_require(doc, "config", dict, "trace")),
        restart=_require(doc, "restart", int, "trace"),
        returned_index=_require(doc, "returned_index", int, "trace"),
        surrogate_distinct=_require(doc, "surrogate_distinct", bool, "trace"),
        status=_require(doc, "status", str, "trace"),
        iterates=tuple(iterates),
    )


def write_traces(traces: Iterable[AttackTrace], path: Union[str, Path]) -> None:
    """Write a JSON-lines trace file, one trace per line."""
    lines = [serialize_trace(t) for t in traces]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def iter_traces(path: Union[str, Path]) -> Iterator[AttackTrace]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield ingest_trace(line)
            except TraceFormatError as e:
                raise TraceFormatError(f"{path}:{lineno}: {e}") from None


def read_traces(path: Union[str, Path]) -> list[AttackTrace]:
    return list(iter_traces(path))


def group_by_sample(traces: Iterable[AttackTrace]) -> dict[int, list[AttackTrace]]:
    """Bundle traces per sample, restarts in order."""
    groups: dict[int, list[AttackTrace]] = {}
    for t in traces:
        groups.setdefault(t.sample_id, []).append(t)
    for sample_id, group in groups.items():
        group.sort(key=lambda t: t.restart)
    return groups
