"""Trace recording and the JSON-lines format."""

from __future__ import annotations

import json
import math

import pytest

from ioaf.errors import TraceFormatError, TraceStateError
from ioaf.traces import (
    STATUS_HALTED,
    STATUS_OK,
    TRACE_SCHEMA,
    AttackTrace,
    IterateRecord,
    TraceBuilder,
    config_fingerprint,
    group_by_sample,
    ingest_trace,
    read_traces,
    serialize_trace,
    write_traces,
)

CONFIG = {"norm": "inf", "epsilon": 0.1, "alpha": 0.01, "steps": 3}

# Smallest well-formed document: one iterate, canonical key order.
MINIMAL_TRACE_LINE = (
    '{"clean_correct":true,"config":{"epsilon":0.1,"norm":"inf"},'
    '"iterates":[{"delta_norm":0.0,"grad_norm":1.5,"loss_surrogate":0.25,'
    '"loss_target":0.25,"success_surrogate":false,"success_target":false}],'
    '"label":1,"restart":0,"returned_index":0,"sample_id":0,'
    '"schema":"ioaf-trace/1","status":"ok","surrogate_distinct":false}'
)


def build_trace(losses=(1.0, 0.5, 0.25), returned=None, **kw):
    b = TraceBuilder(sample_id=kw.pop("sample_id", 7), label=1, clean_correct=True,
                     config=CONFIG, **kw)
    for i, loss in enumerate(losses):
        b.record(loss, loss, abs(loss) + 0.1, 0.01 * i, False, loss < 0.3)
    return b.finalize(returned if returned is not None else len(losses) - 1)


class TestBuilder:
    def test_single_record(self):
        b = TraceBuilder(0, 0, True, CONFIG)
        b.record(1.0, 1.0, 0.5, 0.0, False, False)
        assert len(b) == 1

    def test_order_preserved(self):
        t = build_trace([3.0, 2.0, 1.0, 0.5])
        assert [it.loss_surrogate for it in t.iterates] == [3.0, 2.0, 1.0, 0.5]
        assert t.returned_index == 3

    def test_nan_flags_trace(self):
        b = TraceBuilder(0, 0, True, CONFIG)
        b.record(1.0, 1.0, 0.5, 0.0, False, False)
        b.record(math.nan, 1.0, 0.5, 0.0, False, False)
        assert b.halted
        t = b.finalize(0)
        assert t.status == STATUS_HALTED
        assert t.iterates[1].non_finite

    def test_record_after_finalize(self):
        b = TraceBuilder(0, 0, True, CONFIG)
        b.record(1.0, 1.0, 0.5, 0.0, False, False)
        b.finalize(0)
        with pytest.raises(TraceStateError):
            b.record(1.0, 1.0, 0.5, 0.0, False, False)
        with pytest.raises(TraceStateError):
            b.finalize(0)

    def test_empty_finalize_rejected(self):
        with pytest.raises(TraceFormatError, match="at least one"):
            TraceBuilder(0, 0, True, CONFIG).finalize(0)

    def test_returned_index_bounds(self):
        with pytest.raises(TraceFormatError, match="returned_index"):
            build_trace([1.0, 0.5], returned=5)

    def test_negative_norms_rejected(self):
        with pytest.raises(TraceFormatError, match="grad_norm"):
            IterateRecord(1.0, 1.0, -0.5, 0.0, False, False)
        with pytest.raises(TraceFormatError, match="delta_norm"):
            IterateRecord(1.0, 1.0, 0.5, -0.1, False, False)


class TestSerialization:
    def test_round_trip_identity(self):
        t = build_trace([2.0, 1.0, 0.5, 0.25], restart=2, surrogate_distinct=True)
        assert ingest_trace(serialize_trace(t)) == t

    def test_round_trip_non_finite(self):
        b = TraceBuilder(3, 2, False, {"epsilon": math.inf, "norm": "inf"})
        b.record(1.0, 1.0, 0.5, 0.0, False, False)
        b.record(math.nan, math.inf, 0.5, 0.1, False, False)
        t = b.finalize(0)
        line = serialize_trace(t)
        assert '"NaN"' in line and '"Infinity"' in line
        back = ingest_trace(line)
        assert back == t
        assert math.isnan(back.iterates[1].loss_surrogate)
        assert back.config["epsilon"] == math.inf

    def test_canonical_bytes(self):
        t = build_trace()
        assert serialize_trace(t) == serialize_trace(t)
        assert serialize_trace(ingest_trace(serialize_trace(t))) == serialize_trace(t)

    def test_float_bits_survive(self):
        values = [0.1, 1 / 3, 2.2250738585072014e-308, 1.7976931348623157e308]
        t = build_trace(values)
        back = ingest_trace(serialize_trace(t))
        for orig, rec in zip(values, back.iterates):
            assert rec.loss_surrogate == orig

    def test_minimal_document(self):
        t = ingest_trace(MINIMAL_TRACE_LINE)
        assert t.sample_id == 0 and t.label == 1 and t.clean_correct
        assert len(t.iterates) == 1 and t.status == STATUS_OK
        assert serialize_trace(t) == MINIMAL_TRACE_LINE

    def test_truncated_document(self):
        line = serialize_trace(build_trace())
        with pytest.raises(TraceFormatError, match=r"byte \d+"):
            ingest_trace(line[:40])

    def test_unknown_schema(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        doc["schema"] = "ioaf-trace/99"
        with pytest.raises(TraceFormatError, match="ioaf-trace/99"):
            ingest_trace(json.dumps(doc))

    def test_missing_field(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        del doc["label"]
        with pytest.raises(TraceFormatError, match="'label'"):
            ingest_trace(json.dumps(doc))

    def test_missing_iterate_field(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        del doc["iterates"][0]["grad_norm"]
        with pytest.raises(TraceFormatError, match="iterate 0.*'grad_norm'"):
            ingest_trace(json.dumps(doc))

    def test_raw_nan_literal_rejected(self):
        line = MINIMAL_TRACE_LINE.replace('"loss_surrogate":0.25', '"loss_surrogate":NaN')
        with pytest.raises(TraceFormatError, match="without marker"):
            ingest_trace(line)

    def test_unknown_marker_rejected(self):
        line = MINIMAL_TRACE_LINE.replace('"loss_surrogate":0.25', '"loss_surrogate":"inf"')
        with pytest.raises(TraceFormatError, match="marker"):
            ingest_trace(line)

    def test_bad_status(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        doc["status"] = "weird"
        with pytest.raises(TraceFormatError, match="status"):
            ingest_trace(json.dumps(doc))

    def test_non_finite_requires_halted_status(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        doc["iterates"][0]["loss_target"] = "NaN"
        with pytest.raises(TraceFormatError, match=STATUS_HALTED):
            ingest_trace(json.dumps(doc))

    def test_wrong_type(self):
        doc = json.loads(MINIMAL_TRACE_LINE)
        doc["sample_id"] = "zero"
        with pytest.raises(TraceFormatError, match="'sample_id'"):
            ingest_trace(json.dumps(doc))


class TestFingerprint:
    def test_stable_across_key_order(self):
        a = config_fingerprint({"alpha": 0.01, "epsilon": 0.1})
        b = config_fingerprint({"epsilon": 0.1, "alpha": 0.01})
        assert a == b
        assert len(a) == 12
        assert all(c in "0123456789abcdef" for c in a)

    def test_distinguishes_values(self):
        assert config_fingerprint({"alpha": 0.01}) != config_fingerprint({"alpha": 0.02})

    def test_infinite_epsilon(self):
        fp = config_fingerprint({"epsilon": math.inf})
        assert fp == config_fingerprint({"epsilon": math.inf})


class TestFiles:
    def test_write_read_round_trip(self, tmp_path):
        traces = [build_trace(sample_id=i) for i in range(5)]
        path = tmp_path / "run.jsonl"
        write_traces(traces, path)
        assert read_traces(path) == traces

    def test_error_names_line(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text(MINIMAL_TRACE_LINE + "\n{broken\n")
        with pytest.raises(TraceFormatError, match=":2:"):
            read_traces(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "run.jsonl"
        path.write_text(MINIMAL_TRACE_LINE + "\n\n" + MINIMAL_TRACE_LINE + "\n")
        assert len(read_traces(path)) == 2


class TestGrouping:
    def test_groups_and_sorts_restarts(self):
        t0 = build_trace(sample_id=1, restart=1)
        t1 = build_trace(sample_id=1, restart=0)
        t2 = build_trace(sample_id=2, restart=0)
        groups = group_by_sample([t0, t1, t2])
        assert sorted(groups) == [1, 2]
        assert [t.restart for t in groups[1]] == [0, 1]
