"""Command-line surface: train fixtures, evaluate attacks, analyze traces.

Subcommands:

- ``train``: build and serialize the four fixture model families.
- ``evaluate``: run one attack configuration against one model file.
- ``indicators``: compute an indicator report from a trace file.
- ``protocol``: run a built-in scenario through the mitigation pipeline.
- ``scenarios``: run all built-in scenarios plus the correlation report.
- ``report``: render JSON reports to Markdown or CSV tables.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numerical error. Progress goes to standard error (verbosity via the
IOAF_LOG environment variable); machine output goes to files or standard
output only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .attacks import AttackConfig, PRESETS, get_preset
from .errors import DataValidationError, IoafError
from .indicators import (
    I3_MODES,
    INDICATOR_CSV_HEADER,
    IndicatorConfig,
    REPORT_SCHEMA,
    aggregate,
    indicator_csv_row,
    report_from_doc,
    serialize_report,
)
from .models import (
    Dataset,
    LogitScale,
    Rejector,
    clean_accuracy,
    init_mlp,
    load_dataset_csv,
    load_model,
    make_blobs,
    save_dataset_csv,
    save_model,
    train_sgd,
    wrap,
)
from .numerics import SeededRng
from .protocol import (
    EVALUATION_SCHEMA,
    ProtocolConfig,
    correlation_report,
    evaluation_from_doc,
    ingest_evaluation,
    render_indicator_markdown,
    render_stage_markdown,
    robust_accuracy,
    run_protocol,
    serialize_evaluation,
    stage_row,
    write_scatter_csv,
    write_stage_csv,
    STAGE_CSV_HEADER,
)
from .scenarios import SCENARIO_NAMES, build_scenario
from .traces import ingest_trace, serialize_trace

log = logging.getLogger("ioaf")

P_VALUE_METHOD = "two-sided t-distribution, n-2 dof"
EVALUATE_SCHEMA = "ioaf-evaluate/1"
CORRELATION_SCHEMA = "ioaf-correlation/1"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as exit status 1."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _eps_value(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid epsilon {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ioaf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="stream root for every random draw (default 0)")
    common.add_argument("--jobs", type=int, default=1,
                        help="per-sample worker threads (default 1)")

    p = sub.add_parser("train", parents=[common],
                       help="build and serialize the fixture models")
    p.add_argument("--out", default="models", help="output directory")

    p = sub.add_parser("evaluate", parents=[common],
                       help="run one attack configuration against one model")
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="named attack configuration to start from")
    p.add_argument("--dataset", help="dataset CSV (features...,label); "
                   "omitted: seeded blobs matched to the model")
    p.add_argument("--samples", type=int, default=100,
                   help="number of samples to attack (default 100)")
    p.add_argument("--eps", type=_eps_value, help="perturbation budget")
    p.add_argument("--alpha", type=float, help="step size")
    p.add_argument("--steps", type=int, help="iteration count")
    p.add_argument("--restarts", type=int, help="random restarts")
    p.add_argument("--loss", help="attack loss name")
    p.add_argument("--policy", help="returned-point policy")
    p.add_argument("--smooth-m", type=int, help="gradient smoothing samples")
    p.add_argument("--smooth-sigma", type=float, help="gradient smoothing width")
    p.add_argument("--traces", help="write attack traces to this JSONL file")
    p.add_argument("--out", help="write the accuracy report here (default stdout)")

    p = sub.add_parser("indicators", parents=[common],
                       help="compute an indicator report from traces")
    p.add_argument("--traces", required=True, help="trace JSONL file")
    p.add_argument("--tau", type=float, help="zero-gradient tolerance")
    p.add_argument("--i3-mode", dest="i3_mode", choices=I3_MODES,
                   help="oscillation measure")
    p.add_argument("--out", help="write the report here (default stdout)")

    p = sub.add_parser("protocol", parents=[common],
                       help="run a built-in scenario through the pipeline")
    p.add_argument("--scenario", required=True, choices=SCENARIO_NAMES)
    p.add_argument("--smooth-m", type=int, help="M3 smoothing samples")
    p.add_argument("--smooth-sigma", type=float, help="M3 smoothing width")
    p.add_argument("--out", help="write the evaluation report here "
                   "(default stdout)")

    p = sub.add_parser("scenarios", parents=[common],
                       help="run all built-in scenarios plus the correlation "
                       "report")
    p.add_argument("--out", default="reports", help="output directory")

    p = sub.add_parser("report", parents=[common],
                       help="render JSON reports to Markdown or CSV")
    p.add_argument("inputs", nargs="+", help="report JSON files")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--table", choices=("stages", "indicators"), default="stages")
    p.add_argument("--out", help="write the rendering here (default stdout)")

    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)
        log.info("wrote %s", out)


def _cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = SeededRng(args.seed)

    def finish(name, data, model):
        save_model(model, out / f"{name}.json")
        save_dataset_csv(data, out / f"{name}-data.csv")
        log.info("  %s: clean accuracy %.2f", name, clean_accuracy(model, data))

    log.info("training blobs MLP")
    data = make_blobs(rng.substream("train", "mlp", "data"), 300, 10, 3, 0.1)
    mlp = init_mlp(rng.substream("train", "mlp", "init"), [10, 24, 3])
    mlp = train_sgd(mlp, data, 40, 0.1, rng.substream("train", "mlp", "sgd"))
    finish("mlp", data, mlp)

    log.info("training kwta model")
    data = make_blobs(rng.substream("train", "kwta", "data"), 300, 12, 2, 0.1)
    kwta = init_mlp(
        rng.substream("train", "kwta", "init"),
        [12, 32, 32, 2],
        activations=[("kwta", 4), ("kwta", 4), ("identity", None)],
    )
    kwta = train_sgd(kwta, data, 40, 0.1, rng.substream("train", "kwta", "sgd"))
    finish("kwta", data, kwta)

    log.info("training distilled model")
    data = make_blobs(rng.substream("train", "distilled", "data"), 300, 10, 3, 0.08)
    distilled = init_mlp(rng.substream("train", "distilled", "init"), [10, 24, 24, 3])
    distilled = train_sgd(distilled, data, 40, 0.1,
                          rng.substream("train", "distilled", "sgd"),
                          temperature=100.0)
    distilled = wrap(distilled, LogitScale(1000.0))
    finish("distilled", data, distilled)

    log.info("training rejector-wrapped model")
    data = make_blobs(rng.substream("train", "rejector", "data"), 300, 10, 3, 0.1)
    base = init_mlp(rng.substream("train", "rejector", "init"), [10, 24, 3])
    base = train_sgd(base, data, 40, 0.1, rng.substream("train", "rejector", "sgd"))
    rejector = wrap(base, Rejector(threshold=0.1, probes=32, radius=0.05, seed=0))
    finish("rejector", data, rejector)

    log.info("wrote 4 model and 4 dataset files to %s", out)
    return 0


def _evaluate_config(args) -> AttackConfig:
    config = get_preset(args.preset) if args.preset else AttackConfig()
    overrides = {
        "epsilon": args.eps,
        "alpha": args.alpha,
        "steps": args.steps,
        "restarts": args.restarts,
        "loss": args.loss,
        "policy": args.policy,
        "smooth_m": args.smooth_m,
        "smooth_sigma": args.smooth_sigma,
    }
    changes = {k: v for k, v in overrides.items() if v is not None}
    if math.isinf(changes.get("epsilon", 0.0)) and "policy" not in changes:
        changes["policy"] = "best-loss"
    return replace(config, **changes) if changes else config


def _cmd_evaluate(args) -> int:
    model = load_model(args.model)
    config = _evaluate_config(args)
    if args.samples < 1:
        raise DataValidationError("--samples must be at least 1")
    if args.dataset:
        dataset = load_dataset_csv(args.dataset, num_classes=model.num_classes)
        if len(dataset) > args.samples:
            dataset = Dataset(
                dataset.features[: args.samples],
                dataset.labels[: args.samples],
                dataset.num_classes,
                name=dataset.name,
            )
    else:
        dataset = make_blobs(
            SeededRng(args.seed).substream("evaluate", "dataset"),
            args.samples,
            model.input_dim,
            model.num_classes,
            0.1,
            name="generated-blobs",
        )
    log.info("attacking %d samples (%s)", len(dataset), config.fingerprint)
    ra, traces = robust_accuracy(
        model, model, dataset, config, SeededRng(args.seed), jobs=args.jobs
    )
    if args.traces:
        lines = [serialize_trace(t) for t in traces]
        Path(args.traces).write_text("\n".join(lines) + "\n")
        log.info("wrote %d traces to %s", len(lines), args.traces)
    doc = {
        "schema": EVALUATE_SCHEMA,
        "model": Path(args.model).name,
        "dataset": dataset.name,
        "samples": len(dataset),
        "clean_accuracy": clean_accuracy(model, dataset),
        "robust_accuracy": ra,
        "config": config.fingerprint,
        "seed": args.seed,
    }
    _emit(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", args.out)
    return 0


def _cmd_indicators(args) -> int:
    text = Path(args.traces).read_text()
    groups: dict[int, list] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            trace = ingest_trace(line)
        except DataValidationError as e:
            raise DataValidationError(f"{args.traces}:{lineno}: {e}") from e
        groups.setdefault(trace.sample_id, []).append(trace)
    if not groups:
        raise DataValidationError(f"{args.traces}: no traces found")
    config = IndicatorConfig()
    if args.tau is not None:
        config = replace(config, tau=args.tau)
    if args.i3_mode is not None:
        config = replace(config, i3_mode=args.i3_mode)
    report = aggregate(groups, config)
    log.info("aggregated %d samples, %d failed", report.num_samples,
             report.num_failed)
    _emit(serialize_report(report) + "\n", args.out)
    return 0


def _protocol_config(args) -> ProtocolConfig:
    config = ProtocolConfig()
    if args.smooth_m is not None:
        config = replace(config, smooth_m=args.smooth_m)
    if args.smooth_sigma is not None:
        config = replace(config, smooth_sigma=args.smooth_sigma)
    return config


def _cmd_protocol(args) -> int:
    log.info("building scenario %s (seed %d)", args.scenario, args.seed)
    scenario = build_scenario(args.scenario, args.seed)
    report = run_protocol(
        scenario, SeededRng(args.seed), protocol=_protocol_config(args),
        jobs=args.jobs,
    )
    for stage in report.stages:
        log.info("  %-8s RA %5.1f%%%s", stage.label,
                 100.0 * stage.robust_accuracy,
                 " (applied)" if stage.applied else "")
    _emit(serialize_evaluation(report) + "\n", args.out)
    return 0


def _cmd_scenarios(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluations = []
    for name in SCENARIO_NAMES:
        log.info("scenario %s (seed %d)", name, args.seed)
        scenario = build_scenario(name, args.seed)
        report = run_protocol(scenario, SeededRng(args.seed), jobs=args.jobs)
        evaluations.append(report)
        (out / f"{name}.json").write_text(serialize_evaluation(report) + "\n")
        log.info("  final RA %.1f%%", 100.0 * report.stages[-1].robust_accuracy)
    r, p, rows = correlation_report(evaluations)
    write_stage_csv(out / "stages.csv", evaluations)
    (out / "stages.md").write_text(render_stage_markdown(evaluations))
    write_scatter_csv(out / "scatter.csv", rows)
    correlation = {
        "schema": CORRELATION_SCHEMA,
        "r": r,
        "p": p,
        "pairs": len(rows),
        "p_value_method": P_VALUE_METHOD,
    }
    (out / "correlation.json").write_text(
        json.dumps(correlation, sort_keys=True, separators=(",", ":")) + "\n"
    )
    log.info("correlation r=%.3f p=%.2e over %d pairs; reports in %s",
             r, p, len(rows), out)
    return 0


def _load_report_file(path: str):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict) or "schema" not in doc:
        raise DataValidationError(f"{path}: missing schema field")
    if doc["schema"] == EVALUATION_SCHEMA:
        return "evaluation", evaluation_from_doc(doc)
    if doc["schema"] == REPORT_SCHEMA:
        return "indicators", report_from_doc(doc)
    raise DataValidationError(f"{path}: unsupported schema {doc['schema']!r}")


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _cmd_report(args) -> int:
    loaded = [( path, *_load_report_file(path)) for path in args.inputs]
    kinds = {kind for _, kind, _ in loaded}
    if len(kinds) > 1:
        raise DataValidationError("cannot mix evaluation and indicator reports")
    kind = kinds.pop()
    if kind == "evaluation":
        evaluations = [r for _, _, r in loaded]
        if args.table == "stages":
            if args.format == "markdown":
                text = render_stage_markdown(evaluations)
            else:
                text = _csv_text(STAGE_CSV_HEADER,
                                 [stage_row(ev) for ev in evaluations])
        else:
            if args.format == "markdown":
                text = render_indicator_markdown(evaluations)
            else:
                rows = [
                    indicator_csv_row(ev.scenario, s.label, s.indicators,
                                      s.robust_accuracy)
                    for ev in evaluations
                    for s in ev.stages
                ]
                text = _csv_text(INDICATOR_CSV_HEADER, rows)
    else:
        if args.table != "indicators":
            raise DataValidationError(
                "indicator reports only render the indicators table"
            )
        rows = [
            indicator_csv_row(Path(path).stem, "-", report, None)
            for path, _, report in loaded
        ]
        if args.format == "csv":
            text = _csv_text(INDICATOR_CSV_HEADER, rows)
        else:
            lines = [
                "| " + " | ".join(INDICATOR_CSV_HEADER) + " |",
                "| --- | --- |" + " ---: |" * (len(INDICATOR_CSV_HEADER) - 2),
            ]
            lines += ["| " + " | ".join(row) + " |" for row in rows]
            text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "indicators": _cmd_indicators,
    "protocol": _cmd_protocol,
    "scenarios": _cmd_scenarios,
    "report": _cmd_report,
}


def _setup_logging() -> None:
    level_name = os.environ.get("IOAF_LOG", "info").upper()
    level = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(stream=sys.stderr, format="%(message)s", level=level)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("ioaf: a subcommand is required")
        if args.jobs < 1:
            raise _UsageError("ioaf: --jobs must be at least 1")
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except DataValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except IoafError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
