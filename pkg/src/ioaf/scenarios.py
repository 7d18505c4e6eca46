"""Built-in evaluation scenarios, one engineered attack failure each.

Every builder trains a small fixture classifier and assembles a hundred
sample evaluation slice whose attack outcomes are pinned down in advance:
a slice position is accepted only after the weak attack, and where needed
the mitigated attack, has been run under the exact per-position stream the
pipeline will derive for that position later. A build is a deterministic
function of (name, seed) and is verified end to end before it is returned,
so the seed handed to ``build_scenario`` must also be the stream root
passed to ``run_protocol``.

The four scenarios cover the four failure modes:

- ``kwta``: a k-winners-take-all network whose jagged loss surface makes
  the attack walk through adversarial points it does not return; repaired
  by recounting under the best-loss return policy.
- ``ensemble``: samples placed just beyond the reach of a tiny step
  budget, leaving the loss still climbing at the last iterate; repaired by
  a larger step size and more steps.
- ``distillation``: saturated logits whose cross-entropy gradients
  underflow to exact zeros and freeze the attack; repaired by switching to
  the logit-difference loss.
- ``tws``: a poorly matched surrogate in front of a rejecting target, so
  adversarial points do not transfer; repaired by attacking the target
  directly with a rejection-aware loss.
"""

from __future__ import annotations

import math
from dataclasses import replace
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np

from .attacks import AttackConfig, LogitDifferenceLoss, get_preset, run_attack
from .errors import DataValidationError, ScenarioBuildError
from .indicators import select_best_restart, silent_success
from .models import (
    Dataset,
    LogitScale,
    MlpClassifier,
    Rejector,
    forward,
    init_mlp,
    input_gradient,
    make_blobs,
    predict,
    train_sgd,
    wrap,
)
from .numerics import SeededRng
from .protocol import (
    FAILURE_INDICATORS,
    EvaluationReport,
    Scenario,
    effective_trace,
    recount_success,
    run_protocol,
)
from .traces import AttackTrace

__all__ = ["SCENARIO_NAMES", "build_scenario", "sanity_config"]

SCENARIO_NAMES = ("kwta", "ensemble", "distillation", "tws")

_SLICE = 100
_LD = LogitDifferenceLoss(0.0)


def _stage_stream(seed: int, stage: str, position: int) -> SeededRng:
    """The stream the pipeline derives for a stage and slice position."""
    return SeededRng(seed).substream("stage", stage, "sample", int(position))


def _policy_success(traces: Sequence[AttackTrace], policy: str) -> bool:
    """Sample-level success exactly as the pipeline counts it."""
    views = [effective_trace(t, policy) for t in traces]
    return bool(select_best_restart(views).returned.success_target)


def _flips_to_best_loss(traces: Sequence[AttackTrace]) -> bool:
    """True when a best-loss recount would flip the sample to success."""
    return any(recount_success(t, "best-loss") for t in traces)


def _margin(model: MlpClassifier, x: np.ndarray, y: int) -> float:
    z = forward(model, x)
    return float(z[y] - np.delete(z, y).max())


def _descent_path(
    model: MlpClassifier, x: np.ndarray, y: int, epsilon: float
) -> list[np.ndarray]:
    """Points along a damped gradient walk from x toward the boundary."""
    points: list[np.ndarray] = []
    x = x.copy()
    for _ in range(400):
        m = _margin(model, x, y)
        if m <= 0:
            break
        g = input_gradient(model, x, _LD, y)
        norm = float(np.linalg.norm(g))
        if norm < 1e-9 or not math.isfinite(norm):
            break
        points.append(x.copy())
        x = np.clip(x - min(epsilon / 3, 0.7 * m / norm) * (g / norm), 0.0, 1.0)
    return points


def _band_point(
    model: MlpClassifier, x: np.ndarray, y: int, rho: float, epsilon: float
) -> np.ndarray | None:
    """Walk x toward the boundary until its margin is near a set fraction
    of the logit gain an epsilon step can buy locally.

    The fraction rho controls how hard the returned point is to attack
    within the epsilon ball: well under 1 is reachable, near 1 is not.
    Returns the best point seen, or None when the walk never got close.
    """
    x = x.copy()
    best, best_gap = None, math.inf
    for _ in range(300):
        m = _margin(model, x, y)
        if m <= 0:
            break
        g = input_gradient(model, x, _LD, y)
        gain = float(np.abs(g).sum())
        norm = float(np.linalg.norm(g))
        if norm < 1e-9 or not math.isfinite(norm):
            break
        gap = abs(m - rho * epsilon * gain)
        if gap < best_gap:
            best, best_gap = x.copy(), gap
        if m < 0.2 * rho * epsilon * gain:
            break
        x = np.clip(x - min(epsilon / 4, 0.5 * m / norm) * (g / norm), 0.0, 1.0)
    return best


def _jittered(
    points: Sequence[tuple[np.ndarray, int]],
    fix: SeededRng,
    tag: str,
    rounds: int,
) -> Iterator[tuple[np.ndarray, int]]:
    """Each point, then jittered copies; nearby points behave alike."""
    for v in range(rounds):
        for j, (x, y) in enumerate(points):
            if v == 0:
                yield x, y
            else:
                gen = fix.substream(tag, j, v).generator
                yield np.clip(x + gen.uniform(-1e-3, 1e-3, x.shape), 0.0, 1.0), y


def _dataset(
    picks: Sequence[tuple[np.ndarray, int]], num_classes: int, name: str
) -> Dataset:
    features = np.stack([x for x, _ in picks])
    labels = np.array([y for _, y in picks], dtype=np.int64)
    return Dataset(features, labels, num_classes, name=name)


def _check_report(scenario: Scenario, report: EvaluationReport) -> None:
    initial = report.stages[0]
    designated = FAILURE_INDICATORS[scenario.failure]
    if not any(initial.indicators.is_active(n) for n in designated):
        raise ScenarioBuildError(
            f"{scenario.name} build: none of {designated} active at Initial"
        )
    final = report.stages[-1].robust_accuracy
    if final > 1e-12:
        raise ScenarioBuildError(
            f"{scenario.name} build: final robust accuracy {final:.3f}, expected 0"
        )


def _verify_build(scenario: Scenario, seed: int) -> None:
    _check_report(scenario, run_protocol(scenario, SeededRng(seed)))


def _correct_pairs(
    model: MlpClassifier, pool: Dataset
) -> Iterable[tuple[np.ndarray, int]]:
    for i in range(len(pool)):
        x, y = pool.features[i], int(pool.labels[i])
        if predict(model, x) == y:
            yield x, y


def _build_kwta(seed: int) -> Scenario:
    weak = get_preset("kwta-weak")
    fix = SeededRng(13)
    pool = make_blobs(fix.substream("fixture", "data"), 600, 20, 2, 0.1,
                      name="kwta-pool")
    net = init_mlp(
        fix.substream("fixture", "init"),
        [20, 64, 64, 2],
        activations=[("kwta", 4), ("kwta", 4), ("identity", None)],
    )
    net = train_sgd(net, pool, 60, 0.1, fix.substream("fixture", "train"))

    silent_src, succ_src = _transition_candidates(net, pool, weak, fix)
    if not silent_src:
        raise ScenarioBuildError("kwta build found no silent transition points")

    def weak_traces(x: np.ndarray, y: int, position: int):
        rng = _stage_stream(seed, "Initial", position)
        return run_attack(net, net, x, y, weak, rng, sample_id=position).traces

    # Positions 0..11 fail the returned-point count but carry an adversarial
    # iterate, so the best-loss recount flips them all. The per-sample flag
    # lives on the reported restart only, so a few flagged ones are required
    # up front to keep the aggregate above zero.
    picks: list[tuple[np.ndarray, int]] = []
    flagged = 0
    for x, y in _jittered(silent_src, fix, "jitter-silent", 16):
        if len(picks) >= 12:
            break
        if predict(net, x) != y:
            continue
        traces = weak_traces(x, y, len(picks))
        if _policy_success(traces, "last-iterate") or not _flips_to_best_loss(traces):
            continue
        has_flag = silent_success(select_best_restart(traces)) == 1
        if not has_flag and flagged < 3:
            continue
        flagged += int(has_flag)
        picks.append((x, y))
    if flagged == 0:
        raise ScenarioBuildError("kwta build found no countable silent failure")
    for x, y in _jittered(succ_src, fix, "jitter-succ", 8):
        if len(picks) >= _SLICE:
            break
        if predict(net, x) != y:
            continue
        if _policy_success(weak_traces(x, y, len(picks)), "last-iterate"):
            picks.append((x, y))
    if len(picks) < _SLICE:
        raise ScenarioBuildError(
            f"kwta build filled only {len(picks)} of {_SLICE} positions"
        )

    scenario = Scenario("kwta", net, net, _dataset(picks, 2, "kwta-slice"),
                        weak, "F1")
    _verify_build(scenario, seed)
    return scenario


def _transition_candidates(
    net: MlpClassifier, pool: Dataset, weak: AttackConfig, fix: SeededRng
) -> tuple[list[tuple[np.ndarray, int]], list[tuple[np.ndarray, int]]]:
    """Bisect the attack's success frontier along boundary-bound walks.

    Returns (silent, succ) point lists: frontier points where the attack
    failed while visiting an adversarial iterate, and points where it
    succeeds outright. Silence concentrates at the frontier.
    """
    silent: list[tuple[np.ndarray, int]] = []
    succ: list[tuple[np.ndarray, int]] = []
    sources = 0
    for i in range(len(pool)):
        if sources >= 150:
            break
        x, y = pool.features[i], int(pool.labels[i])
        if predict(net, x) != y:
            continue
        sources += 1
        path = _descent_path(net, x, y, weak.epsilon)
        if len(path) < 4:
            continue

        def outcome(idx: int) -> str:
            rng = fix.substream("harvest", i, idx)
            traces = run_attack(net, net, path[idx], y, weak, rng, sample_id=i).traces
            if _policy_success(traces, "last-iterate"):
                return "succ"
            if _flips_to_best_loss(traces):
                return "silent"
            return "fail"

        lo, hi = 0, len(path) - 1
        if outcome(hi) != "succ":
            continue
        at_lo = outcome(lo)
        if at_lo == "succ":
            succ.append((path[lo], y))
            continue
        while hi - lo > 1:
            mid = (lo + hi) // 2
            at_mid = outcome(mid)
            if at_mid == "succ":
                hi = mid
            else:
                lo, at_lo = mid, at_mid
        succ.append((path[hi], y))
        if at_lo == "silent":
            silent.append((path[lo], y))
    return silent, succ


def _build_ensemble(seed: int) -> Scenario:
    weak = get_preset("ensemble-weak")
    stronger = replace(weak, alpha=weak.alpha * 5.0, steps=max(weak.steps, 50))
    fix = SeededRng(11)
    pool = make_blobs(fix.substream("fixture", "data"), 400, 20, 3, 0.2,
                      name="ensemble-pool")
    net = init_mlp(fix.substream("fixture", "init"), [20, 32, 32, 3])
    net = train_sgd(net, pool, 60, 0.1, fix.substream("fixture", "train"))

    # Hard points sit just beyond the weak budget's reach, easy points well
    # within it; both bands hug the decision boundary.
    hard: list[tuple[np.ndarray, int]] = []
    easy: list[tuple[np.ndarray, int]] = []
    for x, y in _correct_pairs(net, pool):
        xh = _band_point(net, x, y, 0.83, weak.epsilon)
        if xh is not None and predict(net, xh) == y:
            hard.append((xh, y))
        xe = _band_point(net, x, y, 0.45, weak.epsilon)
        if xe is not None and predict(net, xe) == y:
            easy.append((xe, y))

    def traces_for(cfg: AttackConfig, stage: str, x: np.ndarray, y: int, j: int):
        rng = _stage_stream(seed, stage, j)
        return run_attack(net, net, x, y, cfg, rng, sample_id=j).traces

    picks: list[tuple[np.ndarray, int]] = []
    hard_iter = iter(hard)
    while len(picks) < 55:
        got = next(hard_iter, None)
        if got is None:
            raise ScenarioBuildError(
                f"ensemble build filled only {len(picks)} hard positions"
            )
        x, y = got
        j = len(picks)
        traces = traces_for(weak, "Initial", x, y, j)
        if _policy_success(traces, "last-iterate") or _flips_to_best_loss(traces):
            continue
        if _policy_success(traces_for(stronger, "M2", x, y, j), "last-iterate"):
            picks.append((x, y))
    easy_iter = iter(easy)
    while len(picks) < _SLICE:
        got = next(easy_iter, None)
        if got is None:
            raise ScenarioBuildError(
                f"ensemble build filled only {len(picks)} of {_SLICE} positions"
            )
        x, y = got
        if _policy_success(traces_for(weak, "Initial", x, y, len(picks)),
                           "last-iterate"):
            picks.append((x, y))

    scenario = Scenario("ensemble", net, net,
                        _dataset(picks, 3, "ensemble-slice"), weak, "F2")
    _verify_build(scenario, seed)
    return scenario


def _build_distillation(seed: int) -> Scenario:
    weak = get_preset("distill-weak")
    repaired = replace(weak, loss="logit-difference")
    fix = SeededRng(5)
    pool = make_blobs(fix.substream("fixture", "data"), 400, 10, 3, 0.08,
                      name="distillation-pool")
    net = init_mlp(fix.substream("fixture", "init"), [10, 24, 24, 3])
    net = train_sgd(net, pool, 60, 0.1, fix.substream("fixture", "train"),
                    temperature=100.0)
    # Temperature training already saturates the logits; the extra scale
    # pushes cross-entropy gradients from around 1e-90 to exact zeros.
    net = wrap(net, LogitScale(1000.0))

    picks: list[tuple[np.ndarray, int]] = []
    for x, y in _correct_pairs(net, pool):
        if len(picks) >= _SLICE:
            break
        j = len(picks)
        traces = run_attack(net, net, x, y, weak, _stage_stream(seed, "Initial", j),
                            sample_id=j).traces
        if _policy_success(traces, "last-iterate") or _flips_to_best_loss(traces):
            continue
        repaired_traces = run_attack(net, net, x, y, repaired,
                                     _stage_stream(seed, "M3", j),
                                     sample_id=j).traces
        if _policy_success(repaired_traces, "last-iterate"):
            picks.append((x, y))
    if len(picks) < _SLICE:
        raise ScenarioBuildError(
            f"distillation build filled only {len(picks)} of {_SLICE} positions"
        )

    scenario = Scenario("distillation", net, net,
                        _dataset(picks, 3, "distillation-slice"), weak, "F3")
    _verify_build(scenario, seed)
    return scenario


def _build_tws(seed: int) -> Scenario:
    weak = get_preset("tws-weak")
    fix = SeededRng(7)
    pool = make_blobs(fix.substream("fixture", "data"), 400, 8, 3, 0.07,
                      name="tws-pool")
    base = init_mlp(fix.substream("fixture", "init"), [8, 24, 24, 3])
    base = train_sgd(base, pool, 60, 0.1, fix.substream("fixture", "train"))
    # A surrogate trained on a sliver of the data learns boundaries sloppy
    # enough to block transfer while staying well above chance.
    held = Dataset(pool.features[:60], pool.labels[:60], 3,
                   name="tws-surrogate-pool")
    surrogate = init_mlp(fix.substream("fixture", "sur-init"), [8, 16, 3])
    surrogate = train_sgd(surrogate, held, 15, 0.1,
                          fix.substream("fixture", "sur-train"))
    target = wrap(base, Rejector(threshold=0.1, probes=32, radius=0.05, seed=0))

    available = [(pool.features[i], int(pool.labels[i])) for i in range(len(pool))
                 if predict(target, pool.features[i]) == int(pool.labels[i])]
    cursor = 0

    def weak_traces(x: np.ndarray, y: int, j: int):
        rng = _stage_stream(seed, "Initial", j)
        return run_attack(surrogate, target, x, y, weak, rng, sample_id=j).traces

    def direct_breaks(x: np.ndarray, y: int, j: int, policy: str) -> bool:
        cfg = replace(weak, policy=policy, loss="rejection-aware")
        rng = _stage_stream(seed, "M5", j)
        traces = run_attack(target, target, x, y, cfg, rng, sample_id=j).traces
        return _policy_success(traces, policy)

    picks: list[tuple[np.ndarray, int]] = []
    stash: list[tuple[np.ndarray, int]] = []
    while len(picks) < 60:
        if cursor >= len(available):
            raise ScenarioBuildError(
                f"tws build filled only {len(picks)} transfer-failure positions"
            )
        x, y = available[cursor]
        cursor += 1
        j = len(picks)
        traces = weak_traces(x, y, j)
        if _policy_success(traces, "last-iterate"):
            stash.append((x, y))
            continue
        if _flips_to_best_loss(traces) or direct_breaks(x, y, j, "best-loss"):
            picks.append((x, y))
    stash_iter = iter(stash)
    while len(picks) < _SLICE:
        got = next(stash_iter, None)
        if got is None:
            if cursor >= len(available):
                raise ScenarioBuildError(
                    f"tws build filled only {len(picks)} of {_SLICE} positions"
                )
            got = available[cursor]
            cursor += 1
        x, y = got
        if _policy_success(weak_traces(x, y, len(picks)), "last-iterate"):
            picks.append((x, y))

    # The mitigated rerun depends on the whole stage history, so run the
    # real pipeline and swap out any position it could not break.
    scenario = Scenario("tws", target, surrogate, _dataset(picks, 3, "tws-slice"),
                        weak, "F4")
    report = run_protocol(scenario, SeededRng(seed))
    for _ in range(6):
        bad = [s.sample_id for s in report.stages[-1].indicators.samples if s.failed]
        if not bad:
            break
        policy = "best-loss" if report.stage("M1").applied else weak.policy
        for j in bad:
            while True:
                if cursor >= len(available):
                    raise ScenarioBuildError(
                        "tws build ran out of replacement samples"
                    )
                x, y = available[cursor]
                cursor += 1
                traces = weak_traces(x, y, j)
                if _policy_success(traces, "last-iterate"):
                    continue
                if _flips_to_best_loss(traces) or direct_breaks(x, y, j, policy):
                    picks[j] = (x, y)
                    break
        scenario = Scenario("tws", target, surrogate,
                            _dataset(picks, 3, "tws-slice"), weak, "F4")
        report = run_protocol(scenario, SeededRng(seed))
    _check_report(scenario, report)
    return scenario


_BUILDERS = {
    "kwta": _build_kwta,
    "ensemble": _build_ensemble,
    "distillation": _build_distillation,
    "tws": _build_tws,
}

_SANITY = {
    "kwta": ("kwta-weak", "logit-difference", 6),
    "ensemble": ("ensemble-weak", "logit-difference", 3),
    "distillation": ("distill-weak", "logit-difference", 3),
    "tws": ("tws-weak", "rejection-aware", 3),
}


@lru_cache(maxsize=16)
def build_scenario(name: str, seed: int = 0) -> Scenario:
    """Deterministic scenario for ``name``, tuned for stream root ``seed``.

    Pass the same seed as the rng root when running the scenario through
    the pipeline; the designed stage outcomes hold only for that root.
    """
    if name not in SCENARIO_NAMES:
        raise DataValidationError(
            f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)}"
        )
    return _BUILDERS[name](int(seed))


def sanity_config(name: str) -> AttackConfig:
    """White-box attack with an unbounded budget for the named scenario.

    Confirms a fixture model has no intrinsic robustness: with an infinite
    perturbation budget, a loss that cannot underflow and the best-loss
    return policy, every initially correct sample must be attackable.
    """
    if name not in SCENARIO_NAMES:
        raise DataValidationError(
            f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)}"
        )
    preset, loss, restarts = _SANITY[name]
    return replace(
        get_preset(preset),
        epsilon=math.inf,
        alpha=0.1,
        steps=250,
        restarts=restarts,
        loss=loss,
        policy="best-loss",
        init="random-in-ball",
    )
