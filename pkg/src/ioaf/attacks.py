"""Gradient attack engine: losses, projection, descent loop, presets.

The engine always *minimizes* the attacker loss, so a descending curve means
progress for every loss kind. Each restart records every iterate into an
attack trace; the returned perturbation follows the configured best-point
policy. All randomness flows through named substreams of the caller's rng, so
results do not depend on scheduling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DataValidationError
from .models import (
    LogitLoss,
    MlpClassifier,
    _inner_forward,
    _inner_backprop,
    _split_rejector,
    forward,
    input_gradient,
    predict,
)
from .numerics import SeededRng, as_tensor, l2_norm, log_softmax, lp_norm, sample_gaussian, softmax
from .traces import AttackTrace, TraceBuilder, config_fingerprint

NORMS = ("inf", "2")
STEP_RULES = ("sign-gradient", "raw-gradient")
LOSSES = ("cross-entropy", "logit-difference", "rejection-aware")
INITS = ("clean", "random-in-ball")
POLICIES = ("best-loss", "last-iterate")

_NORM_P = {"inf": math.inf, "2": 2.0}


@dataclass(frozen=True)
class AttackConfig:
    """Every knob of the unified attack.

    ``epsilon`` may be infinite for the unbounded sanity check, which forces
    the best-loss policy since the last iterate of an unconstrained walk is
    meaningless. ``smooth_m`` of 0 disables gradient smoothing.
    """

    norm: str = "inf"
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 50
    restarts: int = 1
    step_rule: str = "sign-gradient"
    loss: str = "cross-entropy"
    kappa: float = 0.0
    init: str = "clean"
    policy: str = "best-loss"
    smooth_m: int = 0
    smooth_sigma: float = 0.0
    targeted: bool = False
    target_class: Optional[int] = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise DataValidationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if math.isnan(self.epsilon) or self.epsilon < 0:
            raise DataValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise DataValidationError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 1:
            raise DataValidationError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise DataValidationError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_rule not in STEP_RULES:
            raise DataValidationError(
                f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}"
            )
        if self.loss not in LOSSES:
            raise DataValidationError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not math.isfinite(self.kappa):
            raise DataValidationError("kappa must be finite")
        if self.init not in INITS:
            raise DataValidationError(f"init must be one of {INITS}, got {self.init!r}")
        if self.policy not in POLICIES:
            raise DataValidationError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if math.isinf(self.epsilon) and self.policy != "best-loss":
            raise DataValidationError("infinite epsilon requires the best-loss policy")
        if self.smooth_m < 0:
            raise DataValidationError("smooth_m must be >= 0")
        if self.smooth_sigma < 0 or not math.isfinite(self.smooth_sigma):
            raise DataValidationError("smooth_sigma must be finite and >= 0")
        if self.targeted:
            if self.target_class is None or self.target_class < 0:
                raise DataValidationError("targeted attack needs a target_class >= 0")
        elif self.target_class is not None:
            raise DataValidationError("target_class is only valid with targeted=True")

    @property
    def p(self) -> float:
        return _NORM_P[self.norm]

    def to_dict(self) -> dict:
        return {
            "norm": self.norm,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "restarts": self.restarts,
            "step_rule": self.step_rule,
            "loss": self.loss,
            "kappa": self.kappa,
            "init": self.init,
            "policy": self.policy,
            "smooth_m": self.smooth_m,
            "smooth_sigma": self.smooth_sigma,
            "targeted": self.targeted,
            "target_class": self.target_class,
        }

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


_CONFIG_FIELDS = set(AttackConfig().to_dict())


def config_from_dict(doc: Mapping) -> AttackConfig:
    """Build a config from a JSON-shaped mapping, naming bad fields."""
    unknown = set(doc) - _CONFIG_FIELDS
    if unknown:
        raise DataValidationError(f"unknown config fields: {sorted(unknown)}")
    kwargs = dict(doc)
    for key in ("epsilon", "alpha", "kappa", "smooth_sigma"):
        if key in kwargs:
            v = kwargs[key]
            if isinstance(v, str) and v in ("Infinity", "inf"):
                v = math.inf
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise DataValidationError(f"config field {key!r} must be a number")
            kwargs[key] = float(v)
    for key in ("steps", "restarts", "smooth_m", "target_class"):
        if key in kwargs and kwargs[key] is not None:
            v = kwargs[key]
            if isinstance(v, bool) or not isinstance(v, int):
                raise DataValidationError(f"config field {key!r} must be an integer")
    return AttackConfig(**kwargs)


def load_config(path: Union[str, Path]) -> AttackConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: config parse error at byte {e.pos}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise DataValidationError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)


# The four weak configurations under study. Step rule, policy and init are
# the conventional weak-eval choices; alpha, epsilon, steps and restarts are
# the published ones.
PRESETS: dict[str, AttackConfig] = {
    "kwta-weak": AttackConfig(
        norm="inf", epsilon=8 / 255, alpha=0.003, steps=50, restarts=5,
        init="random-in-ball", policy="last-iterate",
    ),
    "distill-weak": AttackConfig(
        norm="inf", epsilon=0.3, alpha=0.01, steps=50, policy="last-iterate",
    ),
    "ensemble-weak": AttackConfig(
        norm="inf", epsilon=0.01, alpha=0.001, steps=10,
        init="random-in-ball", policy="last-iterate",
    ),
    "tws-weak": AttackConfig(
        norm="inf", epsilon=0.3, alpha=0.1, steps=50, policy="last-iterate",
    ),
}


def get_preset(name: str) -> AttackConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise DataValidationError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None


class CrossEntropyLoss:
    """Signed so that minimizing drives the target class probability down.

    Untargeted value is log softmax_y; targeted value is the ordinary CE
    toward the target class.
    """

    def __init__(self, targeted: bool = False, target_class: Optional[int] = None):
        self.targeted = targeted
        self.target_class = target_class

    def _check(self, logits: np.ndarray, y: int) -> int:
        c = len(logits)
        label = self.target_class if self.targeted else y
        if not 0 <= label < c:
            raise DataValidationError(f"label {label} out of range for {c} outputs")
        return label

    def value(self, logits: np.ndarray, y: int) -> float:
        label = self._check(logits, y)
        lp = float(log_softmax(logits)[label])
        return -lp if self.targeted else lp

    def logit_gradient(self, logits: np.ndarray, y: int) -> np.ndarray:
        label = self._check(logits, y)
        p = softmax(logits)
        e = np.zeros_like(logits)
        e[label] = 1.0
        return (p - e) if self.targeted else (e - p)


def _runner_up(logits: np.ndarray, skip: Sequence[int]) -> int:
    masked = logits.copy()
    masked[list(skip)] = -np.inf
    return int(np.argmax(masked))


class LogitDifferenceLoss:
    """Margin z_y - max_{j != y} z_j plus the confidence shift kappa.

    A value <= 0 means the point is misclassified with margin at least kappa.
    """

    def __init__(self, kappa: float = 0.0, targeted: bool = False,
                 target_class: Optional[int] = None):
        self.kappa = kappa
        self.targeted = targeted
        self.target_class = target_class

    def value(self, logits: np.ndarray, y: int) -> float:
        if self.targeted:
            t = self.target_class
            if not 0 <= t < len(logits):
                raise DataValidationError(f"label {t} out of range for {len(logits)} outputs")
            return float(logits[_runner_up(logits, [t])] - logits[t]) + self.kappa
        if not 0 <= y < len(logits):
            raise DataValidationError(f"label {y} out of range for {len(logits)} outputs")
        return float(logits[y] - logits[_runner_up(logits, [y])]) + self.kappa

    def logit_gradient(self, logits: np.ndarray, y: int) -> np.ndarray:
        g = np.zeros_like(logits)
        if self.targeted:
            t = self.target_class
            if not 0 <= t < len(logits):
                raise DataValidationError(f"label {t} out of range for {len(logits)} outputs")
            g[_runner_up(logits, [t])] = 1.0
            g[t] = -1.0
        else:
            if not 0 <= y < len(logits):
                raise DataValidationError(f"label {y} out of range for {len(logits)} outputs")
            g[y] = 1.0
            g[_runner_up(logits, [y])] = -1.0
        return g


class RejectionAwareLoss:
    """Margin over the real classes plus a hinge on the reject channel.

    The margin term ignores the reject channel entirely; the hinge
    max(0, z_rej - max_{j != rej} z_j) only bites while the reject channel
    leads, steering the descent away from rejected regions. Folding the
    reject channel into a plain all-channel margin instead would cancel its
    gradient exactly whenever it leads, leaving the attack blind to it.
    """

    def __init__(self, reject_label: int, kappa: float = 0.0):
        if reject_label < 1:
            raise DataValidationError("reject_label must be a positive channel index")
        self.reject_label = reject_label
        self.kappa = kappa

    def _split(self, logits: np.ndarray, y: int):
        c = self.reject_label
        if len(logits) != c + 1:
            raise DataValidationError(
                f"rejection-aware loss expects {c + 1} channels, got {len(logits)}"
            )
        if not 0 <= y < c:
            raise DataValidationError(f"label {y} out of range for {c} real classes")
        return c

    def value(self, logits: np.ndarray, y: int) -> float:
        c = self._split(logits, y)
        margin = float(logits[y] - logits[_runner_up(logits, [y, c])]) + self.kappa
        hinge = max(0.0, float(logits[c] - logits[_runner_up(logits, [c])]))
        return margin + hinge

    def logit_gradient(self, logits: np.ndarray, y: int) -> np.ndarray:
        c = self._split(logits, y)
        g = np.zeros_like(logits)
        g[y] += 1.0
        g[_runner_up(logits, [y, c])] -= 1.0
        if float(logits[c] - logits[_runner_up(logits, [c])]) > 0.0:
            g[c] += 1.0
            g[_runner_up(logits, [c])] -= 1.0
        return g


def make_loss(config: AttackConfig, reject_label: Optional[int] = None) -> LogitLoss:
    """Instantiate the configured loss; rejection-aware needs the channel index."""
    if config.loss == "cross-entropy":
        return CrossEntropyLoss(config.targeted, config.target_class)
    if config.loss == "logit-difference":
        return LogitDifferenceLoss(config.kappa, config.targeted, config.target_class)
    if reject_label is None:
        raise DataValidationError(
            "rejection-aware loss requires a model with a reject channel"
        )
    if config.targeted:
        raise DataValidationError("rejection-aware loss is untargeted only")
    return RejectionAwareLoss(reject_label, config.kappa)


def initialize(x0: np.ndarray, config: AttackConfig, rng: SeededRng) -> np.ndarray:
    """Starting perturbation: zero, or uniform in the feasible ball."""
    x0 = as_tensor(x0, name="x0")
    d = x0.shape[0]
    if config.init == "clean" or config.epsilon == 0:
        return np.zeros(d)
    gen = rng.generator
    if math.isinf(config.epsilon):
        # Unbounded ball: uniform over the box is the only proper choice.
        delta = gen.uniform(0.0, 1.0, d) - x0
    elif config.norm == "inf":
        delta = gen.uniform(-config.epsilon, config.epsilon, d)
    else:
        direction = gen.normal(size=d)
        direction /= max(l2_norm(direction), 1e-300)
        radius = config.epsilon * gen.uniform() ** (1.0 / d)
        delta = radius * direction
    return np.clip(x0 + delta, 0.0, 1.0) - x0


def project(x0: np.ndarray, delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project onto the epsilon-ball, then the box, then the ball once more.

    The box clamp operates on delta directly (bounds -x0 and 1-x0), which
    keeps feasible deltas bit-unchanged and never grows a coordinate, so the
    sup-norm composition is exact and idempotent. For the L2 norm the result
    satisfies both constraints but is not the nearest feasible point; exact
    alternating projection is out of scope.
    """
    if norm == "inf":
        if math.isfinite(epsilon):
            delta = np.clip(delta, -epsilon, epsilon)
        return np.clip(delta, -x0, 1.0 - x0)
    if math.isfinite(epsilon):
        n = l2_norm(delta)
        if n > epsilon:
            delta = delta * (epsilon / n)
    delta = np.clip(delta, -x0, 1.0 - x0)
    if math.isfinite(epsilon):
        n = l2_norm(delta)
        if n > epsilon:
            delta = delta * (epsilon / n)
    return delta


def smooth_gradient(
    model: MlpClassifier,
    x: np.ndarray,
    loss: LogitLoss,
    y: int,
    m: int,
    sigma: float,
    rng: SeededRng,
) -> np.ndarray:
    """Average the input gradient over m Gaussian neighbors of x."""
    if m < 1:
        raise DataValidationError(f"smoothing needs m >= 1, got {m}")
    if sigma == 0.0:
        # All draws collapse onto x; skip the averaging so the result is
        # bit-identical to the plain gradient.
        return input_gradient(model, x, loss, y)
    X = sample_gaussian(rng, x, sigma, m)
    if model.rejector is not None:
        grads = [input_gradient(model, X[i], loss, y) for i in range(m)]
        return np.mean(grads, axis=0)
    inner, _ = _split_rejector(model)
    logits, caches, gamma = _inner_forward(inner, X, True)
    dOut = np.stack([loss.logit_gradient(logits[i], y) for i in range(m)])
    return _inner_backprop(inner, caches, gamma, dOut).mean(axis=0)


def _is_success(model: MlpClassifier, x: np.ndarray, y: int) -> bool:
    pred = predict(model, x)
    if model.rejector is not None and pred == model.reject_label:
        return False
    return pred != y


@dataclass(frozen=True)
class AttackResult:
    """All restart traces plus the winning perturbation."""

    traces: tuple
    delta: np.ndarray
    restart_index: int

    @property
    def best_trace(self) -> AttackTrace:
        return self.traces[self.restart_index]

    @property
    def success(self) -> bool:
        return self.best_trace.returned.success_target


def _select_returned(success: Sequence[bool], losses: Sequence[float], policy: str) -> int:
    if policy == "last-iterate":
        return len(losses) - 1
    pool = [i for i, v in enumerate(losses) if math.isfinite(v)] or list(range(len(losses)))
    candidates = [i for i in pool if success[i]] or pool
    return min(candidates, key=lambda i: (losses[i], i))


def _run_restart(
    surrogate: MlpClassifier,
    target: MlpClassifier,
    x0: np.ndarray,
    y: int,
    config: AttackConfig,
    loss: LogitLoss,
    rng: SeededRng,
    sample_id: int,
    restart: int,
    clean_correct: bool,
    distinct: bool,
) -> tuple[AttackTrace, np.ndarray]:
    builder = TraceBuilder(
        sample_id=sample_id,
        label=y,
        clean_correct=clean_correct,
        config=config.to_dict(),
        restart=restart,
        surrogate_distinct=distinct,
    )
    delta = initialize(x0, config, rng.substream("init"))
    deltas = []
    succ_target = []
    losses = []
    sign_step = config.step_rule == "sign-gradient"
    for i in range(config.steps + 1):
        x = x0 + delta
        ls = loss.value(forward(surrogate, x), y)
        lt = ls if not distinct else loss.value(forward(target, x), y)
        ss = _is_success(surrogate, x, y)
        st = _is_success(target, x, y)
        dn = lp_norm(delta, config.p)
        deltas.append(delta)
        succ_target.append(st)
        losses.append(ls)
        if not (math.isfinite(ls) and math.isfinite(lt)):
            builder.record(ls, lt, math.nan, dn, ss, st)
            break
        if config.smooth_m > 0:
            g = smooth_gradient(
                surrogate, x, loss, y, config.smooth_m, config.smooth_sigma,
                rng.substream("smooth", i),
            )
        else:
            g = input_gradient(surrogate, x, loss, y)
        gn = l2_norm(g)
        builder.record(ls, lt, gn, dn, ss, st)
        if not math.isfinite(gn):
            break
        if i < config.steps:
            step = np.sign(g) if sign_step else g
            delta = project(x0, delta - config.alpha * step, config.norm, config.epsilon)
    returned = _select_returned(succ_target, losses, config.policy)
    return builder.finalize(returned), deltas[returned]


def run_attack(
    surrogate: MlpClassifier,
    target: MlpClassifier,
    x0: np.ndarray,
    y: int,
    config: AttackConfig,
    rng: SeededRng,
    sample_id: int = 0,
    loss: Optional[LogitLoss] = None,
) -> AttackResult:
    """Run every restart of the configured attack on one sample.

    The surrogate is the model the gradients come from; success and
    clean correctness are judged on the target. Passing the same object for
    both is the white-box case. A custom loss object overrides the configured
    one.
    """
    x0 = as_tensor(x0, name="x0")
    if x0.shape != (target.input_dim,) or surrogate.input_dim != target.input_dim:
        raise DataValidationError("x0 and both models must share one input dimension")
    if not 0 <= y < target.num_classes:
        raise DataValidationError(f"label {y} out of range for {target.num_classes} classes")
    distinct = surrogate is not target
    if loss is None:
        reject = surrogate.reject_label if surrogate.rejector is not None else None
        if config.loss == "rejection-aware" and distinct and (
            target.rejector is None or surrogate.rejector is None
        ):
            raise DataValidationError(
                "rejection-aware loss requires reject channels on both models"
            )
        loss = make_loss(config, reject)
    clean_correct = predict(target, x0) == y
    traces = []
    deltas = []
    for r in range(config.restarts):
        trace, delta = _run_restart(
            surrogate, target, x0, y, config, loss,
            rng.substream("restart", r), sample_id, r, clean_correct, distinct,
        )
        traces.append(trace)
        deltas.append(delta)

    def rank(r: int):
        t = traces[r]
        return (not t.returned.success_target, t.returned.loss_surrogate, r)

    best = min(range(config.restarts), key=rank)
    return AttackResult(tuple(traces), deltas[best], best)
