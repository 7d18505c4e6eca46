"""Small differentiable classifiers, defense wrappers, training, datasets.

Models are plain MLPs (affine layers with relu / kwta / identity activations)
plus an ordered list of defense wrappers:

- logit_scale(gamma): multiplies logits, saturating softmax losses;
- kwta_activation(k): keeps only the k largest post-activation outputs of
  every hidden layer;
- rejector(t, m, r): probes m fixed offsets in an L-inf ball of radius r and
  rejects inputs whose neighborhood disagrees with their own prediction on
  more than a fraction t of probes.

forward() of a rejector-wrapped model appends one extra channel holding a
differentiable surrogate of the rejection score; accept/reject decisions
always use the hard probe-fraction rule (reject_or_classify / predict).
REJECT is reported as class index c so downstream code needs no special case.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence, Union

import numpy as np

from .errors import DataValidationError, TrainingDivergenceError
from .numerics import SeededRng, as_tensor, log_softmax, softmax

MODEL_SCHEMA = "ioaf-model/1"

ACTIVATIONS = ("relu", "identity", "kwta")


class LogitLoss(Protocol):
    """Scalar loss over logits, with an analytic logit gradient."""

    def value(self, logits: np.ndarray, y: int) -> float: ...

    def logit_gradient(self, logits: np.ndarray, y: int) -> np.ndarray: ...


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"
    k: int | None = None  # kwta width, only for activation == "kwta"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise DataValidationError(
                f"layer shapes incompatible: weights {w.shape}, bias {b.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise DataValidationError(f"unknown activation {self.activation!r}")
        if self.activation == "kwta":
            if self.k is None or not 1 <= self.k <= w.shape[0]:
                raise DataValidationError(
                    f"kwta k must be in [1, {w.shape[0]}], got {self.k}"
                )
        elif self.k is not None:
            raise DataValidationError("k is only meaningful for kwta activation")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LogitScale:
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise DataValidationError(f"logit_scale gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class KwtaActivation:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise DataValidationError(f"kwta_activation k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class Rejector:
    threshold: float = 0.1
    probes: int = 64
    radius: float = 0.05
    seed: int = 0
    # Parameters of the differentiable surrogate channel only.
    sharpness: float = 0.05
    scale: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise DataValidationError("rejector threshold must be finite")
        if self.probes < 0:
            raise DataValidationError(f"rejector probes must be >= 0, got {self.probes}")
        if self.radius < 0:
            raise DataValidationError(f"rejector radius must be >= 0, got {self.radius}")
        if self.sharpness <= 0 or self.scale <= 0:
            raise DataValidationError("rejector sharpness and scale must be positive")


Wrapper = Union[LogitScale, KwtaActivation, Rejector]


@dataclass(frozen=True)
class MlpClassifier:
    layers: tuple[Layer, ...]
    num_classes: int
    wrappers: tuple[Wrapper, ...] = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DataValidationError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DataValidationError(
                    f"layer dimensions incompatible: {a.out_dim} -> {b.in_dim}"
                )
        if layers[-1].out_dim != self.num_classes:
            raise DataValidationError(
                f"final layer width {layers[-1].out_dim} != num_classes {self.num_classes}"
            )
        if self.num_classes < 2:
            raise DataValidationError("need at least 2 classes")
        wrappers = tuple(self.wrappers)
        rejectors = [i for i, w in enumerate(wrappers) if isinstance(w, Rejector)]
        if len(rejectors) > 1:
            raise DataValidationError("at most one rejector wrapper is supported")
        if rejectors and rejectors[0] != len(wrappers) - 1:
            raise DataValidationError("the rejector must be the last wrapper")
        for w in wrappers:
            if isinstance(w, KwtaActivation):
                # Applies to every hidden layer; the narrowest one bounds k.
                hidden = layers[:-1]
                if hidden and w.k > min(l.out_dim for l in hidden):
                    raise DataValidationError(
                        f"kwta_activation k={w.k} exceeds a hidden layer width"
                    )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "wrappers", wrappers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def rejector(self) -> Rejector | None:
        if self.wrappers and isinstance(self.wrappers[-1], Rejector):
            return self.wrappers[-1]
        return None

    @property
    def output_dim(self) -> int:
        return self.num_classes + (1 if self.rejector is not None else 0)

    @property
    def reject_label(self) -> int:
        return self.num_classes


def wrap(model: MlpClassifier, wrapper: Wrapper) -> MlpClassifier:
    """Return a copy of the model with one more defense wrapper appended."""
    return replace(model, wrappers=model.wrappers + (wrapper,))


def kwta(activations: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries, zero the rest.

    Ties break toward the lower index. Idempotent, and the output has
    exactly min(k, number of nonzero inputs) nonzero entries.
    """
    v = np.asarray(activations, dtype=np.float64)
    if v.ndim != 1:
        raise DataValidationError(f"kwta expects a 1-D tensor, got shape {v.shape}")
    if not 1 <= k <= v.size:
        raise DataValidationError(f"kwta k must be in [1, {v.size}], got {k}")
    return v * _kwta_mask(v[None, :], k)[0]


def _kwta_mask(Z: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-np.abs(Z), axis=-1, kind="stable")
    mask = np.zeros(Z.shape, dtype=np.float64)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def _split_rejector(model: MlpClassifier) -> tuple[MlpClassifier, Rejector | None]:
    rej = model.rejector
    if rej is None:
        return model, None
    return replace(model, wrappers=model.wrappers[:-1]), rej


def _inner_forward(model: MlpClassifier, X: np.ndarray, want_cache: bool):
    """Forward through layers and non-rejector wrappers.

    Returns (logits, caches, gamma) where caches hold per layer the input
    activations and the elementwise d(activation)/d(preactivation) mask.
    """
    kwta_k = None
    gamma = 1.0
    for w in model.wrappers:
        if isinstance(w, KwtaActivation):
            kwta_k = w.k
        elif isinstance(w, LogitScale):
            gamma *= w.gamma
        else:
            raise DataValidationError("rejector must be split off before inner forward")
    caches = [] if want_cache else None
    A = X
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        Z = A @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            mask = (Z > 0).astype(np.float64)
            out = Z * mask
        elif layer.activation == "kwta":
            mask = _kwta_mask(Z, layer.k)
            out = Z * mask
        else:
            mask = np.ones_like(Z)
            out = Z
        if kwta_k is not None and i != last:
            wmask = _kwta_mask(out, kwta_k)
            out = out * wmask
            mask = mask * wmask
        if want_cache:
            caches.append((A, mask))
        A = out
    return gamma * A, caches, gamma


def _inner_backprop(model: MlpClassifier, caches, gamma: float, dOut: np.ndarray) -> np.ndarray:
    """Input cotangent of the inner forward; dOut has shape (n, c)."""
    G = gamma * dOut
    for layer, (_, mask) in zip(reversed(model.layers), reversed(caches)):
        G = (G * mask) @ layer.weights
    return G


@functools.lru_cache(maxsize=64)
def _rejector_offsets(seed: int, probes: int, radius: float, dim: int) -> np.ndarray:
    rng = SeededRng(seed, ("rejector-probes",))
    return rng.generator.uniform(-radius, radius, size=(probes, dim))


def _check_input(model: MlpClassifier, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = 2 if batched else 1
    if x.ndim != want or x.shape[-1] != model.input_dim:
        raise DataValidationError(
            f"input shape {x.shape} does not match model input dimension {model.input_dim}"
        )
    return x


def _rejection_stats(inner: MlpClassifier, rej: Rejector, X: np.ndarray):
    """Per row: base argmax, hard disagree fraction, smooth score S."""
    n, d = X.shape
    Z, _, _ = _inner_forward(inner, X, want_cache=False)
    base_argmax = np.argmax(Z, axis=1)
    if rej.probes == 0:
        zero = np.zeros(n)
        return Z, base_argmax, zero, zero
    offsets = _rejector_offsets(rej.seed, rej.probes, rej.radius, d)
    P = (X[:, None, :] + offsets[None, :, :]).reshape(n * rej.probes, d)
    Zp, _, _ = _inner_forward(inner, P, want_cache=False)
    Zp = Zp.reshape(n, rej.probes, inner.num_classes)
    probe_argmax = np.argmax(Zp, axis=2)
    fraction = np.mean(probe_argmax != base_argmax[:, None], axis=1)
    own = np.take_along_axis(Zp, base_argmax[:, None, None], axis=2)[:, :, 0]
    masked = Zp.copy()
    np.put_along_axis(masked, base_argmax[:, None, None], -np.inf, axis=2)
    margin = own - np.max(masked, axis=2)
    smooth = np.mean(_sigmoid(-margin / rej.sharpness), axis=1)
    return Z, base_argmax, fraction, smooth


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward_batch(model: MlpClassifier, X: np.ndarray) -> np.ndarray:
    X = _check_input(model, X, batched=True)
    inner, rej = _split_rejector(model)
    if rej is None:
        Z, _, _ = _inner_forward(inner, X, want_cache=False)
        return Z
    Z, _, _, smooth = _rejection_stats(inner, rej, X)
    score = np.max(Z, axis=1) + rej.scale * (smooth - rej.threshold)
    return np.concatenate([Z, score[:, None]], axis=1)


def forward(model: MlpClassifier, x: np.ndarray) -> np.ndarray:
    return forward_batch(model, _check_input(model, x, batched=False)[None, :])[0]


def predict_batch(model: MlpClassifier, X: np.ndarray) -> np.ndarray:
    """Hard labels; rejector models return the reject label (index c) for rejected rows."""
    X = _check_input(model, X, batched=True)
    inner, rej = _split_rejector(model)
    if rej is None:
        Z, _, _ = _inner_forward(inner, X, want_cache=False)
        return np.argmax(Z, axis=1)
    _, base_argmax, fraction, _ = _rejection_stats(inner, rej, X)
    labels = base_argmax.copy()
    labels[fraction > rej.threshold] = model.reject_label
    return labels


def predict(model: MlpClassifier, x: np.ndarray) -> int:
    return int(predict_batch(model, _check_input(model, x, batched=False)[None, :])[0])


def reject_or_classify(model: MlpClassifier, x: np.ndarray) -> int:
    """Hard probe-fraction decision; requires a rejector wrapper."""
    if model.rejector is None:
        raise DataValidationError("reject_or_classify needs a rejector wrapper")
    return predict(model, x)


def input_gradient(model: MlpClassifier, x: np.ndarray, loss: LogitLoss, y: int) -> np.ndarray:
    """Analytic gradient of the scalar attacker loss w.r.t. the input."""
    x = _check_input(model, x, batched=False)
    X = x[None, :]
    inner, rej = _split_rejector(model)
    if rej is None:
        Z, caches, gamma = _inner_forward(inner, X, want_cache=True)
        dZ = np.asarray(loss.logit_gradient(Z[0], y), dtype=np.float64)[None, :]
        return _inner_backprop(inner, caches, gamma, dZ)[0]

    Z, caches, gamma = _inner_forward(inner, X, want_cache=True)
    z = Z[0]
    base_argmax = int(np.argmax(z))
    c = inner.num_classes
    if rej.probes == 0:
        smooth = 0.0
        probe_grad = np.zeros_like(x)
    else:
        offsets = _rejector_offsets(rej.seed, rej.probes, rej.radius, x.size)
        P = x[None, :] + offsets
        Zp, pcaches, pgamma = _inner_forward(inner, P, want_cache=True)
        own = Zp[:, base_argmax]
        masked = Zp.copy()
        masked[:, base_argmax] = -np.inf
        runner = np.argmax(masked, axis=1)
        margin = own - masked[np.arange(len(P)), runner]
        sig = _sigmoid(-margin / rej.sharpness)
        smooth = float(np.mean(sig))
        # d smooth / d margin_j, then margin_j backprop at each probe point.
        coef = sig * (1.0 - sig) * (-1.0 / rej.sharpness) / rej.probes
        dZp = np.zeros_like(Zp)
        dZp[:, base_argmax] = coef
        dZp[np.arange(len(P)), runner] -= coef
        probe_grad = _inner_backprop(inner, pcaches, pgamma, dZp).sum(axis=0)
    score = float(np.max(z)) + rej.scale * (smooth - rej.threshold)
    logits = np.concatenate([z, [score]])
    dOut = np.asarray(loss.logit_gradient(logits, y), dtype=np.float64)
    if dOut.shape != (c + 1,):
        raise DataValidationError(
            f"loss gradient arity {dOut.shape} does not match rejector output {c + 1}"
        )
    dZ = dOut[:c].copy()
    dZ[base_argmax] += dOut[c]  # score rides on max of the base logits
    grad = _inner_backprop(inner, caches, gamma, dZ[None, :])[0]
    return grad + dOut[c] * rej.scale * probe_grad


@dataclass(frozen=True)
class Dataset:
    """Points in the unit box with 0-based integer labels."""

    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataValidationError(
                f"dataset shapes incompatible: features {X.shape}, labels {y.shape}"
            )
        if X.size and not np.all(np.isfinite(X)):
            raise DataValidationError("dataset features must be finite")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise DataValidationError("dataset features must lie in [0, 1]")
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.floor(y)):
                raise DataValidationError("labels must be integers")
            y = y.astype(np.int64)
        else:
            y = y.astype(np.int64)
        if self.num_classes < 2:
            raise DataValidationError("dataset needs at least 2 classes")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataValidationError(
                f"labels must be in [0, {self.num_classes - 1}]"
            )
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       name or self.name)


def make_blobs(
    rng: SeededRng,
    n: int,
    d: int,
    c: int,
    spread: float,
    centers: np.ndarray | None = None,
    name: str = "blobs",
) -> Dataset:
    """Balanced Gaussian clusters clipped to the unit box, deterministic under seed."""
    if n < 1 or d < 1 or c < 1:
        raise DataValidationError("make_blobs needs n, d, c >= 1")
    if spread < 0:
        raise DataValidationError(f"spread must be nonnegative, got {spread}")
    gen = rng.generator
    if centers is None:
        centers = gen.uniform(0.2, 0.8, size=(c, d))
    else:
        centers = as_tensor(centers, shape=(c, d), name="centers")
    counts = [n // c + (1 if i < n % c else 0) for i in range(c)]
    xs, ys = [], []
    for label, count in enumerate(counts):
        pts = centers[label] + spread * gen.standard_normal((count, d))
        xs.append(np.clip(pts, 0.0, 1.0))
        ys.append(np.full(count, label, dtype=np.int64))
    X = np.concatenate(xs)
    y = np.concatenate(ys)
    order = gen.permutation(n)
    return Dataset(X[order], y[order], max(c, 2), name=name)


def _reinit_like(model: MlpClassifier, rng: SeededRng) -> MlpClassifier:
    dims = [model.input_dim] + [l.out_dim for l in model.layers]
    acts = [(l.activation, l.k) for l in model.layers]
    return init_mlp(rng, dims, acts)


def init_mlp(
    rng: SeededRng,
    dims: Sequence[int],
    activations: Sequence[tuple[str, int | None]] | None = None,
) -> MlpClassifier:
    """He-initialized MLP; hidden layers relu, output identity, unless given."""
    dims = [int(v) for v in dims]
    if len(dims) < 2:
        raise DataValidationError("need at least input and output dimensions")
    if activations is None:
        activations = [("relu", None)] * (len(dims) - 2) + [("identity", None)]
    if len(activations) != len(dims) - 1:
        raise DataValidationError("one activation per layer required")
    gen = rng.generator
    layers = []
    for i, (act, k) in enumerate(activations):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = gen.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act, k))
    return MlpClassifier(tuple(layers), num_classes=dims[-1])


def _ce_value_and_grad(Z: np.ndarray, targets: np.ndarray, temperature: float):
    """Mean cross-entropy of softmax(Z/T) against target distributions.

    The gradient treats Z/T as the trained logits (no extra 1/T factor), so a
    given lr behaves the same at any temperature; without this, high-T training
    crawls and never reaches the saturated regime temperature training exists for.
    """
    logp = log_softmax(Z / temperature, axis=1)
    loss = float(-np.mean(np.sum(targets * logp, axis=1)))
    grad = (np.exp(logp) - targets) / Z.shape[0]
    return loss, grad


def _sgd_pass(
    model: MlpClassifier,
    X: np.ndarray,
    targets: np.ndarray,
    epochs: int,
    lr: float,
    temperature: float,
    rng: SeededRng,
    batch_size: int,
) -> MlpClassifier:
    layers = list(model.layers)
    n = X.shape[0]
    gen = rng.generator
    # Overflow is detected via the epoch loss and raised; numpy warnings on
    # the way there are redundant noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = gen.permutation(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                A = X[idx]
                caches = []
                for layer in layers:
                    Z = A @ layer.weights.T + layer.bias
                    if layer.activation == "relu":
                        mask = (Z > 0).astype(np.float64)
                        out = Z * mask
                    elif layer.activation == "kwta":
                        mask = _kwta_mask(Z, layer.k)
                        out = Z * mask
                    else:
                        mask = np.ones_like(Z)
                        out = Z
                    caches.append((A, mask))
                    A = out
                loss, G = _ce_value_and_grad(A, targets[idx], temperature)
                epoch_loss += loss * len(idx)
                for li in range(len(layers) - 1, -1, -1):
                    layer = layers[li]
                    A_in, mask = caches[li]
                    GZ = G * mask
                    dW = GZ.T @ A_in
                    db = GZ.sum(axis=0)
                    G = GZ @ layer.weights
                    layers[li] = replace(
                        layer, weights=layer.weights - lr * dW, bias=layer.bias - lr * db
                    )
            if not math.isfinite(epoch_loss):
                raise TrainingDivergenceError(epoch)
    return replace(model, layers=tuple(layers))


def train_sgd(
    model: MlpClassifier,
    dataset: Dataset,
    epochs: int,
    lr: float,
    rng: SeededRng,
    temperature: float | None = None,
    batch_size: int = 32,
) -> MlpClassifier:
    """Cross-entropy mini-batch SGD; with `temperature` runs two-stage distillation.

    Distillation trains a freshly initialized teacher at softmax temperature T,
    then trains the given model on the teacher's soft labels at T. The result
    is used at T=1, where its logits are saturated.
    """
    if len(dataset) == 0:
        raise DataValidationError("cannot train on an empty dataset")
    if lr <= 0:
        raise DataValidationError(f"learning rate must be positive, got {lr}")
    if epochs < 0:
        raise DataValidationError(f"epochs must be nonnegative, got {epochs}")
    if model.wrappers:
        raise DataValidationError("train the bare model; apply wrappers afterwards")
    if dataset.num_classes != model.num_classes:
        raise DataValidationError(
            f"dataset has {dataset.num_classes} classes, model {model.num_classes}"
        )
    if epochs == 0:
        return model
    X = dataset.features
    onehot = np.eye(model.num_classes)[dataset.labels]
    if temperature is None:
        return _sgd_pass(model, X, onehot, epochs, lr, 1.0, rng.substream("sgd"), batch_size)
    if temperature <= 0:
        raise DataValidationError(f"temperature must be positive, got {temperature}")
    teacher = _reinit_like(model, rng.substream("teacher-init"))
    teacher = _sgd_pass(
        teacher, X, onehot, epochs, lr, temperature, rng.substream("teacher-sgd"), batch_size
    )
    Zt, _, _ = _inner_forward(teacher, X, want_cache=False)
    soft = softmax(Zt / temperature, axis=1)
    return _sgd_pass(model, X, soft, epochs, lr, temperature, rng.substream("student-sgd"), batch_size)


def clean_accuracy(model: MlpClassifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise DataValidationError("empty dataset")
    return float(np.mean(predict_batch(model, dataset.features) == dataset.labels))


def serialize_model(model: MlpClassifier) -> dict:
    doc = {
        "schema": MODEL_SCHEMA,
        "dims": [model.input_dim] + [l.out_dim for l in model.layers],
        "num_classes": model.num_classes,
        "layers": [
            {
                "activation": l.activation,
                "k": l.k,
                "weights": [[float(v) for v in row] for row in l.weights],
                "bias": [float(v) for v in l.bias],
            }
            for l in model.layers
        ],
        "wrappers": [_wrapper_to_dict(w) for w in model.wrappers],
    }
    return doc


def _wrapper_to_dict(w: Wrapper) -> dict:
    if isinstance(w, LogitScale):
        return {"kind": "logit_scale", "gamma": float(w.gamma)}
    if isinstance(w, KwtaActivation):
        return {"kind": "kwta_activation", "k": int(w.k)}
    return {
        "kind": "rejector",
        "threshold": float(w.threshold),
        "probes": int(w.probes),
        "radius": float(w.radius),
        "seed": int(w.seed),
        "sharpness": float(w.sharpness),
        "scale": float(w.scale),
    }


def _wrapper_from_dict(doc: dict) -> Wrapper:
    kind = doc.get("kind")
    try:
        if kind == "logit_scale":
            return LogitScale(float(doc["gamma"]))
        if kind == "kwta_activation":
            return KwtaActivation(int(doc["k"]))
        if kind == "rejector":
            return Rejector(
                threshold=float(doc["threshold"]),
                probes=int(doc["probes"]),
                radius=float(doc["radius"]),
                seed=int(doc.get("seed", 0)),
                sharpness=float(doc.get("sharpness", 0.05)),
                scale=float(doc.get("scale", 1.0)),
            )
    except KeyError as exc:
        raise DataValidationError(f"wrapper document missing field {exc}") from exc
    raise DataValidationError(f"unknown wrapper kind {kind!r}")


def deserialize_model(doc: dict) -> MlpClassifier:
    if doc.get("schema") != MODEL_SCHEMA:
        raise DataValidationError(
            f"unsupported model schema {doc.get('schema')!r}, expected {MODEL_SCHEMA}"
        )
    try:
        layer_docs = doc["layers"]
        num_classes = int(doc["num_classes"])
        wrapper_docs = doc.get("wrappers", [])
        dims = doc["dims"]
    except KeyError as exc:
        raise DataValidationError(f"model document missing field {exc}") from exc
    layers = []
    for i, ld in enumerate(layer_docs):
        try:
            w = as_tensor(ld["weights"], name=f"layers[{i}].weights")
            b = as_tensor(ld["bias"], name=f"layers[{i}].bias")
            layers.append(Layer(w, b, ld.get("activation", "identity"), ld.get("k")))
        except KeyError as exc:
            raise DataValidationError(f"layer {i} missing field {exc}") from exc
    model = MlpClassifier(
        tuple(layers), num_classes, tuple(_wrapper_from_dict(w) for w in wrapper_docs)
    )
    want_dims = [model.input_dim] + [l.out_dim for l in model.layers]
    if list(dims) != want_dims:
        raise DataValidationError(f"dims field {dims} does not match layers {want_dims}")
    return model


def save_model(model: MlpClassifier, path: str | Path) -> None:
    Path(path).write_text(json.dumps(serialize_model(model)) + "\n")


def load_model(path: str | Path) -> MlpClassifier:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"model file is not valid JSON: {exc}") from exc
    return deserialize_model(doc)


def save_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    lines = []
    for x, y in zip(dataset.features, dataset.labels):
        lines.append(",".join(repr(float(v)) for v in x) + f",{int(y)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset_csv(path: str | Path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    rows = []
    labels = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise DataValidationError(f"{path}:{lineno}: need at least one feature and a label")
        try:
            rows.append([float(v) for v in parts[:-1]])
            label = float(parts[-1])
        except ValueError as exc:
            raise DataValidationError(f"{path}:{lineno}: {exc}") from exc
        if label != int(label):
            raise DataValidationError(f"{path}:{lineno}: label must be an integer")
        labels.append(int(label))
        if len(rows[-1]) != len(rows[0]):
            raise DataValidationError(f"{path}:{lineno}: inconsistent feature count")
    if not rows:
        raise DataValidationError(f"{path}: empty dataset")
    X = as_tensor(rows, name="features")
    if num_classes is None:
        num_classes = max(labels) + 1
    return Dataset(X, np.asarray(labels), max(num_classes, 2), name=name or Path(path).stem)
