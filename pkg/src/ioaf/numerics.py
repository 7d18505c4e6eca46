"""Deterministic numeric primitives shared by the rest of the toolkit.

All arithmetic runs in float64. Randomness goes through SeededRng, a
counter-based Philox generator whose stream key is derived from the seed
plus a named substream path. Substreams are computed from the path alone,
never from parent generator state, so the stream for (seed, sample 17,
restart 2) is identical no matter which worker draws it or in what order.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import DataValidationError, DegenerateInputError, NonFiniteEvaluationError

DEFAULT_FD_STEP = 1e-5


def as_tensor(data, shape: tuple[int, ...] | None = None, name: str = "tensor") -> np.ndarray:
    """Validated float64 array constructor for data crossing an external boundary.

    Rejects NaN and infinity. If `shape` is given the input must match it.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise DataValidationError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataValidationError(f"{name}: non-finite value at index {tuple(int(i) for i in bad)}")
    return arr


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel()))


def linf_norm(v: np.ndarray) -> float:
    arr = np.asarray(v, dtype=np.float64).ravel()
    return float(np.max(np.abs(arr))) if arr.size else 0.0


def lp_norm(v: np.ndarray, p: float) -> float:
    if math.isinf(p):
        return linf_norm(v)
    if p == 2:
        return l2_norm(v)
    raise DataValidationError(f"unsupported norm order {p}; use 2 or inf")


class SeededRng:
    """Counter-based random stream (Philox 4x64) with named substreams.

    The generator key is a BLAKE2b-128 digest of the seed and the substream
    path, so streams are independent of draw order and scheduling. `substream`
    accepts ints and strings; the same path always yields the same stream.
    """

    __slots__ = ("seed", "path", "_generator")

    def __init__(self, seed: int, path: tuple[int | str, ...] = ()):
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise DataValidationError(f"seed must be an integer, got {type(seed).__name__}")
        if not 0 <= seed < 2**64:
            raise DataValidationError(f"seed must be in [0, 2**64), got {seed}")
        for part in path:
            if not isinstance(part, (int, str)):
                raise DataValidationError(f"substream path elements must be int or str, got {part!r}")
        self.seed = seed
        self.path = tuple(path)
        self._generator: np.random.Generator | None = None

    def substream(self, *path: int | str) -> "SeededRng":
        return SeededRng(self.seed, self.path + path)

    def _key_words(self) -> np.ndarray:
        digest = hashlib.blake2b(digest_size=16)
        digest.update(self.seed.to_bytes(8, "little"))
        for part in self.path:
            if isinstance(part, int):
                digest.update(b"i")
                digest.update(part.to_bytes(16, "little", signed=True))
            else:
                encoded = part.encode("utf-8")
                digest.update(b"s")
                digest.update(len(encoded).to_bytes(4, "little"))
                digest.update(encoded)
        return np.frombuffer(digest.digest(), dtype=np.uint64).copy()

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            self._generator = np.random.Generator(np.random.Philox(key=self._key_words()))
        return self._generator

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path!r})"


def finite_diff_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = DEFAULT_FD_STEP,
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    Raises NonFiniteEvaluationError naming the coordinate if an evaluation
    comes back NaN or infinite.
    """
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise DataValidationError(f"finite difference step must be positive, got {h}")
    grad = np.zeros_like(x)
    for i in range(x.size):
        bump = np.zeros_like(x)
        bump.flat[i] = h
        hi = float(f(x + bump))
        lo = float(f(x - bump))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFiniteEvaluationError(
                f"non-finite evaluation while differencing coordinate {i}: f+={hi}, f-={lo}"
            )
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad


def pearson_correlation(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution (len-2 dof).

    Needs at least three points and nonzero variance on both sides.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise DataValidationError(
            f"correlation inputs must be 1-D and equal length, got {x.shape} and {y.shape}"
        )
    if x.size < 3:
        raise DegenerateInputError(f"correlation needs at least 3 points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataValidationError("correlation inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined for zero-variance input")
    r = float(np.dot(dx, dy) / math.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    df = x.size - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(df / (1.0 - r * r))
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return r, min(1.0, p)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis=axis))


def sample_gaussian(rng: SeededRng, mean: np.ndarray, sigma: float, count: int) -> np.ndarray:
    """Draw `count` points from an isotropic Gaussian around `mean`.

    Returns a (count, d) array; sigma = 0 yields exact copies of the mean.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if mean.ndim != 1:
        raise DataValidationError(f"mean must be 1-D, got shape {mean.shape}")
    if sigma < 0:
        raise DataValidationError(f"sigma must be nonnegative, got {sigma}")
    if count < 0:
        raise DataValidationError(f"count must be nonnegative, got {count}")
    if sigma == 0.0:
        return np.tile(mean, (count, 1))
    noise = rng.generator.standard_normal((count, mean.size))
    return mean[None, :] + sigma * noise
