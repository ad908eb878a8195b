"""Deterministic dense linear algebra, activations, reproducible RNG, and the
finite-difference gradient oracle.

Everything here is pure given its inputs and an explicitly passed Rng.  The
default gemm accumulates in a fixed row-major order so results are bitwise
reproducible and match a naive triple-loop reference exactly; a fast BLAS
path can be enabled for training speed at the cost of that bitwise guarantee
(run-to-run determinism on one build is preserved either way).
"""

from __future__ import annotations

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a computation produces non-finite values."""


_fast_gemm = False


def set_fast_gemm(enabled: bool) -> bool:
    """Toggle the BLAS gemm path. Returns the previous setting."""
    global _fast_gemm
    previous = _fast_gemm
    _fast_gemm = bool(enabled)
    return previous


def fast_gemm_enabled() -> bool:
    return _fast_gemm


def gemm(a, b):
    """Matrix product with a fixed summation order.

    The default path accumulates over the inner dimension sequentially
    (outer-product updates), which is bitwise identical to the classic
    i-j-k triple loop in IEEE double precision.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"gemm expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"gemm dimension mismatch: {a.shape} x {b.shape}")
    if _fast_gemm:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def sigmoid(x):
    # exp overflow for very negative x saturates to 0 through 1/inf, which is
    # the correct limit; silence the spurious warning.
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def dsigmoid_from_value(s):
    """Derivative of the sigmoid expressed through its output: s * (1 - s)."""
    return s * (1.0 - s)


def dtanh_from_value(t):
    """Derivative of tanh expressed through its output: 1 - t**2."""
    return 1.0 - t * t


def softmax(logits, temperature=1.0):
    """Stable softmax along the last axis; logits are divided by temperature."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits) / temperature
    m = np.max(z, axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_sum_exp(xs, axis=None):
    xs = np.asarray(xs)
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty input")
    m = np.max(xs, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(xs - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


class Rng:
    """Seeded Philox generator.

    Philox is counter-based with a published algorithm, so the same seed
    yields the same stream on every platform.  The full generator state
    (including buffered output) serializes to plain ints for checkpoints.
    """

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.Philox(seed))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def state(self) -> dict:
        raw = self._gen.bit_generator.state
        return {
            "counter": [int(v) for v in raw["state"]["counter"]],
            "key": [int(v) for v in raw["state"]["key"]],
            "buffer": [int(v) for v in raw["buffer"]],
            "buffer_pos": int(raw["buffer_pos"]),
            "has_uint32": int(raw["has_uint32"]),
            "uinteger": int(raw["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(0)
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


def bernoulli_mask(rng: Rng, shape, keep_prob: float):
    """Inverted-dropout mask: entries are 0 or 1/keep_prob, mean 1."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    kept = rng.random(shape) < keep_prob
    return kept.astype(np.float64) / keep_prob


def finite_difference_gradient(f, theta, eps=1e-5):
    """Central-difference gradient of a scalar function of a 1-D parameter vector."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for idx in range(theta.size):
        saved = theta.flat[idx]
        theta.flat[idx] = saved + eps
        f_plus = f(theta)
        theta.flat[idx] = saved - eps
        f_minus = f(theta)
        theta.flat[idx] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DivergenceError(
                f"non-finite function value while perturbing parameter index {idx}"
            )
        grad.flat[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-4):
    """max |a - n| / max(|a|, |n|, floor), the yardstick for all gradient checks."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise ValueError(f"shape mismatch: {analytic.shape} vs {numeric.shape}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
