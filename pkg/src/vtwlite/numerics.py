"""Dense float32 kernels: matmul, softmax, RMS normalization, KL divergence.

Values are stored as float32 and reductions run in float64, so every kernel
is deterministic for identical inputs. `OpCounter` tallies multiply-accumulate
(MAC) work for the cost model; one MAC is one scalar multiply plus one add.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import (
    DegenerateRowError,
    ShapeError,
    ValidationError,
    as_matrix,
    as_vector,
    check_finite,
    check_probabilities,
)

KL_PROB_FLOOR = 1e-12


@dataclass
class OpCounter:
    """Monotone MAC accumulator, optionally split by term label.

    Confine one counter to one decode scope; call `reset` only between scopes.
    """

    macs: int = 0
    by_label: dict[str, int] = field(default_factory=dict)

    def add(self, macs: int, label: str | None = None) -> None:
        if macs < 0:
            raise ValidationError("MAC increments must be nonnegative")
        self.macs += int(macs)
        if label is not None:
            self.by_label[label] = self.by_label.get(label, 0) + int(macs)

    def reset(self) -> None:
        self.macs = 0
        self.by_label.clear()


def matmul(
    a, b, counter: OpCounter | None = None, label: str | None = None
) -> np.ndarray:
    """Product of two float32 matrices, accumulated in float64.

    When a counter is supplied it is charged rows(a) * cols(a) * cols(b) MACs.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if counter is not None:
        counter.add(a.shape[0] * a.shape[1] * b.shape[1], label)
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def softmax_row(v) -> np.ndarray:
    """Exp-normalize one row with max-subtraction; -inf entries map to exact 0."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise ValidationError("softmax input must be nonempty")
    check_finite(v, "v", allow_neg_inf=True)
    if not np.isfinite(v).any():
        raise DegenerateRowError("softmax row has no finite entry")
    x = v.astype(np.float64)
    x -= x.max()
    e = np.exp(x)
    return (e / e.sum()).astype(np.float32)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D score matrix; rows may contain -inf entries.

    Returns float64 probabilities; callers round to float32 where they store.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {s.shape}")
    finite_any = np.isfinite(s).any(axis=1)
    if not finite_any.all():
        raise DegenerateRowError("softmax row has no finite entry")
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def rms_norm(v, gain, epsilon: float) -> np.ndarray:
    """Scale v by 1/sqrt(mean(v^2) + epsilon), then elementwise by gain.

    An all-zero input with epsilon 0 maps to zeros rather than NaN.
    """
    v = as_vector(v, "v")
    gain = as_vector(gain, "gain")
    if v.shape != gain.shape:
        raise ShapeError(f"gain length {gain.size} != input length {v.size}")
    if epsilon < 0:
        raise ValidationError("epsilon must be nonnegative")
    x = v.astype(np.float64)
    ms = float(np.mean(x * x)) + epsilon
    scale = 0.0 if ms == 0.0 else 1.0 / np.sqrt(ms)
    return (x * scale * gain.astype(np.float64)).astype(np.float32)


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, epsilon: float) -> np.ndarray:
    """Row-wise `rms_norm` over a 2-D activation matrix."""
    x = as_matrix(x, "x")
    gain = as_vector(gain, "gain")
    if x.shape[1] != gain.size:
        raise ShapeError(f"gain length {gain.size} != row width {x.shape[1]}")
    x64 = x.astype(np.float64)
    ms = np.mean(x64 * x64, axis=1, keepdims=True) + epsilon
    scale = np.where(ms == 0.0, 0.0, 1.0 / np.sqrt(np.where(ms == 0.0, 1.0, ms)))
    return (x64 * scale * gain.astype(np.float64)).astype(np.float32)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with q floored at 1e-12 and 0*ln(0/q) taken as 0.

    Tiny negative totals from rounding are clamped to 0.
    """
    p = as_vector(p, "p")
    q = as_vector(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.size} vs {q.size}")
    check_probabilities(p, "p")
    check_probabilities(q, "q")
    p64 = p.astype(np.float64)
    q64 = np.maximum(q.astype(np.float64), KL_PROB_FLOOR)
    mask = p64 > 0
    total = float(np.sum(p64[mask] * np.log(p64[mask] / q64[mask])))
    return max(0.0, total)
