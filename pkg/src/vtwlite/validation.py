"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ShapeError(ValidationError):
    """An array argument has the wrong rank, shape, or width."""


class DegenerateRowError(ValidationError):
    """A softmax row contains no finite entry."""


class DatasetError(ValidationError):
    """A dataset file or record is malformed. Carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float32 array."""
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float32)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str, allow_neg_inf: bool = False) -> None:
    if allow_neg_inf:
        bad = np.isnan(arr) | (arr == np.inf)
    else:
        bad = ~np.isfinite(arr)
    if bad.any():
        raise ValidationError(f"{name} contains non-finite entries")


def check_probabilities(p: np.ndarray, name: str, tol: float = 1e-5) -> None:
    """Entries nonnegative and summing to 1 within tol."""
    check_finite(p, name)
    if (p < 0).any():
        raise ValidationError(f"{name} has negative entries")
    total = float(np.sum(p, dtype=np.float64))
    if abs(total - 1.0) > tol:
        raise ValidationError(f"{name} sums to {total!r}, expected 1 +/- {tol}")


def check_token_ids(ids, vocab_size: int, name: str) -> list[int]:
    out = []
    for i, tok in enumerate(ids):
        tok = int(tok)
        if not 0 <= tok < vocab_size:
            raise ValidationError(
                f"{name}[{i}] = {tok} outside vocabulary of size {vocab_size}"
            )
        out.append(tok)
    return out


def check_position_ids(ids: np.ndarray, max_position: int) -> None:
    if ids.size and int(ids.max()) >= max_position:
        raise ValidationError(
            f"position id {int(ids.max())} >= max_position {max_position}"
        )
    if ids.size and int(ids.min()) < 0:
        raise ValidationError("position ids must be nonnegative")
