"""Shared error types and input validation helpers.

Validation failures on user-supplied data raise :class:`DataError`;
numerical failures inside the pipeline (divergence, non-finite values)
raise :class:`NumericError`.  The CLI maps these onto distinct exit codes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DataError",
    "NumericError",
    "check_finite",
    "check_in_range",
    "check_type",
]


class DataError(ValueError):
    """Malformed input data: files, configs, datasets, labels."""


class NumericError(RuntimeError):
    """Numerical failure: non-finite loss, diverged training, failed gradient check."""


def check_type(name: str, value, expected: type | tuple[type, ...]):
    if not isinstance(value, expected):
        raise DataError(f"{name} must be {expected}, got {type(value).__name__}")
    return value


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Raise DataError unless every entry of `arr` is finite."""
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_in_range(name: str, value: float, lo: float | None = None,
                   hi: float | None = None, lo_open: bool = False) -> float:
    if not np.isfinite(value):
        raise DataError(f"{name} must be finite, got {value!r}")
    if lo is not None and (value <= lo if lo_open else value < lo):
        cmp = ">" if lo_open else ">="
        raise DataError(f"{name} must be {cmp} {lo}, got {value!r}")
    if hi is not None and value > hi:
        raise DataError(f"{name} must be <= {hi}, got {value!r}")
    return value


def check_sequences(X) -> list:
    """Validate an iterable of Sequence objects (estimator input helper)."""
    from .pointcloud import Sequence

    seqs = list(X)
    if not seqs:
        raise DataError("expected at least one sequence, got an empty collection")
    for i, s in enumerate(seqs):
        if not isinstance(s, Sequence):
            raise DataError(f"X[{i}] is not a Sequence (got {type(s).__name__})")
    return seqs


def check_labels(y, n_sequences: int, n_classes: int) -> np.ndarray:
    """Validate integer class labels against the head's class capacity."""
    labels = np.asarray(list(y))
    if labels.shape != (n_sequences,):
        raise DataError(
            f"y must have one label per sequence ({n_sequences}), got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        as_int = labels.astype(np.int64, casting="unsafe")
        if not np.array_equal(as_int, labels):
            raise DataError("y must contain integer class labels")
        labels = as_int
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)
