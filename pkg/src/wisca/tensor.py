"""Dense 2D float64 arithmetic used throughout the package.

A "matrix" here is a C-contiguous ``numpy.ndarray`` of dtype float64 with
exactly two dimensions. Nothing broadcasts: operands are validated and
shape mismatches raise :class:`~wisca.errors.ShapeError`.

Random sampling uses numpy's ``Generator`` over the PCG64 bit generator,
seeded through ``SeedSequence`` so that independent streams can be handed
to parallel workers without changing results.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

RNG_ALGORITHM = "PCG64"

Matrix = np.ndarray


def as_matrix(m, name: str = "matrix") -> Matrix:
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2D array, got shape {arr.shape}")
    return arr


def _nonempty(m, name: str) -> Matrix:
    arr = as_matrix(m, name)
    if arr.size == 0:
        raise DomainError(f"{name}: norm of an empty matrix is undefined")
    return arr


def l1_norm(m) -> float:
    """Entrywise L1 norm: the sum of absolute values of all elements."""
    return float(np.abs(_nonempty(m, "l1_norm")).sum())


def l2_norm(m) -> float:
    """Frobenius norm."""
    arr = _nonempty(m, "l2_norm")
    return float(np.sqrt(np.square(arr).sum()))


NORMS = {"l1": l1_norm, "l2": l2_norm}


def norm_fn(kind: str):
    try:
        return NORMS[kind]
    except KeyError:
        raise DomainError(f"unknown norm {kind!r}; expected one of {sorted(NORMS)}") from None


def matmul(a, b) -> Matrix:
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} has mismatched inner dimension")
    return a @ b


def softmax_last_axis(z: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() finite for arbitrarily large logits;
    # a gap beyond the float range only underflows that entry to 0
    with np.errstate(over="ignore"):
        shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(m) -> Matrix:
    """Numerically stable softmax of each row."""
    arr = as_matrix(m, "row_softmax")
    if not np.all(np.isfinite(arr)):
        raise DomainError("row_softmax: input contains non-finite entries")
    return softmax_last_axis(arr)


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for a 64-bit unsigned seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def gaussian_fill(rows: int, cols: int, sigma: float, rng: np.random.Generator) -> Matrix:
    """``rows x cols`` matrix of i.i.d. N(0, sigma^2) entries."""
    if not sigma > 0:
        raise DomainError(f"gaussian_fill: sigma must be > 0, got {sigma}")
    if rows < 0 or cols < 0:
        raise ShapeError(f"gaussian_fill: negative dimension {rows}x{cols}")
    out = rng.standard_normal((rows, cols))
    if sigma != 1.0:
        out *= sigma
    return out
