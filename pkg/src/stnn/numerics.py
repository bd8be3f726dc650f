"""Dense matrix arithmetic and deterministic random streams.

Matrices are plain 2-D float64 numpy arrays throughout the package; the
helpers here add the shape/finiteness validation the file loaders and model
code rely on. Random state is derived from a single 64-bit seed through
counter-based Philox streams, so pair sampling, initialization, and synthetic
generation each get an independent, reproducible stream.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "ShapeError",
    "as_matrix",
    "matmul",
    "hadamard",
    "map_tanh",
    "substream",
    "derive_seed",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a validated 2-D float64 matrix.

    Rejects non-finite entries and, when ``rows``/``cols`` are given,
    mismatched dimensions. Always returns a fresh array.
    """
    a = np.array(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array of shape {a.shape}")
    if rows is not None and a.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got shape {a.shape}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("matrix contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise product of two same-shaped matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def map_tanh(a: np.ndarray) -> np.ndarray:
    """Entrywise hyperbolic tangent; outputs lie in (-1, 1)."""
    return np.tanh(np.asarray(a, dtype=np.float64))


def _key_code(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFFFFFFFFFF


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator derived from ``seed`` and a purpose key.

    Distinct key tuples give statistically independent streams; the same
    (seed, keys) pair reproduces the identical draw sequence on every run.
    Keys may be strings (hashed stably) or integers.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_code(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed for (seed, keys), e.g. per-fold training."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_code(k) for k in keys]
    words = np.random.SeedSequence(entropy).generate_state(2)
    return int((int(words[0]) << 31) ^ int(words[1]))
