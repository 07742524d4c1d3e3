"""Deterministic randomness utilities.

Every random draw in the package comes from a counter-based Philox
generator whose 128-bit key is derived by hashing a master seed together
with a stream label and a step index.  A draw is therefore a pure
function of (master seed, label, step, shape): no generator state is
threaded through the code, results do not depend on evaluation order,
and any consumer can be re-run in isolation.

Within one block the slot position identifies the consumer, e.g. row m
of the block drawn for ("signal", step) belongs to particle m.  Blocks
drawn under different labels or steps are independent streams.

Reductions over particle axes use fixed pairwise (fold) trees so that
sums and means are bitwise reproducible and independent of chunking.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = b"roughfilter:"


def derive_key(master_seed: int, labels: tuple) -> int:
    """128-bit Philox key from a master seed and a tuple of labels.

    Labels may contain strings, ints and nested tuples; the repr of the
    canonicalized tuple is hashed, so distinct label tuples give
    independent streams.
    """
    msg = repr((int(master_seed), _canon(labels))).encode("utf-8")
    digest = hashlib.sha256(_DOMAIN + msg).digest()
    return int.from_bytes(digest[:16], "little")


def _canon(obj):
    if isinstance(obj, (list, tuple)):
        return tuple(_canon(o) for o in obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, str):
        return obj
    raise TypeError(f"rng labels must be str/int/tuple, got {type(obj).__name__}")


def generator(master_seed: int, *labels) -> np.random.Generator:
    """Fresh Generator for the given (seed, labels) stream."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, labels)))


def normal_block(master_seed: int, labels: tuple, shape) -> np.ndarray:
    """Standard normal block for one labeled stream.

    The block as a whole is the reproducibility contract: the same
    (seed, labels, shape) always yields the same array.
    """
    return generator(master_seed, *labels).standard_normal(shape)


def uniform_block(master_seed: int, labels: tuple, shape) -> np.ndarray:
    return generator(master_seed, *labels).random(shape)


def tree_sum(values: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sum along axis with a fixed pairwise fold tree.

    Independent of memory layout and chunking; used for all reductions
    over particles so reports are bitwise reproducible.
    """
    a = np.asarray(values, dtype=np.float64)
    a = np.moveaxis(a, axis, 0).copy()
    n = a.shape[0]
    if n == 0:
        return np.zeros(a.shape[1:], dtype=np.float64)
    while n > 1:
        half = n // 2
        a[:half] += a[half : 2 * half]
        if n % 2:
            a[half] = a[n - 1]
            n = half + 1
        else:
            n = half
    return a[0]


def tree_mean(values: np.ndarray, axis: int = 0) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    return tree_sum(a, axis=axis) / a.shape[axis]
