"""Hierarchical, counter-based seed derivation.

Every random stream in the package is obtained from a root seed and a tuple
of integer/string keys, so the same logical stream is produced regardless of
the order (or process) in which work is executed.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str, bytes]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be nonnegative, got {key}")
        return int(key)
    if isinstance(key, str):
        key = key.encode("utf-8")
    if isinstance(key, bytes):
        return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
    raise TypeError(f"unsupported seed key type {type(key).__name__}")


def seed_sequence(root: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(root: int, *keys: Key) -> np.random.Generator:
    """Generator for the stream identified by ``(root, *keys)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(root, *keys)))


def derive_seed(root: int, *keys: Key) -> int:
    """A 63-bit integer seed for the stream identified by ``(root, *keys)``."""
    return int(seed_sequence(root, *keys).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def array_key(values: np.ndarray) -> str:
    """Stable hex digest of an array's dtype, shape and bytes."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    h = hashlib.sha1()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]
