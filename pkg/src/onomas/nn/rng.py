"""Counter-based uniforms: u = mix(key, element index).

Every draw is a pure function of its key and position, so dropout masks do
depend on neither batch composition nor thread count.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_key(*parts: int) -> np.uint64:
    """Fold integers into one 64-bit key."""
    key = np.zeros(1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for p in parts:
            key = splitmix64(key ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF)) + _GOLDEN
    return key[0]


def row_uniforms(key: np.uint64, row_keys: np.ndarray, n_per_row: int) -> np.ndarray:
    """Uniforms in [0, 1) of shape ``[len(row_keys), n_per_row]``."""
    row_keys = np.asarray(row_keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = splitmix64(row_keys ^ np.uint64(key))
        idx = np.arange(n_per_row, dtype=np.uint64) * _GOLDEN
        bits = splitmix64(base[:, None] + idx[None, :])
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
