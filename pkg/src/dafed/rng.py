"""Deterministic random streams keyed by coordinates instead of call order.

Every consumer of randomness (dropout masks, noise injection, batch
selection, data synthesis, parameter init) derives its own generator from a
hash of a key tuple, so that results never depend on execution order,
threading, or how many draws earlier code consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(*key) -> np.random.Generator:
    """Return a PCG64 generator seeded from a stable hash of `key`."""
    msg = "\x1f".join(str(part) for part in key).encode("utf-8")
    seed = int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(seed))


def dropout_keep_masks(sample_shape: tuple, rate: float, uids: list, *key) -> np.ndarray:
    """Per-sample boolean keep masks, shape (len(uids), *sample_shape).

    Each sample's mask comes from its own stream keyed by (key..., uid), so a
    sample keeps the same mask no matter where it lands in a batch.
    """
    masks = np.empty((len(uids),) + tuple(sample_shape), dtype=bool)
    for i, uid in enumerate(uids):
        masks[i] = stream(*key, uid).random(sample_shape) >= rate
    return masks
