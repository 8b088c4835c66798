"""Stable seed derivation for order-independent, reproducible randomness.

Every per-image random decision draws from a generator seeded by a 64-bit
blake2b hash of (global seed, image id[, stream name]). Records can then be
processed in any order or in parallel and still yield identical outputs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(*parts: int | str) -> int:
    """64-bit seed from the given parts. Parts are length-prefixed so that
    distinct tuples can never collide by concatenation."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        data = str(part).encode("utf-8")
        h.update(len(data).to_bytes(4, "big"))
        h.update(data)
    return int.from_bytes(h.digest(), "big")


def per_image_seed(global_seed: int, image_id: str) -> int:
    return stable_seed(global_seed, image_id)


def stream_rng(global_seed: int, image_id: str, stream: str) -> np.random.Generator:
    """Independent generator for one named stage of one image's processing."""
    return np.random.default_rng(stable_seed(global_seed, image_id, stream))
