"""Deterministic random-stream derivation.

All randomness in the package flows from one 64-bit root seed.  Every task
derives its own independent stream from (root, label...) through a
counter-based key, so parallel execution order cannot change any result.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def derive(root_seed: int, *labels) -> np.random.Generator:
    """Return the generator for task `labels` under `root_seed`."""
    keys = tuple(_label_key(lab) for lab in labels)
    ss = np.random.SeedSequence(entropy=int(root_seed) & (2**64 - 1), spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))
