"""Deterministic random streams.

Every stochastic operation in this package draws from a Philox-4x64-10
counter-based bit generator keyed by ``(seed, stream)``.  The stream tag
is folded from any number of non-negative integers with a fixed 64-bit
polynomial hash, so independent substreams (per trial, per row, per grid
point) are reproducible from the seed alone, in any execution order.
"""

import numpy as np

_MASK = (1 << 64) - 1
_MULT = 1000003


def _fold(parts):
    tag = 0
    for part in parts:
        tag = (tag * _MULT + (int(part) & _MASK)) & _MASK
    return tag


def stream(seed, *parts):
    """Generator for the substream identified by ``parts`` under ``seed``."""
    key = np.array([int(seed) & _MASK, _fold(parts)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
