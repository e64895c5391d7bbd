"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
explicit integers (seed, stream id, substream, counter), so results are
reproducible and independent of thread scheduling or call order.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# stream-id tags; disjoint so (seed, tag) pairs never collide across uses
PHANTOM_CT = 0x01
NOISE_FIELD = 0x02
ENV_RESET = 0x03
ENV_STEP = 0x04
EPISODE_SEED = 0x05


def mix64(a: int, b: int) -> int:
    """splitmix64-style mix of two 64-bit values into one."""
    x = (int(a) ^ (int(b) * 0x9E3779B97F4A7C15)) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return (x ^ (x >> 31)) & MASK64


def stream(seed: int, tag: int, substream: int = 0, counter: int = 0) -> np.random.Generator:
    """Generator for the (seed, tag, substream, counter) coordinate."""
    key = np.array([int(seed) & MASK64, int(tag) & MASK64], dtype=np.uint64)
    ctr = np.array(
        [int(substream) & MASK64, int(counter) & MASK64, 0, 0], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key, counter=ctr))
