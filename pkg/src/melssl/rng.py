"""Named deterministic RNG streams.

Every stochastic consumer (masking, dropout, init, shuffling, ...) draws from
its own stream, seeded from the global seed plus the stream name and optional
integer keys. Results are therefore reproducible regardless of scheduling or
of which other consumers ran before.
"""

import zlib

import numpy as np


def stream_rng(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for stream `name`, optionally keyed (e.g. by epoch, index)."""
    entropy = [int(seed), zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))
