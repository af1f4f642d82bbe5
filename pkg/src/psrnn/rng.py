"""Named, reproducible random streams.

Every random decision in the package draws from a stream derived from a
single 64-bit run seed plus a purpose string. Streams are independent, so
adding a new consumer never perturbs the draws seen by existing ones, and
the derivation uses SHA-256 rather than Python's hash() so results are
stable across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for substream `name` of run seed `seed`."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([seed & _MASK64, *words])
    return np.random.Generator(np.random.PCG64(seq))
