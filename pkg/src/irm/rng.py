"""Named random streams.

Every component draws from its own Philox (counter-based) generator keyed by
``(master seed, crc32(label))``, so results do not depend on the order in which
components consume randomness, and Philox output is identical across platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))
