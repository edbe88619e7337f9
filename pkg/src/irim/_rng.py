"""Seeded random streams.

Every random draw in the package goes through :func:`stream`, which builds a
Philox4x64-10 counter-based generator keyed by a SeedSequence hash of
``(seed, *labels)``. Two streams with different labels are statistically
independent, and a stream never depends on how many draws other streams made,
so records, masks and batches can be regenerated in any order.
"""

import numpy as np


def stream(seed: int, *labels: int) -> np.random.Generator:
    words = [int(seed)] + [int(v) for v in labels]
    if any(w < 0 for w in words):
        raise ValueError("seeds and stream labels must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


# stream labels, kept distinct so no two consumers share a stream
MASK = 1
PHANTOM = 2
COILS = 3
NOISE = 4
META = 5
SHUFFLE = 6
ITEM = 7
INIT = 8
