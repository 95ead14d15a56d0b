"""Seeded, order-independent random streams.

Every replicate draws from a generator keyed by (seed, purpose, index...),
so results do not depend on which worker runs which replicate.
"""
from __future__ import annotations

import numpy as np

BOOTSTRAP = 1
DESIGN = 2
REPLICATE = 3
AUXILIARY = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))
