"""Deterministic random number generation.

All randomness in the library flows through numpy's PCG64 generator so that a
given integer seed produces a bit-identical stream on every platform.  Derived
substreams let independent work units (dataset samples, training steps) draw
from their own generator without any shared mutable state, which keeps results
independent of evaluation order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Generator seeded directly from one integer."""
    return np.random.Generator(np.random.PCG64(seed))


def substream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for work unit `index` under master seed `seed`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, index))))
