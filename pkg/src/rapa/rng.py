"""Counter-based RNG substreams.

A substream is addressed by integer coordinates, e.g. ``(seed, MASK, t, s,
layer, kind)``; numpy's SeedSequence hashes them into an independent PCG64
state.  The same coordinates always give the same stream, whatever order or
thread they are requested from.
"""

import numpy as np

MASK = 1
TRANSFORM = 2
VARIANT = 3
MC = 4


def substream(*coords: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(c) for c in coords])))
