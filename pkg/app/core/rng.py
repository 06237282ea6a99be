"""
Seeded random streams.

Every draw in the toolkit goes through ``make_rng``: a Philox (counter-based)
generator keyed by the run seed plus a tuple of stream ids. Child streams are
independent and reproducible across platforms for a given numpy version.
"""

import numpy as np

# Stream ids
GRAPH = 0
SOURCES = 1
FILTERS = 2
NOISE = 3
INIT_STATE = 4
SHUFFLE = 5
MODEL_INIT = 6
VALIDATION = 7
TRIAL = 8


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Build the generator for ``stream`` under ``seed``.

    Args:
        seed: 64-bit unsigned run seed
        *stream: stream path, e.g. ``(FILTERS, q)`` for the q-th batch filter

    Returns:
        numpy Generator backed by Philox
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *stream: int) -> int:
    """
    Deterministic child seed, recorded in manifests in place of a stream path.

    Kept below 2**63 so it fits int64 columns.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1
