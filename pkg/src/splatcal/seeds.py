"""Named deterministic RNG substreams derived from one master seed."""

from __future__ import annotations

import numpy as np

STREAMS = {"scene": 0, "observations": 1, "shuffle": 2, "densify": 3, "init": 4}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream; same (seed, name) -> same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name],)))
