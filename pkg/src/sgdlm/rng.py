"""Counter-based random substreams.

Every Monte Carlo consumer in the package draws from a Philox generator keyed
by ``(seed, *path)``, where the path encodes the role of the stream, e.g.
``(time_index, purpose)``. The same address always yields the same stream, so
results do not depend on execution order or thread count.
"""

from __future__ import annotations

import numpy as np

# Purpose tags for per-step substreams.
FORECAST = 0
PREDICTIVE = 1
RECOUPLE = 2
SIMULATE = 3


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return np.random.Generator(np.random.Philox(ss))
