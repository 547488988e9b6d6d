"""Splittable random streams keyed by (seed, domain, index).

Every Monte Carlo path owns the stream (seed, TRAJECTORY, path_index),
so two operations replaying the same path index share the same draw
sequence (needed for pathwise comparisons), and parallel workers never
share generator state.  Utility draws (pre-passes, hypothesis sampling)
live in separate domains so they cannot collide with trajectories.
"""

from __future__ import annotations

import numpy as np

__all__ = ["TRAJECTORY", "UTILITY", "PREPASS", "stream"]

TRAJECTORY = 0
UTILITY = 1
PREPASS = 2


def stream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Dedicated PCG64 generator for one (seed, domain, index) key."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(domain), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
