"""Counter-based noise streams.

Every random draw is addressed by ``(seed, purpose, step)``: the Philox key is
the seed and the counter encodes purpose and step, so no state is carried
between draws. Trajectory ``k`` always takes row ``k`` of a step's block, and
blocks are prefix-stable in the batch size, which makes output independent of
how trajectories are split across threads.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {"prior": 1, "step": 2, "eval": 3, "data": 4}


class NoiseStream:
    def __init__(self, seed, purpose="step"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.purpose = PURPOSES.get(purpose, purpose) if isinstance(purpose, str) else int(purpose)

    def generator(self, step):
        bitgen = np.random.Philox(key=self.seed, counter=[0, 0, int(step), int(self.purpose)])
        return np.random.Generator(bitgen)

    def block(self, step, n, dim):
        """Standard normals of shape (n, dim) for one step."""
        return self.generator(step).standard_normal((n, dim))


class ZeroStream(NoiseStream):
    """Deterministic all-zero draws, handy for testing mean paths."""

    def __init__(self):
        super().__init__(0)

    def block(self, step, n, dim):
        return np.zeros((n, dim))
