"""Shared hand-built fixtures."""

import math

import numpy as np

# Two outputs whose Gram matrices are I and [[1, .75], [.75, 1]]: Sim12 = 0.8.
WORKED_EMBEDDINGS = [
    np.eye(2),
    np.array([[1.0, 0.75], [0.0, math.sqrt(1 - 0.75**2)]]),
]
WORKED_LOGPROBS = [[-0.1, -0.3], [-0.1, -0.3]]
WORKED = {"Cbar": 0.818731, "W": 2.010960, "P": 0.933333, "B": 0.666667, "Q": 0.738797}


class TableProvider:
    """Embedding provider over a fixed list: output i is the integer key i."""

    def __init__(self, mats):
        self.mats = mats

    def embed(self, key):
        return self.mats[int(key)]
