"""Independent reference computations shared by several test modules."""

import math

import numpy as np


def null_crossing_frequency(config, boundaries, n_paths, rng, chunk=250_000):
    """Monte Carlo frequency with which a null Gaussian sequence ever crosses ``boundaries``."""
    fr = np.asarray(config.info_fractions)
    steps = np.sqrt(np.diff(np.concatenate([[0.0], fr])))
    hits = 0
    for start in range(0, n_paths, chunk):
        m = min(chunk, n_paths - start)
        w = np.zeros(m)
        crossed = np.zeros(m, dtype=bool)
        for k, (sd, zb) in enumerate(zip(steps, boundaries)):
            w += sd * rng.standard_normal(m)
            crossed |= np.abs(w / math.sqrt(fr[k])) >= zb
        hits += int(crossed.sum())
    return hits / n_paths
