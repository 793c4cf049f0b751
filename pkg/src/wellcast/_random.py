"""Seeded random streams.

Every stochastic subcommand takes one integer seed; components draw from
named sub-streams so that, e.g., the observation perturbations can be
changed without touching the sensor-noise draws.
"""

import zlib

import numpy as np

STREAMS = ("data-noise", "init", "ensemble", "observation-perturbation", "training", "mc")


def substream(seed, name):
    """Return a Generator for the named sub-stream of ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
