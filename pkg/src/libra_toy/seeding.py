"""Seeded random streams derived from one run seed and a fixed label."""

import zlib

import numpy as np


def stream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``; the same (seed, label) always gives the same stream."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])
