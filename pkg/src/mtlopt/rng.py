"""Seeded RNG substreams.

One root seed fans out into independent named streams (init, data,
phase-draw, ...) so adding a new consumer never shifts the draws of an
existing one. Stream identity depends only on (root_seed, name), never on
creation order.
"""
from __future__ import annotations

import zlib

import numpy as np


def substream_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Derive the seed sequence for the named substream of ``root_seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.SeedSequence(entropy=int(root_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(tag,))


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream; identical (seed, name) -> identical draws."""
    return np.random.default_rng(substream_seed(root_seed, name))
