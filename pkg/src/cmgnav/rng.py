"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("env", "data", "init", "dropout", "sampling", "batch", "disc")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name, extra) -> same stream."""
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
