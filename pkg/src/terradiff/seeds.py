"""Deterministic named RNG substreams.

Every random draw in the package flows from a single root seed through
named substreams, so separate pipeline stages (corpus generation,
training, sampling) stay reproducible independently of each other.
Stream derivation uses a stable hash of the name; Python's builtin
``hash`` is salted per process and must not be used here.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stable_hash64(text: str) -> int:
    """Stable 64-bit hash of a string (process-independent)."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(root_seed: int, name: str) -> np.random.Generator:
    """RNG for the named substream of ``root_seed``.

    The same (seed, name) pair always yields an identical stream; distinct
    names yield statistically independent streams.
    """
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, stable_hash64(name)])
    return np.random.default_rng(ss)
