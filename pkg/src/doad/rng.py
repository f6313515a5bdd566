"""Seeded random streams.

Every stochastic site asks for its own generator keyed by ``(seed, label,
index)``. The streams come from Philox, a counter-based 64-bit generator, so
a site's draws never depend on how many numbers other sites consumed first.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, label: str, index: int) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    h.update(label.encode("utf-8"))
    h.update(int(index).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Return an independent generator for one stochastic site."""
    return np.random.Generator(np.random.Philox(key=_key(seed, label, index)))


def sub_seed(seed: int, label: str, index: int = 0) -> int:
    """A derived 63-bit integer seed, for handing to code that wants an int."""
    return _key(seed, label, index) & ((1 << 63) - 1)
