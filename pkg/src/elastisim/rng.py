"""Splittable seeded random streams.

Every source of randomness in a run is a named substream derived from one of
two base seeds (data or schedule).  Substreams are keyed by a path of labels,
so stream identity never depends on draw order elsewhere in the program: the
generator for ("trial", 3, "node", 1) is the same no matter what other
streams were consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["substream"]


def _key_word(part: int | str) -> int:
    if isinstance(part, bool):  # bool is an int subclass; reject to avoid aliasing
        raise TypeError("substream path parts must be ints or strings")
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("substream integer path parts must be nonnegative")
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"bad substream path part: {part!r}")


def substream(base_seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for ``path`` under ``base_seed``.

    Deterministic in (base_seed, path) and independent across distinct paths.
    """
    key = tuple(_key_word(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(base_seed), spawn_key=key))
