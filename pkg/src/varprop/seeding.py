"""Named random substreams derived from a single run seed.

Every source of randomness in a run (data split, parameter init, batch
shuffling, samplers) pulls its generator from here, so one integer seed
reproduces the whole run bit for bit, and consuming draws in one stream
never shifts another.
"""
from __future__ import annotations

import numpy as np


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Return a Generator for the substream identified by ``names``.

    The stream key mixes the run seed with the UTF-8 bytes of each name, so
    ``substream(7, "shuffle", 3)`` is stable across platforms and numpy
    versions that keep PCG64 (all supported ones do).
    """
    entropy: list[int] = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        if isinstance(name, int):
            entropy.append(name & 0xFFFFFFFFFFFFFFFF)
        else:
            entropy.append(int.from_bytes(name.encode("utf-8"), "little") or 1)
    return np.random.default_rng(np.random.SeedSequence(entropy))
