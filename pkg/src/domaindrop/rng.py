"""Named, independent random streams derived from one run seed.

Every stream is a PCG64 generator keyed by ``(seed, stream id)`` through
:class:`numpy.random.SeedSequence`, so switching one feature on or off never
shifts the draws another feature sees.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "masks": 1,
    "layer-select": 2,
    "data-shuffle": 3,
    "data-gen": 4,
    "split": 5,
    "probe": 6,
    "data-sample": 7,
}


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}; known: {sorted(STREAMS)}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.PCG64(ss))


def streams(seed: int, *names: str) -> dict[str, np.random.Generator]:
    return {n: stream(seed, n) for n in names}
