"""Counter-based random streams.

Every random stream is a Philox generator keyed by ``SeedSequence(seed,
spawn_key=key)``.  Keys are tuples of small integers:

* ``(STREAM_DATA, rep)``            synthetic data for replication ``rep``
* ``(STREAM_FIT, rep, method, chain)`` one MCMC chain of a fitted method
* ``(STREAM_INIT, ...)``            reserved for initialisation draws

``method`` is the CRC32 of the method name.  Because each stream is derived
from the key alone, any single chain or replication can be re-run in isolation
and reproduces the draws of the full run regardless of worker count.
"""
import zlib

import numpy as np

STREAM_DATA = 1
STREAM_FIT = 2
STREAM_INIT = 3


def method_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def chain_streams(seed: int, n_chains: int, method: str = "bcf_late", rep: int = 0):
    return [stream(seed, STREAM_FIT, rep, method_id(method), c) for c in range(n_chains)]
