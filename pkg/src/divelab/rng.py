"""Counter-based random streams.

Every stream is a Philox generator keyed by a hash of ``(seed, *names)``,
so randomness for a stage, chain or image index never depends on how many
draws another stream has made, or on thread scheduling.
"""
import hashlib

import numpy as np


def stream_key(seed, *names):
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed, *names):
    """Return an independent ``numpy.random.Generator`` for ``(seed, *names)``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))


def sub_seed(seed, *names):
    """A 63-bit integer seed for libraries that want a plain int (torch)."""
    return stream_key(seed, *names) & ((1 << 63) - 1)
