"""Named, independent random streams derived from one experiment seed."""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed, name):
    """Return a generator for stream ``name`` of experiment ``seed``.

    Streams are keyed by a CRC of their name, so adding a new consumer never
    shifts the draws seen by existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))
