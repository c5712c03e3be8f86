import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode('utf-8'))
    return int(part)


def make_rng(seed, *keys):
    """Counter-based generator for (seed, *keys).

    Keys split the stream: make_rng(0, 'meta_train') and make_rng(0, 'meta_test')
    are independent, and the same arguments always give the same stream.
    """
    entropy = [_key(seed)] + [_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def child_seed(rng):
    """Draw a seed for a sub-stream from an existing generator."""
    return int(rng.integers(0, 2**31 - 1))
