"""Counter-based random streams keyed by (seed, layer, step)."""

import zlib

import numpy as np


def layer_key(name):
    """Stable 32-bit id for a layer name."""
    return zlib.crc32(name.encode("utf-8"))


def counter_rng(*key):
    """A Philox generator whose stream depends only on ``key``.

    Keys are tuples of non-negative ints or strings, so a dropout mask is
    reproducible no matter which order layers are evaluated in.
    """
    words = [layer_key(k) if isinstance(k, str) else int(k) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


class DropoutContext:
    """Training-mode flag plus the key prefix used to derive dropout masks."""

    def __init__(self, train=False, seed=0, step=0):
        self.train = train
        self.seed = seed
        self.step = step

    def rng(self, layer):
        return counter_rng(self.seed, layer, self.step)


EVAL = DropoutContext(train=False)
