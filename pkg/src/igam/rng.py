"""Named random streams split from one root seed."""

import zlib

import numpy as np


def derive_seed(root, name):
    return [int(root), zlib.crc32(name.encode("utf-8"))]


class Streams:
    """Lazily created, independent generators keyed by name.

    The same ``(root, name)`` pair always yields the same sequence no matter
    which other streams were used first.
    """

    def __init__(self, root):
        self.root = int(root)
        self._gens = {}

    def __getitem__(self, name):
        if name not in self._gens:
            self._gens[name] = np.random.default_rng(derive_seed(self.root, name))
        return self._gens[name]

    def seed(self, name):
        """A fresh integer seed for ``name`` (e.g. model initialization)."""
        return int(np.random.default_rng(derive_seed(self.root, name)).integers(2 ** 31))


def streams(root):
    return Streams(root)
