"""Splittable counter-based random streams.

Every source of randomness in the package is an `RngStream` derived from a
single root seed.  Streams are split by name, never by call order, so adding
a consumer somewhere does not perturb unrelated streams.  The underlying
bit generator is Philox (counter-based), keyed by a hash of the root seed
and the name path.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """A named random stream.  `child(name)` derives an independent stream."""

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.sha256(
            repr((self.seed, self.path)).encode("utf-8")
        ).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (str(name),))

    # thin delegation to the numpy Generator
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def truncated_normal(self, std: float, size, clip_sigmas: float = 2.0):
        """N(0, std^2) truncated at +-clip_sigmas standard deviations."""
        out = self._gen.normal(0.0, std, size)
        limit = clip_sigmas * std
        bad = np.abs(out) > limit
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, int(bad.sum()))
            bad = np.abs(out) > limit
        return out

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)
