"""Named, splittable random streams on top of the counter-based Philox generator.

Every stochastic consumer receives its own :class:`Stream`.  A stream is fully
identified by ``(seed, path)``; splitting appends a label to the path and hashes
the result into a fresh 128-bit Philox key, so sibling streams never overlap and
the order in which they are drawn from does not matter.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, path: tuple[str, ...]) -> int:
    """Hash ``(seed, path)`` into a 128-bit integer key."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for label in path:
        h.update(b"\x1f")
        h.update(label.encode())
    return int.from_bytes(h.digest(), "little")


class Stream:
    """A reproducible random stream addressed by a seed and a label path."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[str, ...] | str = ()):
        if isinstance(path, str):
            path = (path,)
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def split(self, *labels: object) -> "Stream":
        return Stream(self.seed, self.path + tuple(str(x) for x in labels))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = derive_key(self.seed, self.path)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
