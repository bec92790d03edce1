"""Named, independent random streams derived from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


class SeedStream:
    """Derive independent generators from ``(master, tag, counter)``.

    Two different tags never share state, so drawing dropout masks for an
    extra head cannot shift the initialization of the backbone.
    """

    def __init__(self, master: int):
        self.master = int(master)

    def seed(self, tag: str, counter: int = 0) -> int:
        h = hashlib.blake2b(f"{self.master}/{tag}/{counter}".encode(), digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def rng(self, tag: str, counter: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed(tag, counter))

    def child(self, tag: str) -> "SeedStream":
        return SeedStream(self.seed(tag))
