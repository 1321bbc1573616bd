"""Counter-based random streams.

Every random draw in the package is addressed by ``(seed, replicate, tag,
iteration, particle)``.  A Philox key is derived from the first four parts and
particle ``j`` reads a fixed, padded window of the counter space, so any
slice of particles can be generated on its own (e.g. by a worker process) and
agrees bit-for-bit with a full draw.
"""
from __future__ import annotations

import zlib

import numpy as np
from scipy.special import ndtri

_WORDS_PER_BLOCK = 4  # Philox4x64 emits four 64-bit words per counter step


def _tag_code(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode())


def _uniform53(raw):
    # open interval (0, 1): midpoint of each of the 2**53 bins
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53


class Streams:
    """Factory for reproducible standard-normal blocks.

    Parameters
    ----------
    seed : int
        Experiment seed.
    replicate : int
        Monte Carlo replicate index; distinct replicates never share draws.
    """

    def __init__(self, seed: int, replicate: int = 0):
        self.seed = int(seed)
        self.replicate = int(replicate)

    def __repr__(self):
        return f"Streams(seed={self.seed}, replicate={self.replicate})"

    def key(self, tag, iteration: int = 0):
        ss = np.random.SeedSequence(self.seed,
                                    spawn_key=(self.replicate, _tag_code(tag), int(iteration)))
        return ss.generate_state(2, dtype=np.uint64)

    def normals(self, tag, dim: int, J: int, iteration: int = 0, start: int = 0):
        """``dim x J`` standard normals for particles ``start .. start+J-1``."""
        dim, J, start = int(dim), int(J), int(start)
        if dim == 0 or J == 0:
            return np.zeros((dim, J))
        blocks = -(-dim // _WORDS_PER_BLOCK)
        words = blocks * _WORDS_PER_BLOCK
        bg = np.random.Philox(key=self.key(tag, iteration))
        if start:
            bg.advance(start * blocks)
        raw = bg.random_raw(J * words).reshape(J, words)[:, :dim]
        return np.ascontiguousarray(ndtri(_uniform53(raw)).T)

    def generator(self, tag, iteration: int = 0) -> np.random.Generator:
        """A ``numpy.random.Generator`` for draws not indexed by particle."""
        return np.random.Generator(np.random.Philox(key=self.key(tag, iteration)))


def as_streams(rng, replicate: int = 0) -> Streams:
    """Accept an int seed or an existing ``Streams``."""
    if isinstance(rng, Streams):
        return rng
    if rng is None:
        raise ValueError("a seed is required; pass an int or a Streams instance")
    return Streams(int(rng), replicate)
