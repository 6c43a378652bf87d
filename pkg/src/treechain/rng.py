"""Counter-based random streams keyed by tree vertex.

Every vertex gets a 64-bit key derived from ``(master_seed, depth, path)`` by
a splitmix64-style avalanche mix; its uniforms are the mix of
``key + (c+1)*golden`` for draw slots ``c = 0, 1, ...``. Nothing depends on the
order in which vertices are visited, so a full generation sweep, a
spanning-subtree walk and any split of the work across threads all consume
identical numbers at each vertex.

Paths longer than 64 bits are absorbed in 64-bit words (most significant
first). For depth ``j`` the path occupies ``max(1, ceil(j/64))`` words; all but
the last are folded into a running hash, the last (right-aligned, possibly
partial) word and the depth are mixed in to form the key. For ``j <= 64`` the
single word is the generation index of the vertex.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .tree import Vertex

MASK64 = (1 << 64) - 1
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_K_SEED = np.uint64(0x243F6A8885A308D3)
_K_WORD = np.uint64(0x13198A2E03707344)
_K_DEPTH = np.uint64(0xA4093822299F31D0)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_INV53 = 1.0 / (1 << 53)

# draw slots per vertex: 0..3 for child-pair sampling, 4 for the walk direction
KERNEL_SLOTS = 4
DIRECTION_SLOT = 4


def mix64(z):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _M1
        z = (z ^ (z >> _S27)) * _M2
        return z ^ (z >> _S31)


def label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def seed_hash(seeds) -> np.ndarray:
    """Initial running hash for master seed(s)."""
    return mix64(np.asarray(seeds, dtype=np.uint64) ^ _K_SEED)


def absorb_word(h, word):
    with np.errstate(over="ignore"):
        return mix64(np.asarray(h, dtype=np.uint64) ^ mix64(np.asarray(word, dtype=np.uint64) + _K_WORD))


def finish_key(h, last_word, depth):
    """Vertex key from the running hash, the last path word and the depth."""
    with np.errstate(over="ignore"):
        d = np.asarray(depth, dtype=np.uint64)
        return mix64(absorb_word(h, last_word) ^ mix64(d + _K_DEPTH))


def uniforms(keys, slots) -> np.ndarray:
    """Uniforms in [0, 1) for the given draw slots; shape ``keys.shape + (len(slots),)``."""
    keys = np.asarray(keys, dtype=np.uint64)[..., None]
    c = np.asarray(slots, dtype=np.uint64) + np.uint64(1)
    with np.errstate(over="ignore"):
        bits = mix64(keys + c * GOLDEN) >> _S11
    return bits.astype(np.float64) * _INV53


def generation_keys(h0, k: int, indices) -> np.ndarray:
    """Keys of generation-``k`` vertices (``k <= 64``) given by their indices."""
    if k > 64:
        raise ValueError("generation_keys handles depth <= 64; use path words beyond")
    return finish_key(h0, indices, k)


def vertex_key(h0: int, v: Vertex) -> int:
    """Key of one vertex of arbitrary depth."""
    h = np.uint64(h0)
    nwords = max(1, -(-v.depth // 64))
    tail_bits = v.depth - 64 * (nwords - 1)
    for q in range(nwords - 1):
        word = (v.path >> (v.depth - 64 * (q + 1))) & MASK64
        h = absorb_word(h, word)
    last = v.path & ((1 << tail_bits) - 1)
    return int(finish_key(h, last, v.depth))


@dataclass(frozen=True)
class VertexRngPolicy:
    """All randomness of a run, derived from one 64-bit master seed."""

    master_seed: int

    def __post_init__(self):
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError(f"master seed {self.master_seed} is not an unsigned 64-bit integer")

    @property
    def h0(self) -> np.uint64:
        return seed_hash(self.master_seed)[()]

    def derive(self, label: str, index: int = 0) -> VertexRngPolicy:
        """Independent policy for a labelled component or replicate."""
        return VertexRngPolicy(int(self.replicate_seeds(label, index + 1)[index]))

    def replicate_seeds(self, label: str, count: int, start: int = 0) -> np.ndarray:
        """Master seeds for replicates ``start .. start+count-1`` of a labelled experiment."""
        base = mix64(np.uint64(self.master_seed) ^ np.uint64(label_hash(label)))
        idx = np.arange(start, start + count, dtype=np.uint64)
        with np.errstate(over="ignore"):
            return mix64(base + idx * GOLDEN)

    def replicate_hashes(self, label: str, count: int, start: int = 0) -> np.ndarray:
        return seed_hash(self.replicate_seeds(label, count, start))

    def generator(self, label: str) -> np.random.Generator:
        """Ordinary numpy generator for auxiliary draws (leaf choice, bootstrap)."""
        words = [self.master_seed & 0xFFFFFFFF, self.master_seed >> 32]
        lh = label_hash(label)
        words += [lh & 0xFFFFFFFF, lh >> 32]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def vertex_uniforms(self, v: Vertex, slots=range(KERNEL_SLOTS + 1)) -> np.ndarray:
        return uniforms(np.uint64(vertex_key(int(self.h0), v)), list(slots))
