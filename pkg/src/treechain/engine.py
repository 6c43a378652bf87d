"""Simulation drivers: whole generations, single walks, and joint leaf samples.

All drivers read their randomness from per-vertex counter-based streams
(:mod:`treechain.rng`), so a vertex's child pair is the same number whichever
driver reaches it and however the work is split across threads.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import rng as vrng
from .kernels import KernelFamily
from .rng import DIRECTION_SLOT, KERNEL_SLOTS, VertexRngPolicy
from .tree import Vertex

MAX_GENERATION = 63
DEFAULT_FULL_TREE_CAP = 26

_ALL_SLOTS = list(range(KERNEL_SLOTS))
_SAT = (1 << 64) - 1


class CapacityError(ValueError):
    pass


@dataclass
class GenerationBuffer:
    """States of one generation; index ``i`` is the vertex with path bits ``i``."""

    generation: int
    states: np.ndarray

    def __post_init__(self):
        if len(self.states) != 1 << self.generation:
            raise ValueError(f"generation {self.generation} needs {1 << self.generation} states, got {len(self.states)}")

    def vertex(self, i: int) -> Vertex:
        return Vertex(self.generation, i)

    def restrict(self, leaves: Iterable[Vertex]) -> dict[Vertex, float]:
        return {v: self.states[v.path].item() for v in leaves}


@dataclass
class WalkPath:
    states: np.ndarray
    leaf: Vertex

    @property
    def steps(self) -> int:
        return len(self.states) - 1


def estimate_memory(k_max: int, state_width: int = 8) -> int:
    """Bytes for two ping-pong generation buffers, saturating at 2**64 - 1."""
    return min((1 << k_max) * state_width * 2, _SAT)


def _check_full_tree(kernel: KernelFamily, k_max: int, cap: int):
    if k_max < 0:
        raise ValueError(f"negative generation {k_max}")
    if k_max > MAX_GENERATION:
        raise CapacityError(f"generation {k_max} exceeds the vertex-indexed limit {MAX_GENERATION}")
    if k_max > cap:
        need = estimate_memory(k_max, np.dtype(kernel.dtype).itemsize)
        raise CapacityError(
            f"full tree to generation {k_max} needs {need} bytes; cap is generation {cap}. "
            "Sample leaves jointly instead."
        )


def _chunks(total: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, total))
    bounds = np.linspace(0, total, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _grow(kernel: KernelFamily, parents: np.ndarray, k: int, h0: np.ndarray, workers: int) -> np.ndarray:
    """Children of a (replicates, 2**k) parent block; returns (replicates, 2**(k+1))."""
    reps, width = parents.shape
    out = np.empty((reps, 2 * width), dtype=kernel.dtype)

    def fill(rows: slice, cols: slice):
        idx = np.arange(cols.start, cols.stop, dtype=np.uint64)
        keys = vrng.generation_keys(h0[rows, None], k, idx[None, :])
        c0, c1 = kernel.children(parents[rows, cols], vrng.uniforms(keys, _ALL_SLOTS))
        out[rows, 2 * cols.start : 2 * cols.stop : 2] = c0
        out[rows, 2 * cols.start + 1 : 2 * cols.stop : 2] = c1

    if workers <= 1:
        fill(slice(0, reps), slice(0, width))
        return out
    if reps >= workers:
        jobs = [(r, slice(0, width)) for r in _chunks(reps, workers)]
    else:
        jobs = [(slice(0, reps), c) for c in _chunks(width, workers)]
    with ThreadPoolExecutor(workers) as pool:
        list(pool.map(lambda job: fill(*job), jobs))
    return out


def full_tree_batch(
    kernel: KernelFamily,
    x0,
    k_max: int,
    seed_hashes: np.ndarray,
    visitor: Callable[[int, np.ndarray], None] | None = None,
    workers: int = 1,
    cap: int = DEFAULT_FULL_TREE_CAP,
) -> np.ndarray:
    """Grow independent trees (one per seed hash) and return generation ``k_max``.

    ``visitor(k, states)`` sees each generation as a read-only
    (replicates, 2**k) array.
    """
    _check_full_tree(kernel, k_max, cap)
    kernel.check_state(x0)
    h0 = np.asarray(seed_hashes, dtype=np.uint64).reshape(-1)
    states = np.full((len(h0), 1), x0, dtype=kernel.dtype)
    for k in range(k_max + 1):
        if visitor is not None:
            view = states.view()
            view.flags.writeable = False
            visitor(k, view)
        if k < k_max:
            states = _grow(kernel, states, k, h0, workers)
    return states


def simulate_full_tree(
    kernel: KernelFamily,
    x0,
    k_max: int,
    policy: VertexRngPolicy,
    visitor: Callable[[int, np.ndarray], None] | None = None,
    workers: int = 1,
    cap: int = DEFAULT_FULL_TREE_CAP,
) -> GenerationBuffer:
    """Stream generations ``0..k_max`` of one tree through ``visitor``."""
    wrapped = None if visitor is None else (lambda k, s: visitor(k, s[0]))
    states = full_tree_batch(kernel, x0, k_max, np.array([policy.h0]), wrapped, workers, cap)
    return GenerationBuffer(k_max, states[0])


# -- paths of arbitrary depth ------------------------------------------------------------


class _PathHasher:
    """Incremental vertex keys along paths, one row per (seed, path)."""

    def __init__(self, h0: np.ndarray):
        self.h = np.asarray(h0, dtype=np.uint64).copy()
        self.word = np.zeros_like(self.h)
        self.bits = 0
        self.depth = 0

    def keys(self) -> np.ndarray:
        return vrng.finish_key(self.h, self.word, self.depth)

    def append(self, bit: np.ndarray):
        if self.bits == 64:
            self.h = vrng.absorb_word(self.h, self.word)
            self.word = np.zeros_like(self.h)
            self.bits = 0
        self.word = (self.word << np.uint64(1)) | np.asarray(bit, dtype=np.uint64)
        self.bits += 1
        self.depth += 1


def walk_batch(kernel: KernelFamily, x0, steps: int, seed_hashes: np.ndarray):
    """Walks down independent trees; returns (states (R, steps+1), direction bits (R, steps))."""
    kernel.check_state(x0)
    hasher = _PathHasher(seed_hashes)
    reps = len(hasher.h)
    states = np.empty((reps, steps + 1), dtype=kernel.dtype)
    bits = np.empty((reps, steps), dtype=np.uint8)
    states[:, 0] = x0
    slots = _ALL_SLOTS + [DIRECTION_SLOT]
    for j in range(steps):
        u = vrng.uniforms(hasher.keys(), slots)
        c0, c1 = kernel.children(states[:, j], u[:, :KERNEL_SLOTS])
        b = (u[:, KERNEL_SLOTS] >= 0.5).astype(np.uint8)
        states[:, j + 1] = np.where(b == 1, c1, c0)
        bits[:, j] = b
        hasher.append(b)
    return states, bits


def simulate_walk(kernel: KernelFamily, x0, steps: int, policy: VertexRngPolicy) -> WalkPath:
    """The chain observed along a uniform root-to-leaf walk of the policy's tree.

    The direction at each vertex comes from that vertex's own stream, so the
    walk reads states of the same tree every other driver builds.
    """
    states, bits = walk_batch(kernel, x0, steps, np.array([policy.h0]))
    path = 0
    for b in bits[0]:
        path = (path << 1) | int(b)
    return WalkPath(states[0], Vertex(steps, path))


# -- joint leaf sampling --------------------------------------------------------------------


def vertices_to_words(vertices: Iterable[Vertex], depth: int) -> np.ndarray:
    """Left-aligned 64-bit words of each path, most significant word first."""
    nwords = max(1, -(-depth // 64))
    pad = 64 * nwords - depth
    rows = []
    for v in vertices:
        if v.depth != depth:
            raise ValueError(f"leaves have mixed depths ({v.depth} and {depth})")
        p = v.path << pad
        rows.append([(p >> (64 * (nwords - 1 - q))) & vrng.MASK64 for q in range(nwords)])
    return np.array(rows, dtype=np.uint64).reshape(-1, nwords)


def words_to_vertex(words: np.ndarray, depth: int) -> Vertex:
    p = 0
    for w in words:
        p = (p << 64) | int(w)
    return Vertex(depth, p >> (64 * len(words) - depth))


def random_leaf_words(rng: np.random.Generator, count: int, depth: int) -> np.ndarray:
    """Paths of ``count`` independent uniform leaves of generation ``depth``."""
    nwords = max(1, -(-depth // 64))
    words = rng.integers(0, 1 << 64, size=(count, nwords), dtype=np.uint64, endpoint=False)
    pad = 64 * nwords - depth
    if pad:
        words[:, -1] &= np.uint64(vrng.MASK64 ^ ((1 << pad) - 1))
    return words


def _bit_at(words: np.ndarray, j: int) -> np.ndarray:
    return ((words[:, j // 64] >> np.uint64(63 - j % 64)) & np.uint64(1)).astype(np.uint8)


def _prefix_last_word(words: np.ndarray, j: int) -> np.ndarray:
    if j == 0:
        return np.zeros(len(words), dtype=np.uint64)
    q, r = divmod(j - 1, 64)
    return words[:, q] >> np.uint64(63 - r)


def _clz64(x: np.ndarray) -> np.ndarray:
    """Leading zero count of nonzero uint64 values."""
    n = np.zeros(x.shape, dtype=np.int64)
    for shift in (32, 16, 8, 4, 2, 1):
        small = x < (np.uint64(1) << np.uint64(64 - shift))
        n += np.where(small, shift, 0)
        x = np.where(small, x << np.uint64(shift), x)
    return n


def common_prefix_words(a: np.ndarray, b: np.ndarray, depth: int) -> np.ndarray:
    """Common prefix length of paired word rows."""
    out = np.full(len(a), depth, dtype=np.int64)
    done = np.zeros(len(a), dtype=bool)
    for q in range(a.shape[1]):
        x = a[:, q] ^ b[:, q]
        hit = (x != 0) & ~done
        if hit.any():
            out[hit] = np.minimum(64 * q + _clz64(x[hit]), depth)
        done |= x != 0
    return out


def joint_leaf_states(
    kernel: KernelFamily,
    x0,
    depth: int,
    words: np.ndarray,
    seed_hashes: np.ndarray,
    replicate: np.ndarray | None = None,
    ancestor_depth: np.ndarray | None = None,
):
    """Exact joint states of leaves, each row ``i`` in the tree of ``replicate[i]``.

    Walks down level by level, drawing a child pair only at vertices that are
    ancestors of some requested leaf (the spanning subtree with its contracted
    paths), with the vertex's own stream. Cost is the number of such vertices.
    Returns leaf states in input order, and, if ``ancestor_depth`` is given, the
    state of each leaf's ancestor at that depth.
    """
    kernel.check_state(x0)
    words = np.asarray(words, dtype=np.uint64).reshape(len(words), -1)
    m = len(words)
    if m == 0:
        raise ValueError("need at least one leaf")
    if words.shape[1] != max(1, -(-depth // 64)):
        raise ValueError(f"word rows of width {words.shape[1]} do not match depth {depth}")
    replicate = np.zeros(m, dtype=np.int64) if replicate is None else np.asarray(replicate, dtype=np.int64)
    seeds = np.asarray(seed_hashes, dtype=np.uint64).reshape(-1)

    # sort by (replicate, path) so every vertex's descendants are contiguous
    order = np.lexsort(tuple(words[:, q] for q in reversed(range(words.shape[1]))) + (replicate,))
    w = words[order]
    rep = replicate[order]
    h_row = seeds[rep]
    lcp = np.full(m, -1, dtype=np.int64)
    if m > 1:
        same = rep[1:] == rep[:-1]
        lcp[1:] = np.where(same, common_prefix_words(w[1:], w[:-1], depth), -1)

    # running hash over completed words for each row, indexed by word count
    nwords = w.shape[1]
    hashes = [h_row]
    for q in range(nwords - 1):
        hashes.append(vrng.absorb_word(hashes[-1], w[:, q]))

    state = np.full(m, x0, dtype=kernel.dtype)
    anc = None
    if ancestor_depth is not None:
        target = np.asarray(ancestor_depth, dtype=np.int64)[order]
        anc = np.empty(m, dtype=kernel.dtype)
        anc[target == 0] = x0
    for j in range(depth):
        start = np.flatnonzero(lcp < j)  # first row of each distinct depth-j ancestor
        q = max(1, -(-j // 64)) - 1
        keys = vrng.finish_key(hashes[q][start], _prefix_last_word(w[start], j), j)
        c0, c1 = kernel.children(state[start], vrng.uniforms(keys, _ALL_SLOTS))
        group = np.cumsum(lcp < j) - 1
        bit = _bit_at(w, j)
        state = np.where(bit == 1, c1[group], c0[group])
        if anc is not None:
            hit = target == j + 1
            anc[hit] = state[hit]

    out = np.empty(m, dtype=kernel.dtype)
    out[order] = state
    if anc is None:
        return out
    anc_out = np.empty(m, dtype=kernel.dtype)
    anc_out[order] = anc
    return out, anc_out


def simulate_leaves_joint(
    kernel: KernelFamily, x0, leaves: Iterable[Vertex], policy: VertexRngPolicy
) -> dict[Vertex, float]:
    """Joint states of a set of same-depth leaves of the policy's tree."""
    leaves = list(dict.fromkeys(leaves))
    if not leaves:
        raise ValueError("need at least one leaf")
    depth = leaves[0].depth
    words = vertices_to_words(leaves, depth)
    states = joint_leaf_states(kernel, x0, depth, words, np.array([policy.h0]))
    return {v: s.item() for v, s in zip(leaves, states)}


# -- generation dumps ---------------------------------------------------------------------------

TCGB_MAGIC = b"TCGB"
TCGB_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_KINDS = {"real": (0, "<f8"), "integer": (1, "<i8")}


def write_generation(path, buffer: GenerationBuffer, state_kind: str) -> None:
    """Header (magic, version, generation, state kind) then little-endian states."""
    code, dtype = _KINDS[state_kind]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TCGB_MAGIC, TCGB_VERSION, buffer.generation, code))
        fh.write(np.ascontiguousarray(buffer.states, dtype=dtype).tobytes())


def read_generation(path) -> tuple[GenerationBuffer, str]:
    with open(path, "rb") as fh:
        magic, version, k, code = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != TCGB_MAGIC:
            raise ValueError(f"{path}: not a generation dump (magic {magic!r})")
        if version != TCGB_VERSION:
            raise ValueError(f"{path}: unsupported dump version {version}")
        kind = {c: name for name, (c, _) in _KINDS.items()}[code]
        dtype = _KINDS[kind][1]
        states = np.frombuffer(fh.read(), dtype=dtype).astype(dtype[1:])
    return GenerationBuffer(k, states), kind
