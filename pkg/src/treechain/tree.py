"""Exact combinatorics of the complete binary tree.

A vertex is a bit string ``b1...bk`` read from the root; the root is the empty
string. Paths are stored most-significant-bit first in a Python int, so prefix
and common-ancestor queries are shifts and xors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

ROOT_SYMBOL = "∅"


@dataclass(frozen=True, order=True)
class Vertex:
    depth: int
    path: int = 0

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError(f"negative depth {self.depth}")
        if self.path < 0 or self.path >> self.depth:
            raise ValueError(f"path {self.path:b} does not fit in {self.depth} bits")

    @classmethod
    def root(cls) -> Vertex:
        return cls(0, 0)

    @classmethod
    def from_string(cls, bits: str) -> Vertex:
        if bits in ("", ROOT_SYMBOL):
            return cls.root()
        if set(bits) - {"0", "1"}:
            raise ValueError(f"not a bit string: {bits!r}")
        return cls(len(bits), int(bits, 2))

    @property
    def bits(self) -> str:
        return format(self.path, f"0{self.depth}b") if self.depth else ""

    def child(self, bit: int) -> Vertex:
        if bit not in (0, 1):
            raise ValueError(f"child bit must be 0 or 1, got {bit}")
        return Vertex(self.depth + 1, (self.path << 1) | bit)

    @property
    def parent(self) -> Vertex:
        if self.depth == 0:
            raise ValueError("the root has no parent")
        return Vertex(self.depth - 1, self.path >> 1)

    def bit(self, j: int) -> int:
        """The ``j``-th step (0-based) on the way from the root to this vertex."""
        if not 0 <= j < self.depth:
            raise IndexError(j)
        return (self.path >> (self.depth - 1 - j)) & 1

    def __str__(self) -> str:
        return self.bits or ROOT_SYMBOL


def depth(v: Vertex) -> int:
    return v.depth


def prefix(v: Vertex, j: int) -> Vertex:
    """Ancestor of ``v`` in generation ``j``."""
    if not 0 <= j <= v.depth:
        raise ValueError(f"prefix length {j} outside 0..{v.depth} for vertex {v}")
    return Vertex(j, v.path >> (v.depth - j))


def is_ancestor(u: Vertex, v: Vertex) -> bool:
    """``u <= v``: u is a prefix of v (every vertex is its own ancestor)."""
    return u.depth <= v.depth and prefix(v, u.depth) == u


def common_prefix_length(u: Vertex, v: Vertex) -> int:
    d = min(u.depth, v.depth)
    a = u.path >> (u.depth - d)
    b = v.path >> (v.depth - d)
    return d - (a ^ b).bit_length()


def mrca(u: Vertex, v: Vertex) -> Vertex:
    """Most recent common ancestor: the longest common prefix."""
    return prefix(u, common_prefix_length(u, v))


def generation(k: int) -> list[Vertex]:
    """All ``2**k`` vertices of generation ``k`` in index order."""
    return [Vertex(k, i) for i in range(1 << k)]


def _random_path(k: int, rng: np.random.Generator) -> int:
    if k == 0:
        return 0
    nbytes = (k + 7) // 8
    return int.from_bytes(rng.bytes(nbytes), "big") >> (8 * nbytes - k)


def sample_leaf(k: int, rng: np.random.Generator) -> Vertex:
    """Uniform vertex of generation ``k``."""
    if k < 0:
        raise ValueError(f"negative generation {k}")
    return Vertex(k, _random_path(k, rng))


def sample_leaf_pair(
    k: int, rng: np.random.Generator, distinct: bool = False
) -> tuple[Vertex, Vertex]:
    """Two uniform leaves of generation ``k``.

    With ``distinct=True`` the second leaf is redrawn until it differs from the
    first, which is the uniform law on ordered pairs of distinct leaves.
    """
    if distinct and k == 0:
        raise ValueError("generation 0 has a single vertex; no distinct pair exists")
    first = sample_leaf(k, rng)
    second = sample_leaf(k, rng)
    while distinct and second == first:
        second = sample_leaf(k, rng)
    return first, second


def mrca_depth_pmf(k: int, exact: bool = False):
    """Law of the MRCA depth of two independent uniform leaves of generation ``k``.

    Depth ``j < k`` has mass ``2**-(j+1)``; the remaining ``2**-k`` is the
    probability that the two leaves coincide.
    """
    if k < 0:
        raise ValueError(f"negative generation {k}")
    masses = [Fraction(1, 2 ** (j + 1)) for j in range(k)] + [Fraction(1, 2**k)]
    if exact:
        return masses
    return np.array([float(p) for p in masses])


@dataclass(frozen=True)
class Edge:
    parent: Vertex
    child: Vertex
    via: tuple[Vertex, ...] = ()

    def path(self) -> list[Vertex]:
        return [self.parent, *self.via, self.child]


@dataclass
class SpanningTree:
    leaves: tuple[Vertex, ...]
    nodes: list[Vertex]
    edges: list[Edge] = field(default_factory=list)

    def children(self, v: Vertex) -> list[Vertex]:
        return [e.child for e in self.edges if e.parent == v]

    def vertices(self) -> set[Vertex]:
        """Every tree vertex on some root-to-leaf path (nodes plus contracted ones)."""
        out = set(self.nodes)
        for e in self.edges:
            out.update(e.via)
        return out


def spanning_subtree(leaves: Iterable[Vertex]) -> SpanningTree:
    """Closure of ``{root} | leaves`` under mrca, with unary runs contracted."""
    leaves = tuple(sorted(set(leaves), key=lambda v: v.path))
    if not leaves:
        raise ValueError("spanning_subtree needs at least one leaf")
    depths = {v.depth for v in leaves}
    if len(depths) > 1:
        raise ValueError(f"leaves have mixed depths {sorted(depths)}")

    nodes = {Vertex.root(), *leaves}
    # for lexicographically sorted leaves, adjacent mrcas generate the closure
    for a, b in zip(leaves, leaves[1:]):
        nodes.add(mrca(a, b))

    ordered = sorted(nodes, key=lambda v: (v.depth, v.path))
    edges = []
    for v in ordered[1:]:
        j = v.depth - 1
        via = []
        while prefix(v, j) not in nodes:
            via.append(prefix(v, j))
            j -= 1
        edges.append(Edge(prefix(v, j), v, tuple(reversed(via))))
    return SpanningTree(leaves, ordered, edges)
