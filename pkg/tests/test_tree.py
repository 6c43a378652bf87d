from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from treechain.tree import (
    Vertex,
    common_prefix_length,
    depth,
    generation,
    is_ancestor,
    mrca,
    mrca_depth_pmf,
    prefix,
    sample_leaf,
    sample_leaf_pair,
    spanning_subtree,
)

V = Vertex.from_string


def vertices(max_depth=6):
    return st.integers(0, max_depth).flatmap(
        lambda d: st.integers(0, 2**d - 1).map(lambda p: Vertex(d, p)))


def test_depth_examples():
    assert depth(Vertex.root()) == 0
    assert depth(V("010")) == 3
    assert str(Vertex.root()) == "∅"
    assert V("∅") == Vertex.root()


@given(vertices(), st.integers(0, 1))
def test_child_depth(v, b):
    c = v.child(b)
    assert depth(c) == depth(v) + 1
    assert c.parent == v
    assert c.bit(depth(v)) == b


def test_prefix_examples():
    assert prefix(V("0110"), 2) == V("01")
    assert prefix(V("1"), 0) == Vertex.root()
    with pytest.raises(ValueError):
        prefix(V("01"), 3)


@given(vertices())
def test_prefix_identity_and_bits(v):
    assert prefix(v, depth(v)) == v
    assert prefix(v, 0) == Vertex.root()
    assert len(v.bits) == depth(v)


def test_mrca_examples():
    assert mrca(V("010"), V("011")) == V("01")
    assert mrca(V("001"), V("110")) == Vertex.root()


@given(vertices(), vertices())
def test_mrca_is_longest_common_prefix(u, v):
    m = mrca(u, v)
    assert is_ancestor(m, u) and is_ancestor(m, v)
    shared = 0
    while shared < min(len(u.bits), len(v.bits)) and u.bits[shared] == v.bits[shared]:
        shared += 1
    assert depth(m) == shared == common_prefix_length(u, v)
    assert mrca(u, u) == u


@pytest.mark.parametrize("k", range(7))
def test_mrca_depth_exhaustive(k):
    leaves = generation(k)
    for u, v in product(leaves, repeat=2):
        shared = next((j for j in range(k) if u.bits[j] != v.bits[j]), k)
        assert depth(mrca(u, v)) == shared


def test_deep_vertices_beyond_one_word():
    v = Vertex(200, (1 << 199) | 5)
    assert prefix(v, 1) == V("1")
    assert depth(mrca(v, Vertex(200, 5))) == 0
    assert depth(mrca(v, v.parent.child(0))) == 199


def test_sample_leaf():
    rng = np.random.default_rng(3)
    assert sample_leaf(0, rng) == Vertex.root()
    draws = [sample_leaf(2, rng) for _ in range(100_000)]
    assert all(depth(v) == 2 for v in draws)
    counts = np.bincount([v.path for v in draws], minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_mrca_pmf_examples():
    assert mrca_depth_pmf(3, exact=True) == [Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 8)]
    assert mrca_depth_pmf(1, exact=True) == [Fraction(1, 2), Fraction(1, 2)]
    assert mrca_depth_pmf(0, exact=True) == [1]
    assert mrca_depth_pmf(10).sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("k", [1, 3, 8])
def test_mrca_pmf_matches_sampled_pairs(k):
    rng = np.random.default_rng(100 + k)
    depths = [depth(mrca(*sample_leaf_pair(k, rng))) for _ in range(100_000)]
    observed = np.bincount(depths, minlength=k + 1)
    expected = 100_000 * mrca_depth_pmf(k)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_distinct_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = sample_leaf_pair(1, rng, distinct=True)
        assert a != b


def test_spanning_subtree_single_leaf():
    t = spanning_subtree([V("11")])
    assert set(t.nodes) == {Vertex.root(), V("11")}
    (edge,) = t.edges
    assert edge.path() == [Vertex.root(), V("1"), V("11")]


def test_spanning_subtree_branch_at_root():
    t = spanning_subtree([V("00"), V("11")])
    assert set(t.children(Vertex.root())) == {V("00"), V("11")}
    assert len(t.edges) == 2


def test_spanning_subtree_common_prefix():
    t = spanning_subtree([V("000"), V("001")])
    assert t.children(Vertex.root()) == [V("00")]
    assert set(t.children(V("00"))) == {V("000"), V("001")}
    assert next(e for e in t.edges if e.child == V("00")).via == (V("0"),)


@pytest.mark.parametrize("k", range(7))
def test_spanning_subtree_of_all_leaves_is_full_tree(k):
    t = spanning_subtree(generation(k))
    assert len(t.nodes) == 2 ** (k + 1) - 1


@given(st.integers(1, 6).flatmap(lambda k: st.sets(st.integers(0, 2**k - 1), min_size=1).map(
    lambda s: [Vertex(k, p) for p in s])))
def test_spanning_subtree_invariants(leaves):
    t = spanning_subtree(leaves)
    assert set(leaves) <= set(t.nodes) and Vertex.root() in t.nodes
    for e in t.edges:
        path = e.path()
        assert all(b.parent == a for a, b in zip(path, path[1:]))
    for v in t.nodes:
        kids = t.children(v)
        if len(kids) >= 2:
            below = [u for u in leaves if is_ancestor(v, u)]
            assert any(mrca(a, b) == v for a in below for b in below)


def test_spanning_subtree_errors():
    with pytest.raises(ValueError):
        spanning_subtree([])
    with pytest.raises(ValueError):
        spanning_subtree([V("0"), V("01")])
