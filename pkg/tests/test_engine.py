import numpy as np
import pytest
from scipy import stats

from treechain.engine import (
    CapacityError,
    estimate_memory,
    full_tree_batch,
    joint_leaf_states,
    random_leaf_words,
    read_generation,
    simulate_full_tree,
    simulate_leaves_joint,
    simulate_walk,
    vertices_to_words,
    walk_batch,
    words_to_vertex,
    write_generation,
)
from treechain.kernels import DonskerKernel, MixtureTableKernel, PoissonKernel
from treechain.rng import VertexRngPolicy, seed_hash, vertex_key
from treechain.tree import Vertex, generation, sample_leaf

POLICY = VertexRngPolicy(2024)


def test_generation_shapes_and_root():
    seen = []
    simulate_full_tree(DonskerKernel(1), 0.0, 6, POLICY, lambda k, s: seen.append((k, s.copy())))
    assert [len(s) for _, s in seen] == [2**k for k in range(7)]
    assert seen[0][1].tolist() == [0.0]


def test_visitor_views_are_read_only():
    def visit(k, s):
        with pytest.raises(ValueError):
            s[0] = 1.0

    simulate_full_tree(DonskerKernel(1), 0.0, 3, POLICY, visit)


def test_antithetic_generations_sum_to_zero():
    sums = []
    simulate_full_tree(DonskerKernel(1), 0.0, 14, POLICY, lambda k, s: sums.append(s.sum()))
    assert all(v == 0.0 for v in sums)


@pytest.mark.parametrize("kernel", [DonskerKernel(4, "gaussian"), PoissonKernel(8),
                                    MixtureTableKernel([(0.5, -1.0, 0.25), (1.0, 0.0, 0.75)])])
def test_full_tree_independent_of_workers(kernel):
    hashes = POLICY.replicate_hashes("w", 5)
    ref = full_tree_batch(kernel, 0, 12, hashes, workers=1)
    for w in (2, 3, 8):
        assert np.array_equal(full_tree_batch(kernel, 0, 12, hashes, workers=w), ref)
    # one replicate at a time (column split) gives the same bits
    single = full_tree_batch(kernel, 0, 12, hashes[:1], workers=8)
    assert np.array_equal(single[0], ref[0])


def test_capacity_errors():
    with pytest.raises(CapacityError):
        simulate_full_tree(DonskerKernel(1), 0.0, 64, POLICY)
    with pytest.raises(CapacityError):
        simulate_full_tree(DonskerKernel(1), 0.0, 20, POLICY, cap=10)


def test_estimate_memory():
    assert estimate_memory(20, 8) == 16_777_216
    assert estimate_memory(0, 8) == 16
    assert estimate_memory(63, 8) == 2**64 - 1


def test_walk_basics():
    assert simulate_walk(DonskerKernel(1), 0.5, 0, POLICY).states.tolist() == [0.5]
    path = simulate_walk(PoissonKernel(4), 0, 200, POLICY)
    assert np.all(np.diff(path.states) >= 0)


def test_walk_mean_rademacher():
    hashes = seed_hash(np.arange(100_000, dtype=np.uint64))
    states, _ = walk_batch(DonskerKernel(1), 0.0, 10, hashes)
    assert abs(states[:, -1].mean()) < 4 * np.sqrt(10) / np.sqrt(100_000)


def test_walk_follows_tree():
    """A walk visits the vertices of its leaf path and reads the tree's states there."""
    k = DonskerKernel(3, "gaussian")
    path = simulate_walk(k, 0.0, 10, POLICY)
    full = []
    simulate_full_tree(k, 0.0, 10, POLICY, lambda g, s: full.append(s.copy()))
    for g in range(11):
        v = Vertex(g, path.leaf.path >> (10 - g))
        assert path.states[g] == full[g][v.path]


def test_words_roundtrip():
    rng = np.random.default_rng(0)
    for d in (0, 1, 63, 64, 65, 200):
        vs = [sample_leaf(d, rng) for _ in range(20)]
        words = vertices_to_words(vs, d)
        assert [words_to_vertex(w, d) for w in words] == vs
    w = random_leaf_words(rng, 1000, 70)
    assert np.all(w[:, 1] & np.uint64((1 << 58) - 1) == 0)


def test_restriction_consistency_all_leaves():
    k = DonskerKernel(2, "gaussian")
    full = simulate_full_tree(k, 0.0, 10, POLICY)
    leaves = generation(10)
    joint = simulate_leaves_joint(k, 0.0, leaves, POLICY)
    assert np.array_equal(np.array([joint[v] for v in leaves]), full.states)


def test_restriction_consistency_random_subsets():
    rng = np.random.default_rng(5)
    for kernel in (DonskerKernel(1), PoissonKernel(6)):
        full = simulate_full_tree(kernel, 0, 12, POLICY).states
        for _ in range(50):
            idx = rng.choice(2**12, size=int(rng.integers(1, 300)), replace=False)
            joint = simulate_leaves_joint(kernel, 0, [Vertex(12, int(i)) for i in idx], POLICY)
            assert all(joint[Vertex(12, int(i))] == full[i] for i in idx)


def test_joint_leaves_per_replicate_and_ancestors():
    kernel = DonskerKernel(2, "gaussian")
    hashes = POLICY.replicate_hashes("r", 3)
    full = full_tree_batch(kernel, 0.0, 8, hashes)
    mid = []
    full_tree_batch(kernel, 0.0, 8, hashes, lambda g, s: mid.append(s.copy()) if g == 3 else None)
    rng = np.random.default_rng(1)
    words = random_leaf_words(rng, 60, 8)
    rep = np.repeat(np.arange(3), 20)
    leaf, anc = joint_leaf_states(kernel, 0.0, 8, words, hashes, rep, np.full(60, 3))
    idx = (words[:, 0] >> np.uint64(56)).astype(int)
    assert np.array_equal(leaf, full[rep, idx])
    assert np.array_equal(anc, mid[0][rep, idx >> 5])


def test_single_leaf_marginal_matches_walk():
    kernel = DonskerKernel(1, "gaussian")
    d = 12
    leaf_states = []
    walk_states = []
    for r in range(2000):
        pol = VertexRngPolicy(r)
        leaf = sample_leaf(d, np.random.default_rng(r))
        leaf_states.append(simulate_leaves_joint(kernel, 0.0, [leaf], pol)[leaf])
        walk_states.append(simulate_walk(kernel, 0.0, d, VertexRngPolicy(10**6 + r)).states[-1])
    assert stats.ks_2samp(leaf_states, walk_states).pvalue > 0.01


def test_deep_leaves_joint():
    kernel = DonskerKernel(64)
    rng = np.random.default_rng(2)
    words = random_leaf_words(rng, 500, 300)
    a = joint_leaf_states(kernel, 0.0, 300, words, np.array([POLICY.h0]))
    b = joint_leaf_states(kernel, 0.0, 300, words[::-1], np.array([POLICY.h0]))
    assert np.array_equal(a, b[::-1])
    assert abs(a.mean()) < 1.0


def test_correlation_with_root_mrca_decays():
    kernel = DonskerKernel(1)
    corrs = []
    for d in (4, 16, 64):
        rng = np.random.default_rng(d)
        a = random_leaf_words(rng, 4000, d)
        b = random_leaf_words(rng, 4000, d)
        a[:, 0] &= np.uint64((1 << 63) - 1)  # first bit 0
        b[:, 0] |= np.uint64(1 << 63)  # first bit 1
        rep = np.arange(4000)
        hashes = POLICY.replicate_hashes(f"corr{d}", 4000)
        x = joint_leaf_states(kernel, 0.0, d, np.concatenate([a, b]), hashes, np.concatenate([rep, rep]))
        corrs.append(abs(np.corrcoef(x[:4000], x[4000:])[0, 1]))
    assert corrs[0] > corrs[1] > corrs[2]


def test_vertex_keys_agree_with_engine():
    v = Vertex(70, (1 << 69) | 12345)
    words = vertices_to_words([v], 70)
    assert words_to_vertex(words[0], 70) == v
    assert vertex_key(int(POLICY.h0), v) != vertex_key(int(POLICY.h0), v.parent)


def test_tcgb_roundtrip(tmp_path):
    for kernel, x0 in ((DonskerKernel(3, "gaussian"), 0.25), (PoissonKernel(8), 2)):
        buf = simulate_full_tree(kernel, x0, 9, POLICY)
        path = tmp_path / f"{kernel.family_id}.tcgb"
        write_generation(path, buf, kernel.state_kind)
        raw = path.read_bytes()
        assert raw[:4] == b"TCGB" and len(raw) == 16 + 8 * 2**9
        back, kind = read_generation(path)
        assert kind == kernel.state_kind and back.generation == 9
        assert np.array_equal(back.states, buf.states)
