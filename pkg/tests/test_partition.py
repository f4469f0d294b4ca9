import numpy as np
import pytest
from hypothesis import given, strategies as st

from kprefine.graph import ImageRef, build_graph
from kprefine.partition import (
    EXHAUSTIVE_LIMIT, MetaGraph, TrackAssignment, bisect_weights, build_meta_graph, classify_edges,
    exhaustive_ncut, ncut_value, normalized_cut_bisect, recursive_graph_cut, refine_cut,
    separate_tracks, spectral_sweep,
)
from helpers import brute_force_ncut, naive_tracks, partition_sets, random_graph


def chain_graph(images, kps, edges):
    """Graph from (node_a, node_b, sim) with nodes given as (image, index) pairs."""
    imgs = [ImageRef(i, 16, 16) for i in sorted(set(images))]
    pos = {i: np.zeros((sum(1 for x in images if x == i), 2)) for i in set(images)}
    local = []
    seen = {}
    for im in images:
        local.append(seen.get(im, 0))
        seen[im] = local[-1] + 1
    matches = {}
    for a, b, s in edges:
        ia, ib = images[a], images[b]
        if ia < ib:
            matches.setdefault((ia, ib), []).append((local[a], local[b], s))
        else:
            matches.setdefault((ib, ia), []).append((local[b], local[a], s))
    return build_graph(imgs, pos, matches)


def test_separate_tracks_hand_trace():
    # nodes: A1 (img 1), A2 (img 1), B1 (img 2), C1 (img 3); node ids follow image order
    g = chain_graph([1, 1, 2, 3], None, [(0, 2, 0.9), (2, 3, 0.8), (3, 1, 0.7)])
    t = separate_tracks(g)
    assert partition_sets(t.track_of) == {frozenset({0, 2, 3}), frozenset({1})}
    assert t.image_set(t.track_of[0]) == frozenset({1, 2, 3})


def test_separate_tracks_single_edge():
    g = chain_graph([0, 1], None, [(0, 1, 0.5)])
    t = separate_tracks(g)
    assert t.num_tracks == 1 and t.sizes().tolist() == [2]


def test_separate_tracks_matches_naive_oracle(rng):
    for _ in range(100):
        g = random_graph(rng, max_nodes=50, max_images=10, tie_levels=int(rng.integers(3, 8)))
        t = separate_tracks(g)
        assert partition_sets(t.track_of) == naive_tracks(g)
        for members in t.members():
            imgs = g.node_image[members]
            assert len(set(imgs.tolist())) == len(imgs)


def test_track_ids_ordered_by_smallest_node(rng):
    g = random_graph(rng, max_nodes=40, max_images=8)
    t = separate_tracks(g)
    firsts = [int(m.min()) for m in t.members()]
    assert firsts == sorted(firsts)


@given(st.integers(0, 2 ** 31 - 1))
def test_separate_tracks_invariant_to_edge_order(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, max_nodes=30, max_images=6, tie_levels=4)
    matches = {}
    for k in range(0, g.num_edges, 2):
        u, v, s = int(g.src[k]), int(g.dst[k]), float(g.similarity[k])
        matches.setdefault((int(g.node_image[u]), int(g.node_image[v])), []).append((u, v, s))
    # rebuild with each pair's matches shuffled and the pair order reversed
    first = {i: int(np.flatnonzero(g.node_image == i)[0]) if np.any(g.node_image == i) else 0
             for i in range(g.num_images)}
    shuffled = {}
    for key in reversed(list(matches)):
        rows = matches[key]
        perm = rng.permutation(len(rows))
        shuffled[key] = [(rows[p][0] - first[key[0]], rows[p][1] - first[key[1]], rows[p][2]) for p in perm]
    kps = [g.initial_positions[g.node_image == i] for i in range(g.num_images)]
    g2 = build_graph(g.images, kps, shuffled)
    assert partition_sets(separate_tracks(g).track_of) == partition_sets(separate_tracks(g2).track_of)


def test_meta_graph_examples():
    g = chain_graph([0, 0, 1], None, [(0, 2, 0.6), (1, 2, 0.3)])
    t = separate_tracks(g)
    meta = build_meta_graph(g, t)
    # node 2 joins node 0 (0.6); node 1 stays alone, linked by 0.3 in both directions
    assert meta.num_tracks == 2
    assert meta.weight.tolist() == pytest.approx([0.6])
    merged = build_meta_graph(chain_graph([0, 1], None, [(0, 1, 0.6)]),
                              separate_tracks(chain_graph([0, 1], None, [(0, 1, 0.6)])))
    assert len(merged.weight) == 0


def test_meta_graph_against_brute_force(rng):
    for _ in range(20):
        g = random_graph(rng, max_nodes=40, max_images=6)
        t = separate_tracks(g)
        meta = build_meta_graph(g, t)
        expect = {}
        for e in range(g.num_edges):
            a, b = int(t.track_of[g.src[e]]), int(t.track_of[g.dst[e]])
            if a != b:
                key = (min(a, b), max(a, b))
                expect[key] = expect.get(key, 0.0) + g.similarity[e]
        got = {(int(a), int(b)): w for a, b, w in zip(meta.edge_a, meta.edge_b, meta.weight)}
        assert got.keys() == expect.keys()
        for k in got:
            assert got[k] == pytest.approx(expect[k])
        assert np.all(meta.weight > 0) and np.all(meta.edge_a != meta.edge_b)
        # conservation: total meta weight equals all inter-track directed similarities
        inter = t.track_of[g.src] != t.track_of[g.dst]
        assert meta.weight.sum() == pytest.approx(g.similarity[inter].sum())


def two_triangles(bridge=0.1):
    w = np.zeros((6, 6))
    for a, b in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]:
        w[a, b] = w[b, a] = 1.0
    w[2, 3] = w[3, 2] = bridge
    return w


def test_ncut_triangles_sever_bridge():
    w = two_triangles()
    for side in (exhaustive_ncut(w), refine_cut(w, spectral_sweep(w)), bisect_weights(w)):
        assert partition_sets(side.astype(int)) == {frozenset({0, 1, 2}), frozenset({3, 4, 5})}
    assert ncut_value(w, exhaustive_ncut(w)) == pytest.approx(brute_force_ncut(w))


def test_ncut_two_nodes_and_disconnected():
    w = np.array([[0.0, 2.0], [2.0, 0.0]])
    side = bisect_weights(w)
    assert side.sum() == 1
    d = np.zeros((4, 4))
    d[0, 1] = d[1, 0] = d[2, 3] = d[3, 2] = 1.0
    side = bisect_weights(d)
    assert partition_sets(side.astype(int)) == {frozenset({0, 1}), frozenset({2, 3})}


def test_exhaustive_matches_brute_force(rng):
    for _ in range(30):
        n = int(rng.integers(2, 9))
        w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.6), 1)
        w = w + w.T
        w[np.arange(n - 1), np.arange(1, n)] += 0.05  # keep it connected
        w[np.arange(1, n), np.arange(n - 1)] += 0.05
        assert ncut_value(w, exhaustive_ncut(w)) == pytest.approx(brute_force_ncut(w), rel=1e-12)


def planted_bridge(rng, n=10):
    """Two dense halves of total internal weight 10 each joined by a 0.01 bridge."""
    k = n // 2
    w = np.zeros((n, n))
    for lo in (0, k):
        block = np.triu(rng.random((k, k)) + 0.1, 1)
        block *= 10.0 / block.sum()
        w[lo:lo + k, lo:lo + k] = block + block.T
    a, b = int(rng.integers(0, k)), int(rng.integers(k, n))
    w[a, b] = w[b, a] = 0.01
    return w


def test_spectral_path_on_planted_bridges(rng):
    for _ in range(50):
        w = planted_bridge(rng)
        side = refine_cut(w, spectral_sweep(w))
        assert ncut_value(w, side) <= 1.05 * brute_force_ncut(w)


def test_spectral_large_component_uses_sweep(rng):
    n = EXHAUSTIVE_LIMIT + 8
    w = planted_bridge(rng, n)
    side = bisect_weights(w)
    assert partition_sets(side.astype(int)) == {frozenset(range(n // 2)), frozenset(range(n // 2, n))}


def chain_meta(num_tracks=6, size=2):
    a = np.arange(num_tracks - 1)
    return MetaGraph(num_tracks, np.full(num_tracks, size), a, a + 1, np.ones(num_tracks - 1))


def test_recursive_cut_chain():
    meta = chain_meta()
    fam = recursive_graph_cut(meta, 4)
    assert all(c <= 4 for c in fam.g_cardinality)
    assert sorted(np.concatenate(fam.sets).tolist()) == list(range(6))
    whole = recursive_graph_cut(meta, 12)
    assert len(whole) == 1 and whole.g_cardinality == [12]
    assert meta.g_cardinality([0, 1]) == 4


def test_recursive_cut_covers(rng):
    for _ in range(20):
        g = random_graph(rng, max_nodes=60, max_images=12)
        t = separate_tracks(g)
        meta = build_meta_graph(g, t)
        n_max = int(rng.integers(t.sizes().max(), g.num_images + 3))
        fam = recursive_graph_cut(meta, n_max)
        flat = np.concatenate(fam.sets)
        assert len(flat) == len(set(flat.tolist())) == t.num_tracks
        assert all(meta.g_cardinality(s) <= n_max for s in fam.sets)
    with pytest.raises(ValueError):
        recursive_graph_cut(meta, 0)


def test_classify_edges(rng):
    g = chain_graph([0, 1, 0], None, [(0, 1, 0.9), (1, 2, 0.5)])
    t = separate_tracks(g)
    intra, inter = classify_edges(g, t, np.arange(t.num_tracks))
    assert intra.tolist() == [0, 1] and inter.tolist() == [2, 3]
    intra, inter = classify_edges(g, t, [t.track_of[0]])
    assert intra.tolist() == [0, 1] and inter.tolist() == []
    g = random_graph(rng, max_nodes=40, max_images=6)
    t = separate_tracks(g)
    chosen = rng.choice(t.num_tracks, size=max(1, t.num_tracks // 2), replace=False)
    intra, inter = classify_edges(g, t, chosen)
    cs = set(chosen.tolist())
    exp_intra, exp_inter = [], []
    for e in range(g.num_edges):
        a, b = int(t.track_of[g.src[e]]), int(t.track_of[g.dst[e]])
        if a in cs and b in cs:
            (exp_intra if a == b else exp_inter).append(e)
    assert intra.tolist() == exp_intra and inter.tolist() == exp_inter


def test_normalized_cut_bisect_nonempty(rng):
    meta = chain_meta(8, 1)
    a, b = normalized_cut_bisect(meta, np.arange(8))
    assert len(a) and len(b) and sorted(np.concatenate([a, b]).tolist()) == list(range(8))
