"""Shared generators for the test suite."""

import numpy as np

from kprefine.graph import ImageRef, build_graph


def random_graph(rng, max_nodes=60, max_images=12, edge_prob=None, tie_levels=None):
    """Random match graph with keypoints scattered over a few images.

    With ``tie_levels`` set, similarities are drawn from that many discrete
    values so ties are common.
    """
    num_images = int(rng.integers(2, max_images + 1))
    counts = rng.multinomial(int(rng.integers(num_images, max_nodes + 1)), np.ones(num_images) / num_images)
    images = [ImageRef(i, 64, 64) for i in range(num_images)]
    kps = {i: rng.uniform(0, 64, size=(int(c), 2)) for i, c in enumerate(counts)}
    p = edge_prob if edge_prob is not None else float(rng.uniform(0.05, 0.4))
    matches = {}
    for a in range(num_images):
        for b in range(a + 1, num_images):
            triples = []
            for i in range(counts[a]):
                for j in range(counts[b]):
                    if rng.random() < p:
                        if tie_levels:
                            s = float(rng.integers(1, tie_levels + 1)) / tie_levels
                        else:
                            s = float(rng.uniform(0.01, 1.0))
                        triples.append((i, j, s))
            if triples:
                matches[(a, b)] = triples
    return build_graph(images, kps, matches)


def partition_sets(labels):
    groups = {}
    for i, t in enumerate(np.asarray(labels).tolist()):
        groups.setdefault(t, set()).add(i)
    return {frozenset(g) for g in groups.values()}


def brute_force_ncut(w):
    """Smallest normalized cut value over all bipartitions (loop-based)."""
    w = np.asarray(w, dtype=float)
    n = len(w)
    deg = w.sum(axis=1)
    best = np.inf
    for code in range(1, 1 << (n - 1)):
        b = [(code >> i) & 1 for i in range(n - 1)]
        side_b = np.array([0] + b, dtype=bool)
        cut = w[~side_b][:, side_b].sum()
        va, vb = deg[~side_b].sum(), deg[side_b].sum()
        if va <= 0 or vb <= 0:
            continue
        best = min(best, cut / va + cut / vb)
    return best


def naive_tracks(graph):
    """Literal greedy track separation: explicit track list, linear scans."""
    pairs = []
    for k in range(0, graph.num_edges, 2):
        u, v = int(graph.src[k]), int(graph.dst[k])
        s = max(graph.similarity[k], graph.similarity[k + 1])
        pairs.append((-s, min(u, v), max(u, v)))
    pairs.sort()
    tracks = [{i} for i in range(graph.num_nodes)]
    for _, u, v in pairs:
        tu = next(t for t in tracks if u in t)
        tv = next(t for t in tracks if v in t)
        if tu is tv:
            continue
        if {int(graph.node_image[i]) for i in tu} & {int(graph.node_image[i]) for i in tv}:
            continue
        tracks.remove(tv)
        tu |= tv
    return {frozenset(t) for t in tracks}


def single_variable_problem(targets, kinds, reverse, weights, K=16.0, cauchy=4.0, tukey=1.0):
    """Free node 0 joined to fixed nodes 1..m by constant-flow edges.

    Edge i pulls node 0 toward ``targets[i]``: a forward edge (fixed -> free)
    carries flow ``+target``, a reverse edge (free -> fixed) carries ``-target``.
    """
    from kprefine.optimize import LOSS_CODES, RefinementProblem, SolverOptions

    m = len(targets)
    targets = np.asarray(targets, dtype=float).reshape(m, 2)
    src = np.where(reverse, 0, np.arange(1, m + 1))
    dst = np.where(reverse, np.arange(1, m + 1), 0)
    flow = np.where(np.asarray(reverse)[:, None], -targets, targets)
    grids = np.broadcast_to(flow[:, None, None, :], (m, 3, 3, 2)).copy()
    return RefinementProblem(
        nodes=np.arange(m + 1),
        node_component=np.zeros(m + 1, dtype=np.int64),
        fixed=np.arange(m + 1) > 0,
        block_edge=np.arange(m),
        block_src=src.astype(np.int64),
        block_dst=dst.astype(np.int64),
        block_weight=np.asarray(weights, dtype=float),
        block_loss=np.array([LOSS_CODES[k] for k in kinds]),
        block_scale=np.array([cauchy if k == "cauchy" else tukey for k in kinds], dtype=float),
        grids=grids,
        spacing=np.full(m, 8.0),
        K=K,
        mode="full",
        options=SolverOptions(K=K, cauchy_scale=cauchy, tukey_scale=tukey),
    )


def reference_loss(kind, c, s):
    """Independent scalar robust losses (unit slope at the origin)."""
    s = np.asarray(s, dtype=float)
    if kind == "cauchy":
        return c * c * np.log(1.0 + s / (c * c))
    if kind == "tukey":
        inside = np.clip(1.0 - s / (c * c), 0.0, None)
        return c * c / 3.0 * (1.0 - inside ** 3)
    return s


def grid_search_minimum(targets, kinds, weights, K=16.0, cauchy=4.0, tukey=1.0, fine=1e-3):
    """Coarse-to-fine grid search of sum_i w_i rho_i(|x - p_i|^2) over the L1 ball."""
    targets = np.asarray(targets, dtype=float)

    def objective(pts):
        total = np.zeros(len(pts))
        for p, k, w in zip(targets, kinds, weights):
            s = np.sum((pts - p) ** 2, axis=1)
            total += w * reference_loss(k, cauchy if k == "cauchy" else tukey, s)
        return total

    def search(center, half, step):
        ax = np.arange(-half, half + step / 2, step)
        gx, gy = np.meshgrid(center[0] + ax, center[1] + ax)
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
        pts = pts[np.abs(pts).sum(axis=1) <= K + 1e-12]
        vals = objective(pts)
        return pts[np.argmin(vals)], float(vals.min())

    best, _ = search(np.zeros(2), K, 0.05)
    for half, step in ((0.1, 0.005), (0.01, fine)):
        best, val = search(best, half, step)
    return best, val, objective
