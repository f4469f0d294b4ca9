"""Track separation and recursive normalized graph cuts on the track meta-graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import MatchGraph

EXHAUSTIVE_LIMIT = 16
DENSE_EIGEN_LIMIT = 2000


@dataclass
class TrackAssignment:
    """Partition of graph nodes into tracks (at most one node per image).

    Track ids are dense and ordered by each track's smallest node id.
    """

    track_of: np.ndarray
    node_image: np.ndarray
    root_of: np.ndarray | None = None

    @property
    def num_tracks(self) -> int:
        return int(self.track_of.max()) + 1 if len(self.track_of) else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.track_of, minlength=self.num_tracks)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.track_of, kind="stable")
        bounds = np.cumsum(self.sizes())[:-1]
        return np.split(order, bounds)

    def image_set(self, track: int) -> frozenset[int]:
        return frozenset(int(i) for i in self.node_image[self.track_of == track])


@dataclass
class MetaGraph:
    """Tracks as nodes; undirected edge weight sums the similarities of every
    directed match edge running between the two tracks."""

    num_tracks: int
    track_size: np.ndarray
    edge_a: np.ndarray
    edge_b: np.ndarray
    weight: np.ndarray
    _adj: sp.csr_matrix | None = field(default=None, repr=False)

    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            n = self.num_tracks
            w = sp.coo_matrix((self.weight, (self.edge_a, self.edge_b)), shape=(n, n))
            self._adj = (w + w.T).tocsr()
        return self._adj

    def g_cardinality(self, tracks) -> int:
        return int(self.track_size[np.asarray(tracks, dtype=np.int64)].sum())


@dataclass
class ComponentFamily:
    sets: list[np.ndarray]
    g_cardinality: list[int]

    def __len__(self) -> int:
        return len(self.sets)

    def component_of(self, num_tracks: int) -> np.ndarray:
        out = np.full(num_tracks, -1, dtype=np.int64)
        for i, s in enumerate(self.sets):
            out[s] = i
        return out


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Dense labels ordered by first occurrence."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse]


def undirected_pairs(graph: MatchGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One entry per match: (lo node, hi node, max similarity of both directions),
    sorted by decreasing similarity with ties broken by node ids."""
    a = graph.src[0::2]
    b = graph.dst[0::2]
    s = np.maximum(graph.similarity[0::2], graph.similarity[1::2])
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    order = np.lexsort((hi, lo, -s))
    return lo[order], hi[order], s[order]


def separate_tracks(graph: MatchGraph) -> TrackAssignment:
    """Greedy Kruskal-style track separation.

    Matches are visited by decreasing similarity; two tracks merge only when
    their image sets are disjoint.
    """
    n = graph.num_nodes
    parent = list(range(n))
    images = [{int(i)} for i in graph.node_image]

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    lo, hi, _ = undirected_pairs(graph)
    for u, v in zip(lo.tolist(), hi.tolist()):
        ru, rv = find(u), find(v)
        if ru == rv or not images[ru].isdisjoint(images[rv]):
            continue
        if len(images[ru]) < len(images[rv]):
            ru, rv = rv, ru
        parent[rv] = ru
        images[ru] |= images[rv]
        images[rv] = set()

    roots = np.array([find(i) for i in range(n)], dtype=np.int64)
    return TrackAssignment(_relabel(roots), graph.node_image.copy())


def build_meta_graph(graph: MatchGraph, assignment: TrackAssignment) -> MetaGraph:
    t = assignment.track_of
    ta, tb = t[graph.src], t[graph.dst]
    cross = ta != tb
    a = np.minimum(ta, tb)[cross]
    b = np.maximum(ta, tb)[cross]
    n = assignment.num_tracks
    keys, inverse = np.unique(a * n + b, return_inverse=True)
    weight = np.bincount(inverse, weights=graph.similarity[cross], minlength=len(keys))
    return MetaGraph(n, assignment.sizes(), keys // n, keys % n, weight)


# ---------------------------------------------------------------------------
# normalized cut


def ncut_value(w: np.ndarray | sp.spmatrix, side: np.ndarray) -> float:
    """cut/assoc(A) + cut/assoc(B) for the boolean side mask ``side`` (True = A)."""
    w = sp.csr_matrix(w)
    side = np.asarray(side, dtype=bool)
    deg = np.asarray(w.sum(axis=1)).ravel()
    cut = float(side.astype(float) @ (w @ (~side).astype(float)))
    vol_a, vol_b = deg[side].sum(), deg[~side].sum()
    if vol_a <= 0 or vol_b <= 0:
        return np.inf if cut > 0 or vol_a <= 0 or vol_b <= 0 else 0.0
    return cut / vol_a + cut / vol_b


def exhaustive_ncut(w) -> np.ndarray:
    """Exact minimum normalized cut by enumerating every bipartition.

    Node 0 is pinned to side A; ties resolve to the first mask in binary order.
    """
    w = np.asarray(sp.csr_matrix(w).todense(), dtype=np.float64)
    n = len(w)
    if n < 2:
        raise ValueError("need at least two nodes to bisect")
    deg = w.sum(axis=1)
    best, best_mask = np.inf, None
    bits = np.arange(1, n)
    for start in range(0, 1 << (n - 1), 1 << 14):
        codes = np.arange(start, min(start + (1 << 14), 1 << (n - 1)))
        # bit i of code puts node i + 1 on side B
        b_side = np.zeros((len(codes), n), dtype=np.float64)
        b_side[:, 1:] = (codes[:, None] >> (bits - 1)[None, :]) & 1
        a_side = 1.0 - b_side
        cut = np.einsum("mi,ij,mj->m", a_side, w, b_side)
        vol_b = b_side @ deg
        vol_a = deg.sum() - vol_b
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where((vol_a > 0) & (vol_b > 0), cut / vol_a + cut / vol_b, np.inf)
        val[codes == 0] = np.inf
        k = int(np.argmin(val))
        if val[k] < best:
            best, best_mask = val[k], a_side[k] > 0.5
    return best_mask


def fiedler_vector(w) -> np.ndarray:
    """Second generalized eigenvector of (D - W) v = lambda D v."""
    w = sp.csr_matrix(w, dtype=np.float64)
    n = w.shape[0]
    deg = np.asarray(w.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    m = sp.diags(dinv) @ w @ sp.diags(dinv)
    if n <= DENSE_EIGEN_LIMIT:
        _, vecs = np.linalg.eigh(np.eye(n) - m.toarray())
        y = vecs[:, 1]
    else:
        from scipy.sparse.linalg import eigsh

        # top of the spectrum of D^-1/2 W D^-1/2 is the bottom of the normalized Laplacian
        v0 = np.sqrt(deg) + np.linspace(0.0, 1e-3, n)
        vals, vecs = eigsh(m, k=2, which="LA", v0=v0, tol=1e-8, maxiter=10 * n)
        y = vecs[:, np.argsort(vals)[0]]
    v = dinv * y
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if len(nz) and v[nz[0]] < 0:
        v = -v
    return v


def spectral_sweep(w) -> np.ndarray:
    """Best threshold split along the Fiedler vector; returns the side-A mask."""
    w = sp.csr_matrix(w, dtype=np.float64)
    n = w.shape[0]
    order = np.argsort(fiedler_vector(w), kind="stable")
    deg = np.asarray(w.sum(axis=1)).ravel()
    total = deg.sum()
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    # cut(prefix_k) = vol(prefix_k) - 2 * (weight inside prefix_k)
    coo = sp.triu(w, k=1).tocoo()
    inside_at = np.maximum(pos[coo.row], pos[coo.col])
    inside = np.cumsum(np.bincount(inside_at, weights=coo.data, minlength=n))
    vol = np.cumsum(deg[order])
    cut = vol - 2.0 * inside
    k = np.arange(n - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = cut[k] / vol[k] + cut[k] / (total - vol[k])
    val = np.where(np.isfinite(val), val, np.inf)
    best = int(np.argmin(val))
    side = np.zeros(n, dtype=bool)
    side[order[:best + 1]] = True
    return side


def refine_cut(w, side: np.ndarray, max_passes: int = 50) -> np.ndarray:
    """Greedy single-node moves that strictly lower the normalized cut.

    Each pass moves the node with the largest improvement; stops when no move
    helps or a side would become empty.
    """
    w = sp.csr_matrix(w, dtype=np.float64)
    side = np.asarray(side, dtype=bool).copy()
    deg = np.asarray(w.sum(axis=1)).ravel()
    total = deg.sum()
    for _ in range(max_passes):
        a = side.astype(np.float64)
        to_a = w @ a  # weight from each node into side A
        to_b = deg - to_a
        vol_a = deg @ a
        cut = a @ to_b
        # moving node i flips its side: cut changes by (own-side link - other-side link)
        own = np.where(side, to_a, to_b)
        other = np.where(side, to_b, to_a)
        new_cut = cut + own - other
        new_vol_a = vol_a - np.where(side, deg, -deg)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = new_cut / new_vol_a + new_cut / (total - new_vol_a)
        n_a = int(side.sum())
        keeps_both = np.where(side, n_a > 1, len(side) - n_a > 1)
        val = np.where(keeps_both & (new_vol_a > 0) & (new_vol_a < total), val, np.inf)
        current = cut / vol_a + cut / (total - vol_a)
        i = int(np.argmin(val))
        if not val[i] < current * (1.0 - 1e-12):
            break
        side[i] = not side[i]
    return side


def bisect_weights(w) -> np.ndarray:
    """Two-way normalized cut of a weighted graph; returns the side-A mask."""
    w = sp.csr_matrix(w, dtype=np.float64)
    n = w.shape[0]
    if n < 2:
        raise ValueError("need at least two nodes to bisect")
    ncomp, labels = connected_components(w, directed=False)
    if ncomp > 1:
        return labels == labels[0]
    if n <= EXHAUSTIVE_LIMIT:
        return exhaustive_ncut(w)
    side = refine_cut(w, spectral_sweep(w))
    # a refinement move may disconnect a side; the recursion splits it later
    return side


def normalized_cut_bisect(meta: MetaGraph, tracks) -> tuple[np.ndarray, np.ndarray]:
    """Split a set of tracks in two (both non-empty) by normalized cut."""
    tracks = np.asarray(tracks, dtype=np.int64)
    w = meta.adjacency()[tracks][:, tracks]
    side = bisect_weights(w)
    return tracks[side], tracks[~side]


def recursive_graph_cut(meta: MetaGraph, max_nodes: int) -> ComponentFamily:
    """Bisect connected meta-components until each holds at most ``max_nodes``
    graph nodes. Every returned set is connected in the meta-graph."""
    if max_nodes < 1:
        raise ValueError("max_nodes must be at least 1")
    adj = meta.adjacency()
    _, labels = connected_components(adj, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    stack = list(reversed(np.split(order, bounds)))
    out: list[np.ndarray] = []
    while stack:
        tracks = stack.pop()
        card = meta.g_cardinality(tracks)
        if card <= max_nodes:
            out.append(np.sort(tracks))
            continue
        assert len(tracks) > 1, "a single track cannot exceed the image count"
        sub = adj[tracks][:, tracks]
        ncomp, sub_labels = connected_components(sub, directed=False)
        if ncomp > 1:
            parts = [tracks[sub_labels == k] for k in range(ncomp)]
        else:
            a, b = normalized_cut_bisect(meta, tracks)
            parts = [a, b]
        stack.extend(reversed(parts))
    out.sort(key=lambda s: int(s[0]))
    return ComponentFamily(out, [meta.g_cardinality(s) for s in out])


def classify_edges(
    graph: MatchGraph, assignment: TrackAssignment, tracks
) -> tuple[np.ndarray, np.ndarray]:
    """Intra- and inter-track edge ids among the tracks in ``tracks``."""
    t = assignment.track_of
    member = np.zeros(assignment.num_tracks, dtype=bool)
    member[np.asarray(tracks, dtype=np.int64)] = True
    ts, td = t[graph.src], t[graph.dst]
    both = member[ts] & member[td]
    intra = np.flatnonzero(both & (ts == td))
    inter = np.flatnonzero(both & (ts != td))
    return intra, inter

