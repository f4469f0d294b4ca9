"""Tentative matches graph: images, keypoints, directed match edges."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

SIMILARITY_FLOOR = 1e-6


class GraphError(ValueError):
    """Structural problem while building or querying a match graph."""


@dataclass(frozen=True)
class ImageRef:
    image_id: int
    width: int
    height: int
    pixels: np.ndarray | None = None  # (height, width) grayscale in [0, 1]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GraphError(f"image {self.image_id}: size must be positive")
        if self.pixels is not None and self.pixels.shape != (self.height, self.width):
            raise GraphError(
                f"image {self.image_id}: pixel grid {self.pixels.shape} does not match "
                f"{self.height}x{self.width}"
            )


@dataclass(frozen=True)
class Keypoint:
    node_id: int
    image_id: int
    position: tuple[float, float]
    initial_position: tuple[float, float]


@dataclass(frozen=True)
class MatchEdge:
    edge_id: int
    from_node: int
    to_node: int
    similarity: float


@dataclass(eq=False)
class MatchGraph:
    """Array-backed graph G = (V, E).

    Node ``i`` lives in image ``node_image[i]`` with external keypoint id
    ``node_kp[i]``. Every match is stored as two directed edges ``2k`` (a->b)
    and ``2k + 1`` (b->a), so ``edge ^ 1`` is always the reverse edge.
    """

    images: list[ImageRef]
    node_image: np.ndarray
    node_kp: np.ndarray
    initial_positions: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    similarity: np.ndarray
    adj_offsets: np.ndarray = field(init=False)
    adj_edges: np.ndarray = field(init=False)

    def __post_init__(self):
        order = np.argsort(self.src, kind="stable")
        counts = np.bincount(self.src, minlength=self.num_nodes)
        self.adj_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.adj_edges = order.astype(np.int64)
        for arr in (self.node_image, self.node_kp, self.initial_positions,
                    self.src, self.dst, self.similarity, self.adj_offsets, self.adj_edges):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.node_image)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def num_images(self) -> int:
        return len(self.images)

    def image(self, image_id: int) -> ImageRef:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise GraphError(f"unknown image id {image_id}")

    def out_edges(self, node: int) -> np.ndarray:
        return self.adj_edges[self.adj_offsets[node]:self.adj_offsets[node + 1]]

    def reverse(self, edge: int) -> int:
        return edge ^ 1

    def keypoint(self, node: int) -> Keypoint:
        pos = tuple(float(v) for v in self.initial_positions[node])
        return Keypoint(node, int(self.node_image[node]), pos, pos)

    @property
    def keypoints(self) -> list[Keypoint]:
        return [self.keypoint(i) for i in range(self.num_nodes)]

    @property
    def edges(self) -> list[MatchEdge]:
        return [
            MatchEdge(e, int(self.src[e]), int(self.dst[e]), float(self.similarity[e]))
            for e in range(self.num_edges)
        ]

    def node_index(self) -> dict[tuple[int, int], int]:
        """Map ``(image_id, kp_id)`` to node id."""
        return {
            (int(i), int(k)): n
            for n, (i, k) in enumerate(zip(self.node_image, self.node_kp))
        }

    def weights(self) -> np.ndarray:
        """Similarities as optimization weights (clamped away from zero)."""
        return np.maximum(self.similarity, SIMILARITY_FLOOR)


def build_graph(
    images: Sequence[ImageRef],
    keypoints: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    matches: Mapping[tuple[int, int], Iterable[tuple[int, int, float]]],
    keypoint_ids: Mapping[int, Sequence[int]] | None = None,
) -> MatchGraph:
    """Build the tentative matches graph.

    ``keypoints`` holds one ``(k, 2)`` array of (x, y) positions per image
    (keyed by image id, or aligned with ``images``). ``matches`` maps an image
    pair ``(image_a, image_b)`` to ``(index_a, index_b, similarity)`` triples
    indexing into those arrays. Node ids are assigned in image order, then
    keypoint order.
    """
    if not isinstance(keypoints, Mapping):
        keypoints = {img.image_id: kp for img, kp in zip(images, keypoints)}
    image_ids = [img.image_id for img in images]
    if len(set(image_ids)) != len(image_ids):
        raise GraphError("duplicate image ids")

    first_node: dict[int, int] = {}
    counts: dict[int, int] = {}
    node_image, node_kp, positions = [], [], []
    for img in images:
        kps = np.asarray(keypoints.get(img.image_id, np.zeros((0, 2))), dtype=np.float64)
        kps = kps.reshape(-1, 2)
        if not np.all(np.isfinite(kps)):
            raise GraphError(f"image {img.image_id}: non-finite keypoint position")
        first_node[img.image_id] = len(node_image)
        counts[img.image_id] = len(kps)
        ids = keypoint_ids[img.image_id] if keypoint_ids is not None else range(len(kps))
        node_image.extend([img.image_id] * len(kps))
        node_kp.extend(int(k) for k in ids)
        positions.append(kps)

    src, dst, sims = [], [], []
    seen: set[tuple[int, int]] = set()
    for (ia, ib), pair_matches in matches.items():
        if ia not in first_node or ib not in first_node:
            raise GraphError(f"pair ({ia}, {ib}): unknown image")
        if ia == ib:
            raise GraphError(f"pair ({ia}, {ib}): matches must join distinct images")
        for a, b, s in pair_matches:
            if not (0 <= a < counts[ia]) or not (0 <= b < counts[ib]):
                raise GraphError(f"pair ({ia}, {ib}): keypoint index ({a}, {b}) out of range")
            if not (0.0 < s <= 1.0):
                raise GraphError(f"pair ({ia}, {ib}): similarity {s} outside (0, 1]")
            u, v = first_node[ia] + int(a), first_node[ib] + int(b)
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphError(f"pair ({ia}, {ib}): duplicate edge between nodes {u} and {v}")
            seen.add(key)
            src += [u, v]
            dst += [v, u]
            sims += [float(s), float(s)]

    return MatchGraph(
        images=list(images),
        node_image=np.asarray(node_image, dtype=np.int64),
        node_kp=np.asarray(node_kp, dtype=np.int64),
        initial_positions=np.concatenate(positions) if positions else np.zeros((0, 2)),
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        similarity=np.asarray(sims, dtype=np.float64),
    )


class Candidate(NamedTuple):
    """Mutual nearest-neighbor match with the distances the ratio test needs."""

    index_a: int
    index_b: int
    similarity: float
    distance: float | None = None
    second_a: float | None = None  # a's distance to its second neighbor in b
    second_b: float | None = None  # b's distance to its second neighbor in a


def mutual_match(desc_a: np.ndarray, desc_b: np.ndarray) -> list[Candidate]:
    """Mutual nearest neighbors by cosine similarity of unit descriptors."""
    desc_a = np.atleast_2d(np.asarray(desc_a, dtype=np.float64))
    desc_b = np.atleast_2d(np.asarray(desc_b, dtype=np.float64))
    if desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError(
            f"descriptor dimension mismatch: {desc_a.shape[1]} vs {desc_b.shape[1]}"
        )
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    sim = desc_a @ desc_b.T
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)

    def second(d: np.ndarray) -> float | None:
        if len(d) < 2:
            return None
        return float(np.partition(d, 1)[1])

    out = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        out.append(Candidate(
            int(i), int(j), float(sim[i, j]), float(dist[i, j]),
            second(dist[i]), second(dist[:, j]),
        ))
    return out


def filter_matches(
    candidates: Iterable[Candidate | tuple], mode: str = "ratio", threshold: float = 0.8
) -> list:
    """Keep candidates passing the symmetric ratio test or a similarity threshold.

    A missing second neighbor never rejects a candidate.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    kept = []
    for c in candidates:
        if mode == "similarity":
            if c[2] >= threshold:
                kept.append(c)
        elif mode == "ratio":
            c = Candidate(*c)
            if c.distance is None:
                raise ValueError("ratio mode needs nearest-neighbor distances")
            ok = all(
                d2 is None or (d2 > 0.0 and c.distance / d2 < threshold)
                for d2 in (c.second_a, c.second_b)
            )
            if ok:
                kept.append(c)
        else:
            raise ValueError(f"unknown filter mode {mode!r}")
    return kept


def connectivity_scores(graph: MatchGraph, track_of: np.ndarray) -> np.ndarray:
    """Similarity-weighted intra-track out-degree for every node."""
    intra = track_of[graph.src] == track_of[graph.dst]
    return np.bincount(
        graph.src[intra], weights=graph.similarity[intra], minlength=graph.num_nodes
    )


def connectivity_score(graph: MatchGraph, assignment, node: int) -> float:
    track_of = getattr(assignment, "track_of", assignment)
    edges = graph.out_edges(node)
    same = track_of[graph.dst[edges]] == track_of[node]
    return float(graph.similarity[edges][same].sum())
