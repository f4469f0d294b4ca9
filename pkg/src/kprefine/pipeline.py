"""Stage orchestration: flows for every edge, partition, per-component solve."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .align import (AGGREGATION_RADIUS, FINE_ZOOM, GRID_SIZE, GRID_SPACING, MAX_LONG_EDGE,
                    PATCH_SIZE, estimate_flow_fields, resize_factor)
from .graph import ImageRef, MatchGraph
from .optimize import (FlowSet, SolveReport, SolverOptions, build_problem, component_anchors,
                       select_roots, solve_component)
from .partition import (ComponentFamily, MetaGraph, TrackAssignment, build_meta_graph,
                        recursive_graph_cut, separate_tracks)

log = logging.getLogger(__name__)

ALIGN_CHUNK = 512  # edges per alignment task
SOLVE_CHUNK = 20000  # residual blocks per solver task


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# alignment


def _resized(image: ImageRef, max_long_edge: int) -> tuple[np.ndarray, float]:
    if image.pixels is None:
        raise ValueError(
            f"image {image.image_id} has no pixel data; supply precomputed flows instead"
        )
    f = resize_factor(image.width, image.height, max_long_edge)
    if f == 1.0:
        return image.pixels, 1.0
    return zoom(image.pixels, f, order=1, mode="nearest"), f


def align_graph(
    graph: MatchGraph, spacing: float = GRID_SPACING, fine_zoom: float = FINE_ZOOM,
    threads: int = 1, max_long_edge: int = MAX_LONG_EDGE, size: int = PATCH_SIZE,
    grid_size: int = GRID_SIZE, radius: int = AGGREGATION_RADIUS,
) -> FlowSet:
    """Estimate a flow field for every directed edge.

    Images whose long edge exceeds ``max_long_edge`` are downscaled first and
    the flows are mapped back to full-resolution pixels. Work is split into
    fixed chunks of edges, so the result does not depend on ``threads``.
    """
    scaled = {img.image_id: _resized(img, max_long_edge) for img in graph.images}
    flows = FlowSet.empty(graph.num_edges)
    img = graph.node_image
    pair_key = np.stack([img[graph.src], img[graph.dst]], axis=1)
    order = np.lexsort((np.arange(graph.num_edges), pair_key[:, 1], pair_key[:, 0]))
    tasks = []
    start = 0
    while start < len(order):
        a, b = pair_key[order[start]]
        stop = start
        while stop < len(order) and stop - start < ALIGN_CHUNK and \
                tuple(pair_key[order[stop]]) == (a, b):
            stop += 1
        tasks.append((int(a), int(b), order[start:stop]))
        start = stop

    def run(task):
        a, b, edges = task
        (pa, fa), (pb, fb) = scaled[a], scaled[b]
        if fa != fb:
            raise ValueError(f"images {a} and {b} resize by different factors")
        ia = ImageRef(a, pa.shape[1], pa.shape[0], pa)
        ib = ImageRef(b, pb.shape[1], pb.shape[0], pb)
        us = graph.initial_positions[graph.src[edges]] * fa
        vs = graph.initial_positions[graph.dst[edges]] * fb
        grids, low = estimate_flow_fields(ia, us, ib, vs, spacing, fine_zoom, size, grid_size, radius)
        return edges, grids / fa, low.any(axis=(1, 2)), spacing / fa

    for edges, grids, low, sp in _map(run, tasks, threads):
        flows.grids[edges] = grids
        flows.low_confidence[edges] = low
        flows.spacing[edges] = sp
        flows.present[edges] = True
    return flows


# ---------------------------------------------------------------------------
# partition


@dataclass
class PartitionResult:
    assignment: TrackAssignment
    meta: MetaGraph
    family: ComponentFamily

    def node_component(self) -> np.ndarray:
        track_comp = self.family.component_of(self.assignment.num_tracks)
        return track_comp[self.assignment.track_of]


def partition_graph(graph: MatchGraph, max_nodes: int | None = None) -> PartitionResult:
    """Tracks, meta-graph and recursive cut with at most ``max_nodes`` nodes per
    component (the image count by default)."""
    assignment = separate_tracks(graph)
    meta = build_meta_graph(graph, assignment)
    family = recursive_graph_cut(meta, max_nodes if max_nodes is not None else graph.num_images)
    assignment.root_of = select_roots(graph, assignment.track_of)
    return PartitionResult(assignment, meta, family)


def _group(labels: np.ndarray) -> list[np.ndarray]:
    """Node sets per label, ordered by their smallest node id."""
    order = np.argsort(labels, kind="stable")
    parts = np.split(order, np.flatnonzero(np.diff(labels[order])) + 1)
    parts = [p for p in parts if len(p)]
    parts.sort(key=lambda p: int(p[0]))
    return parts


def _graph_labels(graph: MatchGraph) -> np.ndarray:
    import scipy.sparse as sp
    from scipy.sparse.csgraph import connected_components

    n = graph.num_nodes
    adj = sp.coo_matrix((np.ones(graph.num_edges), (graph.src, graph.dst)), shape=(n, n))
    return connected_components(adj, directed=False)[1]


def refinement_components(graph: MatchGraph, partition: PartitionResult, mode: str) -> list[np.ndarray]:
    """Node sets solved independently in each mode; they cover every node."""
    mode = mode.replace("-", "_")
    if mode == "full":
        labels = partition.node_component()
    elif mode == "intra_only":
        labels = partition.assignment.track_of
    elif mode in ("intra_inter", "no_partition"):
        labels = _graph_labels(graph)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _group(labels)


# ---------------------------------------------------------------------------
# refinement


@dataclass
class RefinementResult:
    positions: np.ndarray  # (n, 2) refined keypoints
    offsets: np.ndarray  # (n, 2)
    node_component: np.ndarray
    track_of: np.ndarray
    is_root: np.ndarray
    reports: list[SolveReport]

    @property
    def initial_objective(self) -> float:
        return float(sum(r.initial_objective for r in self.reports))

    @property
    def final_objective(self) -> float:
        return float(sum(r.final_objective for r in self.reports))

    @property
    def iterations(self) -> int:
        return max((r.iterations for r in self.reports), default=0)

    def summary(self) -> dict:
        moved = np.linalg.norm(self.offsets, axis=1)
        return {
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "max_iterations": self.iterations,
            "num_components": len(self.reports),
            "num_converged": int(sum(r.converged for r in self.reports)),
            "max_moved": float(moved.max()) if len(moved) else 0.0,
            "mean_moved": float(moved.mean()) if len(moved) else 0.0,
        }


def _chunks(components: list[np.ndarray], weight: np.ndarray, limit: int) -> list[list[int]]:
    out, cur, load = [], [], 0
    for c, w in enumerate(weight):
        if cur and load + w > limit:
            out.append(cur)
            cur, load = [], 0
        cur.append(c)
        load += int(w)
    if cur:
        out.append(cur)
    return out


def refine_graph(
    graph: MatchGraph, flows: FlowSet, options: SolverOptions = SolverOptions(),
    partition: PartitionResult | None = None, threads: int = 1,
) -> RefinementResult:
    """Partition (unless given) and solve every component; return refined keypoints.

    Components are grouped into fixed chunks solved in lockstep. Every
    component evolves independently of its chunk mates, so the output is the
    same for any thread count.
    """
    if partition is None:
        partition = partition_graph(graph)
    track_of = partition.assignment.track_of
    components = refinement_components(graph, partition, options.mode)
    n = graph.num_nodes
    comp_of = np.empty(n, dtype=np.int64)
    for c, nodes in enumerate(components):
        comp_of[nodes] = c
    if options.mode == "no_partition":
        fixed = component_anchors(graph, components)
    else:
        fixed = partition.assignment.root_of
        if fixed is None:
            fixed = select_roots(graph, track_of)
    is_root = np.zeros(n, dtype=bool)
    is_root[fixed] = True

    same = comp_of[graph.src] == comp_of[graph.dst]
    load = np.bincount(comp_of[graph.src[same]], minlength=len(components)) + 1
    chunks = _chunks(components, load, SOLVE_CHUNK)

    def run(chunk):
        comps = [components[c] for c in chunk]
        nodes = np.concatenate(comps)
        problem = build_problem(graph, flows, comps, track_of, options,
                                fixed_nodes=np.intersect1d(fixed, nodes))
        x, reps = solve_component(problem, n)
        for r, c in zip(reps, chunk):
            r.component = c
        return nodes, x[nodes], reps

    offsets = np.zeros((n, 2))
    reports: list[SolveReport] = []
    for nodes, x, reps in _map(run, chunks, threads):
        offsets[nodes] = x
        reports.extend(reps)
    log.info("refined %d components, objective %.6g -> %.6g", len(reports),
             sum(r.initial_objective for r in reports), sum(r.final_objective for r in reports))
    return RefinementResult(graph.initial_positions + offsets, offsets, comp_of,
                            track_of.copy(), is_root, reports)

