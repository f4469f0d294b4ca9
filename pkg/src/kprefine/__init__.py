"""Joint multi-view keypoint refinement from local flow fields.

Typical use::

    graph = build_graph(images, keypoints, matches)
    flows = align_graph(graph)              # or oracle / precomputed flows
    result = refine_graph(graph, flows)     # partition + bounded robust solve
    result.positions                         # refined (x, y) per node
"""

from .align import FlowField, eval_flow, estimate_flow_field, predict_central_flow
from .graph import ImageRef, MatchGraph, build_graph, filter_matches, mutual_match
from .optimize import FlowSet, RobustLoss, SolverOptions, refine_query, robust_loss
from .partition import recursive_graph_cut, separate_tracks
from .pipeline import align_graph, partition_graph, refine_graph

__version__ = "0.1.0"

__all__ = [
    "FlowField", "FlowSet", "ImageRef", "MatchGraph", "RobustLoss", "SolverOptions",
    "align_graph", "build_graph", "estimate_flow_field", "eval_flow", "filter_matches",
    "mutual_match", "partition_graph", "predict_central_flow", "recursive_graph_cut",
    "refine_graph", "refine_query", "robust_loss", "separate_tracks",
]
