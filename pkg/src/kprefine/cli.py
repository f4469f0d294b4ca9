"""Command-line entry point: ``kprefine <subcommand> [options]``.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, PipelineConfig, load_config, parse_thresholds
from .graph import GraphError, MatchGraph
from .optimize import ProblemError, SolveError, refine_query
from .pipeline import align_graph, partition_graph, refine_graph
from .synth import (SceneError, evaluate_mma, generate_scene, oracle_flows, perturb_keypoints,
                    scene_graph)

log = logging.getLogger("kprefine")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--keypoints", help="keypoints CSV (image_id,kp_id,x,y)")
    p.add_argument("--matches", help="matches CSV (image_a,kp_a,image_b,kp_b,similarity)")
    p.add_argument("--images", help="directory of <image_id>.pgm files")
    p.add_argument("--flows", help="precomputed flows CSV")
    p.add_argument("--out", help="output directory")
    p.add_argument("--mode", help="full, no-partition, intra-only or intra-inter")
    p.add_argument("--K", type=float, dest="K", help="L1 bound on keypoint motion (px)")
    p.add_argument("--cauchy-scale", type=float)
    p.add_argument("--tukey-scale", type=float)
    p.add_argument("--grid-spacing", type=float)
    p.add_argument("--fine-zoom", type=float)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--thresholds", help="comma-separated MMA thresholds in px")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kprefine", description="Multi-view keypoint refinement.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    for name, text in (
        ("align", "estimate flow fields for every match"),
        ("partition", "separate tracks and cut the track graph"),
        ("refine", "refine keypoints from matches and flows"),
        ("pipeline", "align, partition and refine"),
    ):
        _common(sub.add_parser(name, help=text))

    q = sub.add_parser("refine-query", help="closed-form refinement of query keypoints")
    _common(q)
    q.add_argument("--queries", help="query CSV (query_id,x,y)")
    q.add_argument("--hypotheses", help="hypotheses CSV (query_id,point_id,similarity,dx,dy)")

    s = sub.add_parser("synth", help="write a synthetic planar scene")
    _common(s)
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--num-keypoints", type=int, default=200)
    s.add_argument("--size", type=int, default=256, help="square image size (px)")
    s.add_argument("--magnitude", type=float, default=1.0, help="homography magnitude")
    s.add_argument("--perturb", type=float, default=3.0, help="uniform perturbation radius (px)")
    s.add_argument("--outliers", type=float, default=0.0, help="fraction of wrong matches")
    s.add_argument("--oracle-sigma", type=float, default=None,
                   help="also write oracle flows with this noise level (px)")

    e = sub.add_parser("eval", help="MMA/AUC and RMS error against a synthetic scene")
    _common(e)
    e.add_argument("--scene", help="scene directory written by `synth`")
    e.add_argument("--refined", help="refined keypoints CSV to score instead of --keypoints")
    return parser


def _config(args) -> PipelineConfig:
    keys = ("keypoints", "matches", "flows", "images", "out", "mode", "K", "cauchy_scale",
            "tukey_scale", "grid_spacing", "fine_zoom", "threads", "seed")
    over = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "thresholds", None) is not None:
        over["thresholds"] = parse_thresholds(args.thresholds)
    return load_config(args.config, over)


def _need(cfg_value, flag: str, what: str) -> Path:
    if cfg_value is None:
        raise io.DataError(f"missing {what}: pass {flag}")
    p = Path(cfg_value)
    if not p.exists():
        raise io.DataError(f"{what} not found: expected {p}")
    return p


def _out(cfg: PipelineConfig) -> Path:
    if cfg.out is None:
        raise UsageError("missing --out (output directory)")
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_graph(cfg: PipelineConfig, with_images: bool) -> MatchGraph:
    kp = _need(cfg.keypoints, "--keypoints", "keypoints file")
    mt = _need(cfg.matches, "--matches", "matches file")
    images = io.read_images(_need(cfg.images, "--images", "image directory")) if with_images else None
    min_sim = cfg.filter_threshold if cfg.filter_mode == "similarity" else None
    return io.load_graph(kp, mt, images, min_sim)


def _align(cfg: PipelineConfig, graph: MatchGraph, out: Path):
    flows = align_graph(graph, cfg.grid_spacing, cfg.fine_zoom, cfg.threads, cfg.max_long_edge,
                        cfg.patch_size, cfg.grid_size, cfg.aggregation_radius)
    io.write_flows(out / "flows.csv", graph, flows)
    log.info("wrote %d flow fields", int(flows.present.sum()))
    return flows


def _settings(cfg: PipelineConfig) -> dict:
    """Options that shape the results; paths and thread count are left out so
    reports compare equal across output locations and thread budgets."""
    d = cfg.as_dict()
    for key in ("keypoints", "matches", "flows", "images", "out", "threads"):
        d.pop(key)
    return d


def _partition_report(graph: MatchGraph, part) -> dict:
    sizes = part.assignment.sizes()
    return {
        "num_nodes": graph.num_nodes,
        "num_edges": graph.num_edges,
        "num_tracks": part.assignment.num_tracks,
        "largest_track": int(sizes.max()) if len(sizes) else 0,
        "num_components": len(part.family),
        "largest_component": max(part.family.g_cardinality, default=0),
    }


def _refine(cfg: PipelineConfig, graph: MatchGraph, flows, out: Path) -> dict:
    part = partition_graph(graph)
    res = refine_graph(graph, flows, cfg.solver_options(), part, cfg.threads)
    io.write_tracks(out / "tracks.csv", res.track_of, res.node_component, res.is_root)
    io.write_refined(out / "refined.csv", graph, res.positions, res.track_of, res.node_component)
    report = {
        "config": _settings(cfg),
        "partition": _partition_report(graph, part),
        "refine": res.summary(),
        "components": [r.as_dict() for r in res.reports],
    }
    io.write_report(out / "report.json", report)
    return report


def cmd_align(cfg: PipelineConfig) -> None:
    graph = _load_graph(cfg, with_images=True)
    _align(cfg, graph, _out(cfg))


def cmd_partition(cfg: PipelineConfig) -> None:
    graph = _load_graph(cfg, with_images=False)
    out = _out(cfg)
    part = partition_graph(graph)
    comp = part.node_component()
    is_root = np.zeros(graph.num_nodes, dtype=bool)
    is_root[part.assignment.root_of] = True
    io.write_tracks(out / "tracks.csv", part.assignment.track_of, comp, is_root)
    io.write_report(out / "report.json", {"config": _settings(cfg),
                                          "partition": _partition_report(graph, part)})


def cmd_refine(cfg: PipelineConfig) -> None:
    graph = _load_graph(cfg, with_images=False)
    flows = io.read_flows(_need(cfg.flows, "--flows", "flows file"), graph)
    _refine(cfg, graph, flows, _out(cfg))


def cmd_pipeline(cfg: PipelineConfig) -> None:
    out = _out(cfg)
    if cfg.flows is not None:
        graph = _load_graph(cfg, with_images=False)
        flows = io.read_flows(_need(cfg.flows, "--flows", "flows file"), graph)
    else:
        graph = _load_graph(cfg, with_images=True)
        flows = _align(cfg, graph, out)
    _refine(cfg, graph, flows, out)


def cmd_refine_query(cfg: PipelineConfig, args) -> None:
    queries = io.read_queries(_need(args.queries, "--queries", "queries file"))
    hyps = io.read_hypotheses(_need(args.hypotheses, "--hypotheses", "hypotheses file"), queries)
    rows = []
    for q in sorted(hyps):
        points = sorted(hyps[q])
        refined = refine_query(queries[q], [hyps[q][p] for p in points])
        rows.extend((q, points[i], x[0], x[1]) for x, i in refined)
    io.write_table(_out(cfg) / "refined_queries.csv", io.QUERY_RESULT_COLUMNS, rows)


def cmd_synth(cfg: PipelineConfig, args) -> None:
    out = _out(cfg)
    scene = generate_scene(cfg.seed, args.views, args.size, args.num_keypoints, args.magnitude)
    perturbed = perturb_keypoints(scene, "uniform", args.perturb, seed=cfg.seed + 1, K=cfg.K)
    graph = scene_graph(scene, perturbed, seed=cfg.seed + 2, outlier_fraction=args.outliers)
    io.write_scene(out, scene, perturbed, graph)
    if args.oracle_sigma is not None:
        flows = oracle_flows(scene, graph, cfg.grid_spacing, args.oracle_sigma, seed=cfg.seed + 3)
        io.write_flows(out / "flows_oracle.csv", graph, flows)


def cmd_eval(cfg: PipelineConfig, args) -> None:
    from .synth import absolute_rms, reprojection_rms, scene_pair_errors

    scene_dir = _need(args.scene, "--scene", "scene directory")
    homs = io.read_homographies(_need(str(scene_dir / "homographies.csv"), "--scene",
                                      "homographies file"))
    truth = io.read_keypoints(_need(str(scene_dir / "keypoints_true.csv"), "--scene",
                                    "true keypoints file"))
    if args.refined is not None:
        est = io.read_refined(_need(args.refined, "--refined", "refined keypoints file"))
    else:
        est = io.read_keypoints(_need(cfg.keypoints, "--keypoints", "keypoints file"))
    views = truth.image_ids
    if sorted(homs) != sorted(views) or est.image_ids != views:
        raise io.DataError("scene, true keypoints and estimates cover different images")
    true_kp = np.stack([truth.positions[i] for i in views])
    est_kp = np.stack([est.positions[i][np.argsort(est.kp_ids[i])] for i in views])
    if est_kp.shape != true_kp.shape:
        raise io.DataError("estimates and true keypoints differ in count")
    scene = _EvalScene(np.stack([homs[i] for i in views]), true_kp)
    curve = evaluate_mma(scene_pair_errors(scene, est_kp), cfg.thresholds)
    out = _out(cfg)
    io.write_mma_curve(out / "mma_curve.csv", curve)
    io.write_report(out / "report.json", {
        "mma": curve.as_dict(),
        "rms_reprojection": reprojection_rms(scene, est_kp),
        "rms_absolute": absolute_rms(scene, est_kp),
    })


class _EvalScene:
    """The parts of a synthetic scene the error metrics need."""

    def __init__(self, homographies: np.ndarray, true_keypoints: np.ndarray):
        self.homographies = homographies
        self.true_keypoints = true_keypoints

    @property
    def num_views(self) -> int:
        return len(self.homographies)

    def pair_homography(self, i: int, j: int) -> np.ndarray:
        return self.homographies[j] @ np.linalg.inv(self.homographies[i])


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("KPREFINE_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config(args)
        cmd = args.command
        if cmd == "align":
            cmd_align(cfg)
        elif cmd == "partition":
            cmd_partition(cfg)
        elif cmd == "refine":
            cmd_refine(cfg)
        elif cmd == "pipeline":
            cmd_pipeline(cfg)
        elif cmd == "refine-query":
            cmd_refine_query(cfg, args)
        elif cmd == "synth":
            cmd_synth(cfg, args)
        elif cmd == "eval":
            cmd_eval(cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, GraphError, ProblemError, SolveError, SceneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
