"""CSV artifacts, PGM images and JSON reports.

Floats are written with ``repr``, the shortest text that parses back to the
same double, so every write/read cycle is lossless.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import ImageRef, MatchGraph, build_graph
from .optimize import FlowSet

KEYPOINT_COLUMNS = ("image_id", "kp_id", "x", "y")
MATCH_COLUMNS = ("image_a", "kp_a", "image_b", "kp_b", "similarity")
GRID_COLUMNS = tuple(
    f"{axis}_{gy}{gx}" for gy in (-1, 0, 1) for gx in (-1, 0, 1) for axis in ("dx", "dy")
)
FLOW_COLUMNS = ("image_u", "kp_u", "image_v", "kp_v", "spacing") + GRID_COLUMNS
FLOW_OPTIONAL = ("low_confidence",)
TRACK_COLUMNS = ("node_id", "track_id", "component_id", "is_root")
REFINED_COLUMNS = ("image_id", "kp_id", "x0", "y0", "x", "y", "track_id", "component_id")
HOMOGRAPHY_COLUMNS = ("image_id",) + tuple(f"h{r}{c}" for r in range(3) for c in range(3))
QUERY_COLUMNS = ("query_id", "x", "y")
HYPOTHESIS_COLUMNS = ("query_id", "point_id", "similarity", "dx", "dy")
QUERY_RESULT_COLUMNS = ("query_id", "point_id", "x", "y")


class DataError(ValueError):
    """Malformed or inconsistent input artifact."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# generic table access


def write_table(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


class _Table:
    """Rows of a CSV file with typed, line-numbered field access."""

    def __init__(self, path, columns: Sequence[str], optional: Sequence[str] = ()):
        self.path = Path(path)
        if not self.path.is_file():
            raise DataError(f"{self.path}: file not found")
        with open(self.path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise DataError(f"{self.path}: empty file, expected header {','.join(columns)}")
        header = [h.strip() for h in rows[0]]
        allowed = set(columns) | set(optional)
        missing = [c for c in columns if c not in header]
        unknown = [h for h in header if h not in allowed]
        if missing or unknown or len(set(header)) != len(header):
            raise DataError(
                f"{self.path}: bad header {','.join(header)}; expected {','.join(columns)}"
                + (f" (optional: {','.join(optional)})" if optional else "")
            )
        self.header = header
        self.index = {h: i for i, h in enumerate(header)}
        self.rows = [(n, r) for n, r in enumerate(rows[1:], start=2) if any(x.strip() for x in r)]

    def has(self, column: str) -> bool:
        return column in self.index

    def __iter__(self):
        for line, row in self.rows:
            if len(row) != len(self.header):
                raise DataError(
                    f"{self.path}:{line}: expected {len(self.header)} fields, got {len(row)}"
                )
            yield line, row

    def get(self, line: int, row, column: str, kind=float):
        text = row[self.index[column]].strip()
        try:
            if kind is int:
                return int(text)
            if kind is bool:
                if text not in ("0", "1"):
                    raise ValueError(text)
                return text == "1"
            value = float(text)
        except ValueError:
            raise DataError(f"{self.path}:{line}: column {column}: cannot parse {text!r}") from None
        if not math.isfinite(value):
            raise DataError(f"{self.path}:{line}: column {column}: non-finite value {text!r}")
        return value


# ---------------------------------------------------------------------------
# keypoints and matches


@dataclass
class KeypointTable:
    """Keypoints grouped per image, in file order."""

    image_ids: list[int]
    kp_ids: dict[int, list[int]]
    positions: dict[int, np.ndarray]

    def lookup(self) -> dict[tuple[int, int], int]:
        """``(image_id, kp_id)`` to index within that image."""
        return {(i, k): n for i in self.image_ids for n, k in enumerate(self.kp_ids[i])}

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.positions[i] for i in self.image_ids]) if self.image_ids \
            else np.zeros((0, 2))


def read_keypoints(path) -> KeypointTable:
    t = _Table(path, KEYPOINT_COLUMNS)
    ids: list[int] = []
    kps: dict[int, list[int]] = {}
    pos: dict[int, list[tuple[float, float]]] = {}
    seen = set()
    for line, row in t:
        img = t.get(line, row, "image_id", int)
        kp = t.get(line, row, "kp_id", int)
        if (img, kp) in seen:
            raise DataError(f"{t.path}:{line}: duplicate keypoint ({img}, {kp})")
        seen.add((img, kp))
        if img not in kps:
            ids.append(img)
            kps[img], pos[img] = [], []
        kps[img].append(kp)
        pos[img].append((t.get(line, row, "x"), t.get(line, row, "y")))
    return KeypointTable(ids, kps, {i: np.asarray(pos[i], dtype=np.float64).reshape(-1, 2)
                                    for i in ids})


def write_keypoints(path, image_ids: Sequence[int], kp_ids: Sequence[Sequence[int]],
                    positions: Sequence[np.ndarray]) -> None:
    rows = []
    for img, ks, ps in zip(image_ids, kp_ids, positions):
        rows.extend((img, k, p[0], p[1]) for k, p in zip(ks, ps))
    write_table(path, KEYPOINT_COLUMNS, rows)


def read_matches(path, keypoints: KeypointTable) -> dict[tuple[int, int], list[tuple[int, int, float]]]:
    """Matches keyed by image pair, as keypoint indices within each image."""
    t = _Table(path, MATCH_COLUMNS)
    lookup = keypoints.lookup()
    out: dict[tuple[int, int], list[tuple[int, int, float]]] = {}
    for line, row in t:
        ia, ka = t.get(line, row, "image_a", int), t.get(line, row, "kp_a", int)
        ib, kb = t.get(line, row, "image_b", int), t.get(line, row, "kp_b", int)
        s = t.get(line, row, "similarity")
        for img, kp, col in ((ia, ka, "kp_a"), (ib, kb, "kp_b")):
            if (img, kp) not in lookup:
                raise DataError(f"{t.path}:{line}: column {col}: unknown keypoint ({img}, {kp})")
        if not 0.0 < s <= 1.0:
            raise DataError(f"{t.path}:{line}: column similarity: {s} outside (0, 1]")
        out.setdefault((ia, ib), []).append((lookup[(ia, ka)], lookup[(ib, kb)], s))
    return out


def write_matches(path, graph: MatchGraph) -> None:
    """One row per match (the even directed edge of each pair)."""
    rows = []
    for e in range(0, graph.num_edges, 2):
        u, v = graph.src[e], graph.dst[e]
        rows.append((graph.node_image[u], graph.node_kp[u], graph.node_image[v],
                     graph.node_kp[v], graph.similarity[e]))
    write_table(path, MATCH_COLUMNS, rows)


def load_graph(keypoints_path, matches_path, images: dict[int, ImageRef] | None = None,
               min_similarity: float | None = None) -> MatchGraph:
    """Graph from keypoint and match files. Image sizes come from ``images``
    when given, otherwise from the keypoint extent."""
    kt = read_keypoints(keypoints_path)
    matches = read_matches(matches_path, kt)
    if min_similarity is not None:
        matches = {k: [m for m in v if m[2] >= min_similarity] for k, v in matches.items()}
    refs = []
    for i in kt.image_ids:
        if images is not None:
            if i not in images:
                raise DataError(f"keypoints reference image {i} with no image file")
            refs.append(images[i])
        else:
            p = kt.positions[i]
            w = int(max(1, math.ceil(p[:, 0].max()) + 1)) if len(p) else 1
            h = int(max(1, math.ceil(p[:, 1].max()) + 1)) if len(p) else 1
            refs.append(ImageRef(i, w, h))
    return build_graph(refs, kt.positions, matches, keypoint_ids=kt.kp_ids)


# ---------------------------------------------------------------------------
# flows


def write_flows(path, graph: MatchGraph, flows: FlowSet) -> None:
    rows = []
    for e in np.flatnonzero(flows.present):
        u, v = graph.src[e], graph.dst[e]
        rows.append((graph.node_image[u], graph.node_kp[u], graph.node_image[v], graph.node_kp[v],
                     flows.spacing[e], *flows.grids[e].reshape(-1), flows.low_confidence[e]))
    write_table(path, FLOW_COLUMNS + FLOW_OPTIONAL, rows)


def read_flows(path, graph: MatchGraph) -> FlowSet:
    """Flows attached to the matching directed edges of ``graph``."""
    t = _Table(path, FLOW_COLUMNS, FLOW_OPTIONAL)
    node = graph.node_index()
    edge_of = {(int(u), int(v)): e for e, (u, v) in enumerate(zip(graph.src, graph.dst))}
    flows = FlowSet.empty(graph.num_edges)
    for line, row in t:
        key = []
        for ci, ck in (("image_u", "kp_u"), ("image_v", "kp_v")):
            ref = (t.get(line, row, ci, int), t.get(line, row, ck, int))
            if ref not in node:
                raise DataError(f"{t.path}:{line}: column {ck}: unknown keypoint {ref}")
            key.append(node[ref])
        e = edge_of.get(tuple(key))
        if e is None:
            raise DataError(f"{t.path}:{line}: no match between nodes {key[0]} and {key[1]}")
        if flows.present[e]:
            raise DataError(f"{t.path}:{line}: duplicate flow for edge {e}")
        spacing = t.get(line, row, "spacing")
        if spacing <= 0:
            raise DataError(f"{t.path}:{line}: column spacing: must be positive")
        grid = [t.get(line, row, c) for c in GRID_COLUMNS]
        low = t.get(line, row, "low_confidence", bool) if t.has("low_confidence") else False
        flows.set(e, np.asarray(grid).reshape(3, 3, 2), spacing, low)
    return flows


# ---------------------------------------------------------------------------
# tracks and refined keypoints


def write_tracks(path, track_of, node_component, is_root) -> None:
    write_table(path, TRACK_COLUMNS,
                zip(range(len(track_of)), track_of, node_component, is_root))


def read_tracks(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = _Table(path, TRACK_COLUMNS)
    rows = [(t.get(l, r, "node_id", int), t.get(l, r, "track_id", int),
             t.get(l, r, "component_id", int), t.get(l, r, "is_root", bool)) for l, r in t]
    ids = [r[0] for r in rows]
    if ids != list(range(len(rows))):
        raise DataError(f"{t.path}: node ids must run 0..{len(rows) - 1} in order")
    arr = np.asarray([r[1:] for r in rows], dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2].astype(bool)


def write_refined(path, graph: MatchGraph, positions, track_of, node_component) -> None:
    p0 = graph.initial_positions
    write_table(path, REFINED_COLUMNS, (
        (graph.node_image[n], graph.node_kp[n], p0[n, 0], p0[n, 1], positions[n, 0],
         positions[n, 1], track_of[n], node_component[n]) for n in range(graph.num_nodes)
    ))


def read_refined(path) -> KeypointTable:
    """Refined keypoints as a keypoint table of their new positions."""
    t = _Table(path, REFINED_COLUMNS)
    ids: list[int] = []
    kps: dict[int, list[int]] = {}
    pos: dict[int, list] = {}
    for line, row in t:
        img = t.get(line, row, "image_id", int)
        if img not in kps:
            ids.append(img)
            kps[img], pos[img] = [], []
        kps[img].append(t.get(line, row, "kp_id", int))
        pos[img].append((t.get(line, row, "x"), t.get(line, row, "y")))
    return KeypointTable(ids, kps, {i: np.asarray(pos[i]).reshape(-1, 2) for i in ids})


# ---------------------------------------------------------------------------
# query refinement tables


def read_queries(path) -> dict[int, np.ndarray]:
    t = _Table(path, QUERY_COLUMNS)
    out = {}
    for line, row in t:
        q = t.get(line, row, "query_id", int)
        if q in out:
            raise DataError(f"{t.path}:{line}: duplicate query {q}")
        out[q] = np.array([t.get(line, row, "x"), t.get(line, row, "y")])
    return out


def read_hypotheses(path, queries: dict[int, np.ndarray]) -> dict[int, dict[int, tuple[list, list]]]:
    """Per query, per 3D point: similarities and flows, in file order."""
    t = _Table(path, HYPOTHESIS_COLUMNS)
    out: dict[int, dict[int, tuple[list, list]]] = {}
    for line, row in t:
        q = t.get(line, row, "query_id", int)
        if q not in queries:
            raise DataError(f"{t.path}:{line}: column query_id: unknown query {q}")
        s = t.get(line, row, "similarity")
        if s <= 0:
            raise DataError(f"{t.path}:{line}: column similarity: must be positive")
        entry = out.setdefault(q, {}).setdefault(t.get(line, row, "point_id", int), ([], []))
        entry[0].append(s)
        entry[1].append((t.get(line, row, "dx"), t.get(line, row, "dy")))
    return out


# ---------------------------------------------------------------------------
# images


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary 8-bit PGM from intensities in [0, 1]."""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    pix = np.frombuffer(raw, dtype=dtype, count=count, offset=pos + 1)
    return pix.reshape(h, w).astype(np.float64) / maxval


def read_images(directory) -> dict[int, ImageRef]:
    """Every ``<image_id>.pgm`` in ``directory``."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: image directory not found")
    out = {}
    for f in sorted(d.glob("*.pgm")):
        try:
            image_id = int(f.stem)
        except ValueError:
            raise DataError(f"{f}: image files must be named <image_id>.pgm") from None
        pix = read_pgm(f)
        out[image_id] = ImageRef(image_id, pix.shape[1], pix.shape[0], pix)
    if not out:
        raise DataError(f"{d}: no .pgm images found")
    return out


# ---------------------------------------------------------------------------
# synthetic scene dumps


def write_scene(directory, scene, perturbed: np.ndarray, graph: MatchGraph | None = None) -> None:
    d = Path(directory)
    for img in scene.images:
        write_pgm(d / "images" / f"{img.image_id:04d}.pgm", img.pixels)
    write_table(d / "homographies.csv", HOMOGRAPHY_COLUMNS,
                ((i, *scene.homographies[i].reshape(-1)) for i in range(scene.num_views)))
    ids = [img.image_id for img in scene.images]
    kp = [range(scene.num_keypoints)] * scene.num_views
    write_keypoints(d / "keypoints_true.csv", ids, kp, scene.true_keypoints)
    write_keypoints(d / "keypoints_perturbed.csv", ids, kp, perturbed)
    if graph is not None:
        write_matches(d / "matches.csv", graph)


def read_homographies(path) -> dict[int, np.ndarray]:
    t = _Table(path, HOMOGRAPHY_COLUMNS)
    out = {}
    for line, row in t:
        h = np.array([t.get(line, row, c) for c in HOMOGRAPHY_COLUMNS[1:]]).reshape(3, 3)
        out[t.get(line, row, "image_id", int)] = h
    return out


# ---------------------------------------------------------------------------
# reports


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def write_report(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(report), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_mma_curve(path, curve) -> None:
    write_table(path, ("threshold", "accuracy"), zip(curve.thresholds, curve.accuracy))
