"""Synthetic planar scenes with exact homographies, oracle flows and MMA scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .align import GRID_OFFSETS, GRID_SPACING, PATCH_SIZE, FlowField
from .graph import ImageRef, MatchGraph, build_graph

MAX_ATTEMPTS = 1000
TEXTURE_SIGMA = 1.5
AUC_CUTOFFS = (2.0, 5.0, 10.0)


class SceneError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# homographies


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    p = pts @ h[:, :2].T + h[:, 2]
    return p[..., :2] / p[..., 2:3]


def homography_jacobian(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """``(n, 2, 2)`` derivative of the projected point w.r.t. the input point."""
    pts = np.asarray(pts, dtype=np.float64)
    p = pts @ h[:, :2].T + h[:, 2]
    w = p[:, 2]
    num = h[None, :2, :2] * w[:, None, None] - p[:, :2, None] * h[None, 2:3, :2]
    return num / (w * w)[:, None, None]


def random_homography(rng: np.random.Generator, size: tuple[int, int], magnitude: float) -> np.ndarray:
    """Mild random warp about the image center; ``magnitude=0`` gives the identity.

    At magnitude 1: rotation up to 5 degrees, scale within 5%, anisotropy
    within 3%, translation up to 8 px and a faint perspective term.
    """
    w, h = size
    c = np.array([[1, 0, -(w - 1) / 2], [0, 1, -(h - 1) / 2], [0, 0, 1.0]])
    angle = np.deg2rad(5.0) * magnitude * rng.uniform(-1, 1)
    scale = 1.0 + 0.05 * magnitude * rng.uniform(-1, 1)
    aniso = 1.0 + 0.03 * magnitude * rng.uniform(-1, 1)
    shift = 8.0 * magnitude * rng.uniform(-1, 1, 2)
    persp = 2e-5 * magnitude * rng.uniform(-1, 1, 2)
    ca, sa = np.cos(angle), np.sin(angle)
    a = np.array([[ca, -sa], [sa, ca]]) @ np.diag([scale * aniso, scale / aniso])
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = shift
    m[2, :2] = persp
    return np.linalg.inv(c) @ m @ c


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SyntheticScene:
    """Views of a textured plane. ``homographies[i]`` maps plane points to view ``i``."""

    seed: int
    texture: np.ndarray
    texture_pad: int
    homographies: np.ndarray  # (V, 3, 3)
    images: list[ImageRef]
    canonical_points: np.ndarray  # (n, 2)
    true_keypoints: np.ndarray  # (V, n, 2)

    @property
    def num_views(self) -> int:
        return len(self.images)

    @property
    def num_keypoints(self) -> int:
        return len(self.canonical_points)

    def pair_homography(self, i: int, j: int) -> np.ndarray:
        """``H_j H_i^-1``: view ``i`` pixels to view ``j`` pixels."""
        return self.homographies[j] @ np.linalg.inv(self.homographies[i])


def make_texture(rng: np.random.Generator, shape: tuple[int, int], sigma: float = TEXTURE_SIGMA) -> np.ndarray:
    """Band-limited noise rescaled to [0, 1]."""
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    t -= t.min()
    return t / t.max()


def render_view(texture: np.ndarray, pad: int, h: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Sample the texture at ``H^-1`` of every pixel, quantized to 8 bits."""
    w, hh = size
    ys, xs = np.mgrid[0:hh, 0:w].astype(np.float64)
    plane = apply_homography(np.linalg.inv(h), np.stack([xs.ravel(), ys.ravel()], axis=1))
    vals = map_coordinates(texture, [plane[:, 1] + pad, plane[:, 0] + pad], order=3, mode="reflect")
    return np.round(np.clip(vals, 0.0, 1.0) * 255.0).reshape(hh, w) / 255.0


def generate_scene(
    seed: int = 0,
    num_views: int = 20,
    image_size: tuple[int, int] | int = (256, 256),
    num_keypoints: int = 200,
    homography_magnitude: float = 1.0,
    homographies: Sequence[np.ndarray] | None = None,
    margin: float = PATCH_SIZE // 2 + GRID_SPACING,
) -> SyntheticScene:
    """Deterministic scene; keypoints land at least ``margin`` px inside every view."""
    if num_views < 2:
        raise ValueError("a scene needs at least two views")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    w, h = image_size
    rng = np.random.default_rng(seed)
    if homographies is None:
        homs = np.stack([random_homography(rng, image_size, homography_magnitude)
                         for _ in range(num_views)])
    else:
        homs = np.asarray(homographies, dtype=np.float64).reshape(num_views, 3, 3)
        if np.any(np.abs(np.linalg.det(homs)) < 1e-12):
            raise ValueError("homographies must be invertible")
    pad = int(max(w, h) // 4)
    texture = make_texture(rng, (h + 2 * pad, w + 2 * pad))
    images = [ImageRef(i, w, h, render_view(texture, pad, homs[i], image_size))
              for i in range(num_views)]

    def inside(pt):
        proj = np.stack([apply_homography(hv, pt[None])[0] for hv in homs])
        return np.all((proj >= margin) & (proj <= np.array([w - 1, h - 1]) - margin))

    points = np.empty((num_keypoints, 2))
    for k in range(num_keypoints):
        for _ in range(MAX_ATTEMPTS):
            pt = rng.uniform([0, 0], [w - 1, h - 1])
            if inside(pt):
                points[k] = pt
                break
        else:
            raise SceneError(
                f"keypoint {k}: no location within {margin} px of every view border "
                f"after {MAX_ATTEMPTS} attempts"
            )
    true_kp = np.stack([apply_homography(hv, points) for hv in homs])
    return SyntheticScene(seed, texture, pad, homs, images, points, true_kp)


def perturb_keypoints(
    scene: SyntheticScene, distribution: str = "uniform", magnitude: float = 3.0,
    seed: int = 0, K: float = 16.0,
) -> np.ndarray:
    """Noisy copies of the true projections: uniform in ``[-r, r]`` per coordinate
    or Gaussian with standard deviation ``sigma``. Returns ``(V, n, 2)``."""
    if magnitude < 0 or magnitude > K:
        raise ValueError(f"perturbation magnitude must lie in [0, {K}]")
    rng = np.random.default_rng(seed)
    shape = scene.true_keypoints.shape
    if distribution == "uniform":
        noise = rng.uniform(-magnitude, magnitude, shape)
    elif distribution == "gaussian":
        noise = rng.normal(0.0, magnitude, shape)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return scene.true_keypoints + noise


# ---------------------------------------------------------------------------
# graphs and oracle flows


def scene_graph(
    scene: SyntheticScene, keypoints: np.ndarray | None = None, seed: int = 0,
    similarity_range: tuple[float, float] = (0.7, 1.0),
    pairs: Sequence[tuple[int, int]] | None = None, outlier_fraction: float = 0.0,
    outlier_similarity: tuple[float, float] = (0.5, 0.85),
) -> MatchGraph:
    """Match graph linking the same plane point in every pair of views.

    With ``outlier_fraction > 0`` that share of matches instead points at a
    random other keypoint of the second view, with similarity drawn from
    ``outlier_similarity``.
    """
    kps = scene.true_keypoints if keypoints is None else keypoints
    rng = np.random.default_rng(seed)
    pairs = list(combinations(range(scene.num_views), 2)) if pairs is None else pairs
    n = scene.num_keypoints
    matches = {}
    for i, j in pairs:
        sims = rng.uniform(*similarity_range, n)
        target = np.arange(n)
        if outlier_fraction > 0 and n > 1:
            wrong = rng.random(n) < outlier_fraction
            shift = rng.integers(1, n, n)
            target = np.where(wrong, (target + shift) % n, target)
            sims = np.where(wrong, rng.uniform(*outlier_similarity, n), sims)
        matches[(i, j)] = [(k, int(t), float(s)) for k, (t, s) in enumerate(zip(target, sims))]
    return build_graph(scene.images, list(kps), matches)


def oracle_grid(h_ij: np.ndarray, u0, v0, spacing: float = GRID_SPACING) -> np.ndarray:
    """``grid[g] = H(u0 + g) - v0 - g`` for the 3x3 offsets ``g``."""
    offs = GRID_OFFSETS.reshape(9, 2) * spacing
    pts = np.asarray(u0, dtype=np.float64) + offs
    return (apply_homography(h_ij, pts) - np.asarray(v0) - offs).reshape(3, 3, 2)


def oracle_flow_field(
    scene: SyntheticScene, i: int, u0, j: int, v0,
    spacing: float = GRID_SPACING, sigma: float = 0.0, rng: np.random.Generator | None = None,
) -> FlowField:
    grid = oracle_grid(scene.pair_homography(i, j), u0, v0, spacing)
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        grid = grid + rng.normal(0.0, sigma, grid.shape)
    return FlowField(grid, spacing)


def oracle_flows(
    scene: SyntheticScene, graph: MatchGraph, spacing: float = GRID_SPACING,
    sigma: float = 0.0, seed: int = 0,
):
    """Oracle flow for every directed edge of ``graph``, noise drawn in edge order."""
    from .optimize import FlowSet

    flows = FlowSet.empty(graph.num_edges)
    offs = GRID_OFFSETS.reshape(9, 2) * spacing
    img = graph.node_image
    key = img[graph.src] * scene.num_views + img[graph.dst]
    for k in np.unique(key):
        e = np.flatnonzero(key == k)
        i, j = divmod(int(k), scene.num_views)
        u0 = graph.initial_positions[graph.src[e]]
        v0 = graph.initial_positions[graph.dst[e]]
        pts = (u0[:, None, :] + offs[None]).reshape(-1, 2)
        proj = apply_homography(scene.pair_homography(i, j), pts).reshape(-1, 9, 2)
        flows.grids[e] = (proj - v0[:, None, :] - offs[None]).reshape(-1, 3, 3, 2)
    if sigma > 0:
        flows.grids += np.random.default_rng(seed).normal(0.0, sigma, flows.grids.shape)
    flows.spacing[:] = spacing
    flows.present[:] = True
    return flows


# ---------------------------------------------------------------------------
# error metrics


def absolute_rms(scene: SyntheticScene, keypoints: np.ndarray) -> float:
    """RMS distance between keypoints ``(V, n, 2)`` and the true projections."""
    d = keypoints - scene.true_keypoints
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def fit_plane_points(scene: SyntheticScene, keypoints: np.ndarray, iterations: int = 10) -> np.ndarray:
    """Per track, the plane point whose projections best fit ``keypoints`` (Gauss-Newton)."""
    homs = scene.homographies
    x = apply_homography(np.linalg.inv(homs[0]), keypoints[0])
    for _ in range(iterations):
        jtj = np.zeros((len(x), 2, 2))
        jtr = np.zeros((len(x), 2))
        for hv, obs in zip(homs, keypoints):
            r = apply_homography(hv, x) - obs
            jac = homography_jacobian(hv, x)
            jtj += np.einsum("nki,nkj->nij", jac, jac)
            jtr += np.einsum("nki,nk->ni", jac, r)
        x = x - np.linalg.solve(jtj, jtr[..., None])[..., 0]
    return x


def reprojection_rms(scene: SyntheticScene, keypoints: np.ndarray) -> float:
    """Gauge-free error: RMS distance from each keypoint to the projection of its
    track's best-fitting plane point. A rigid shift common to a whole track
    costs nothing, which makes the value comparable before and after
    refinement that anchors one keypoint per track."""
    x = fit_plane_points(scene, keypoints)
    proj = np.stack([apply_homography(hv, x) for hv in scene.homographies])
    d = keypoints - proj
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


# ---------------------------------------------------------------------------
# mean matching accuracy


@dataclass
class MMACurve:
    thresholds: np.ndarray
    accuracy: np.ndarray
    auc: dict[float, float] = field(default_factory=dict)
    num_pairs: int = 0
    excluded_pairs: int = 0

    def as_dict(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "accuracy": [float(a) for a in self.accuracy],
            "auc": {f"{k:g}": float(v) for k, v in self.auc.items()},
            "num_pairs": self.num_pairs,
            "excluded_pairs": self.excluded_pairs,
        }


def _mean_accuracy(pairs: list[np.ndarray], theta: np.ndarray) -> np.ndarray:
    per_pair = [np.mean(e[:, None] <= theta[None, :], axis=0) for e in pairs]
    return np.mean(per_pair, axis=0)


def evaluate_mma(
    pair_errors: Sequence[np.ndarray], thresholds=tuple(range(1, 11)),
    auc_cutoffs: Sequence[float] = AUC_CUTOFFS,
) -> MMACurve:
    """Mean over image pairs of the fraction of matches within each threshold.

    AUC at a cutoff is the trapezoidal area of the curve between 0 and the
    cutoff, sampled at 0, the thresholds below the cutoff and the cutoff
    itself, divided by the cutoff. Pairs without matches are skipped.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly ascending")
    errs = [np.asarray(e, dtype=np.float64).ravel() for e in pair_errors]
    if any(np.any(e < 0) or not np.all(np.isfinite(e)) for e in errs):
        raise ValueError("errors must be finite and non-negative")
    kept = [e for e in errs if len(e)]
    excluded = len(errs) - len(kept)
    if not kept:
        return MMACurve(thresholds, np.zeros(len(thresholds)), {float(c): 0.0 for c in auc_cutoffs},
                        0, excluded)
    acc = _mean_accuracy(kept, thresholds)
    auc = {}
    for cut in auc_cutoffs:
        xs = np.unique(np.concatenate([[0.0, cut], thresholds[thresholds < cut]]))
        ys = _mean_accuracy(kept, xs)
        auc[float(cut)] = float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)) / cut)
    return MMACurve(thresholds, acc, auc, len(kept), excluded)


def scene_pair_errors(scene: SyntheticScene, keypoints: np.ndarray, reference: int = 0) -> list[np.ndarray]:
    """Per (reference, other) view pair, the transfer error of every match."""
    out = []
    for j in range(scene.num_views):
        if j == reference:
            continue
        proj = apply_homography(scene.pair_homography(reference, j), keypoints[reference])
        out.append(np.linalg.norm(proj - keypoints[j], axis=1))
    return out


# ---------------------------------------------------------------------------
# large synthetic families (no images)


@dataclass
class SyntheticFamily:
    graph: MatchGraph
    flows: object  # FlowSet
    true_offsets: np.ndarray  # (n, 2)
    track_of: np.ndarray


def synthetic_family(
    seed: int = 0, num_tracks: int = 5000, views: int = 20, matches_per_track: int = 30,
    perturbation: float = 3.0, sigma: float = 0.3, spacing: float = GRID_SPACING,
) -> SyntheticFamily:
    """Many independent tracks with precomputed, mildly affine flow fields.

    Each track has one keypoint per view and ``matches_per_track`` random view
    pairs. The flow of edge u->v is ``c + A g`` with a small random ``A`` and
    ``c`` chosen so that the true offsets give a zero residual, plus Gaussian
    noise ``sigma`` per grid node.
    """
    from .optimize import FlowSet

    rng = np.random.default_rng(seed)
    n_pairs = views * (views - 1) // 2
    if matches_per_track > n_pairs:
        raise ValueError("more matches per track than view pairs")
    all_pairs = np.array(list(combinations(range(views), 2)))
    images = [ImageRef(i, 1024, 1024) for i in range(views)]
    kps = rng.uniform(100, 900, (views, num_tracks, 2))
    truth = rng.uniform(-perturbation, perturbation, (views, num_tracks, 2))
    matches: dict[tuple[int, int], list] = {}
    for t in range(num_tracks):
        chosen = np.sort(rng.choice(n_pairs, matches_per_track, replace=False))
        sims = rng.uniform(0.7, 1.0, matches_per_track)
        for (a, b), s in zip(all_pairs[chosen], sims):
            matches.setdefault((int(a), int(b)), []).append((t, t, float(s)))
    matches = dict(sorted(matches.items()))
    graph = build_graph(images, list(kps), matches)
    true_off = truth.reshape(-1, 2)
    flows = FlowSet.empty(graph.num_edges)
    amat = rng.uniform(-0.02, 0.02, (graph.num_edges, 2, 2))
    xu, xv = true_off[graph.src], true_off[graph.dst]
    c = xv - xu - np.einsum("eij,ej->ei", amat, xu)
    g = GRID_OFFSETS * spacing  # (3, 3, 2)
    flows.grids[:] = c[:, None, None, :] + np.einsum("eij,yxj->eyxi", amat, g)
    flows.grids += rng.normal(0.0, sigma, flows.grids.shape)
    flows.spacing[:] = spacing
    flows.present[:] = True
    track_of = np.tile(np.arange(num_tracks), views)
    return SyntheticFamily(graph, flows, true_off, track_of)
