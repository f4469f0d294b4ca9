"""Two-view patch alignment and 3x3 flow fields.

Pixel convention: ``pixels[row, col]`` is the intensity at ``(x, y) = (col, row)``.
A flow ``d`` from ``u`` to ``v`` means that ``u`` corresponds to ``v + d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import ImageRef

PATCH_SIZE = 33
GRID_SIZE = 17
GRID_SPACING = 8.0
FINE_ZOOM = 2.0
MAX_LONG_EDGE = 1600
AGGREGATION_RADIUS = 4


class AlignError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    center: tuple[float, float]
    scale: float
    samples: np.ndarray  # (P, P)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class DescriptorGrid:
    data: np.ndarray  # (h, w, dim); rows are unit norm or all zero

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CorrelationVolume:
    values: np.ndarray  # (h, w, h * w)

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]


@dataclass
class FlowField:
    """3x3 displacement grid; ``grid[iy, ix]`` sits at offset ((ix-1)*spacing, (iy-1)*spacing)."""

    grid: np.ndarray
    spacing: float = GRID_SPACING
    direction: tuple[int, int] | None = None
    low_confidence: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=bool))

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64).reshape(3, 3, 2)
        if not np.all(np.isfinite(self.grid)):
            raise AlignError(f"flow field {self.direction}: non-finite displacement")
        if self.spacing <= 0:
            raise AlignError("flow grid spacing must be positive")

    @classmethod
    def constant(cls, d, spacing: float = GRID_SPACING, direction=None) -> "FlowField":
        return cls(np.broadcast_to(np.asarray(d, dtype=np.float64), (3, 3, 2)).copy(),
                   spacing, direction)

    @property
    def is_low_confidence(self) -> bool:
        return bool(self.low_confidence.any())


# ---------------------------------------------------------------------------
# sampling


def bilinear(pixels: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup with replicate border."""
    h, w = pixels.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bottom = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _require_pixels(image: ImageRef) -> np.ndarray:
    if image.pixels is None:
        raise AlignError(
            f"image {image.image_id} has no pixel data; supply precomputed flows instead"
        )
    return image.pixels


def sample_patches(pixels: np.ndarray, centers: np.ndarray, scale: float, size: int) -> np.ndarray:
    """Batch version of :func:`sample_patch`; ``centers`` is ``(B, 2)``."""
    if size % 2 == 0:
        raise AlignError(f"patch size must be odd, got {size}")
    if scale <= 0:
        raise AlignError("patch scale must be positive")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    r = (size - 1) / 2
    offs = scale * (np.arange(size) - r)
    xs = centers[:, 0, None, None] + offs[None, None, :]
    ys = centers[:, 1, None, None] + offs[None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    return bilinear(pixels, xs, ys)


def sample_patch(image: ImageRef, center, scale: float = 1.0, size: int = PATCH_SIZE) -> Patch:
    pixels = _require_pixels(image)
    samples = sample_patches(pixels, np.asarray(center)[None], scale, size)[0]
    return Patch((float(center[0]), float(center[1])), float(scale), samples)


# ---------------------------------------------------------------------------
# descriptors and correlation


def _descriptor_stride(patch_size: int, grid_size: int) -> int:
    if grid_size % 2 == 0 or grid_size > patch_size:
        raise AlignError(f"grid size must be odd and at most {patch_size}, got {grid_size}")
    if grid_size == 1:
        return 1
    stride, rem = divmod(patch_size - 1, grid_size - 1)
    if rem:
        raise AlignError(f"grid size {grid_size} does not divide patch size {patch_size}")
    return stride


def _neighborhood_index(patch_size: int, grid_size: int) -> np.ndarray:
    """Flat indices into the edge-padded patch of every 3x3 descriptor window."""
    stride = _descriptor_stride(patch_size, grid_size)
    q = patch_size + 2
    centers = 1 + stride * np.arange(grid_size)
    d = np.array([-1, 0, 1])
    rows = centers[:, None, None, None] + d[None, None, :, None]
    cols = centers[None, :, None, None] + d[None, None, None, :]
    return (rows * q + cols).reshape(grid_size, grid_size, 9)


def descriptors_batch(samples: np.ndarray, grid_size: int = GRID_SIZE) -> np.ndarray:
    """``(B, P, P)`` patches to ``(B, g, g, 9)`` unit descriptors.

    Each descriptor is the mean-subtracted 3x3 neighborhood around a grid
    node (edge-replicated at the patch border); constant windows give zeros.
    """
    b, p, _ = samples.shape
    idx = _neighborhood_index(p, grid_size)
    padded = np.pad(samples, ((0, 0), (1, 1), (1, 1)), mode="edge").reshape(b, -1)
    desc = np.ascontiguousarray(padded[:, idx])
    desc -= desc.mean(axis=-1, keepdims=True)
    norm = np.sqrt(np.einsum("...k,...k->...", desc, desc))[..., None]
    scale = max(1.0, float(np.abs(samples).max(initial=0.0)))
    flat = norm <= 1e-6 * scale
    desc /= np.where(flat, 1.0, norm)
    desc[np.broadcast_to(flat, desc.shape)] = 0.0
    return desc


def dense_descriptors(patch: Patch, grid_size: int = GRID_SIZE) -> DescriptorGrid:
    return DescriptorGrid(descriptors_batch(patch.samples[None], grid_size)[0])


def _channel_normalize(m: np.ndarray) -> np.ndarray:
    """ReLU then L2 normalization along the last axis, in place; zero stays zero."""
    np.maximum(m, 0.0, out=m)
    norm = np.sqrt(np.einsum("...k,...k->...", m, m))
    inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
    m *= inv[..., None]
    return m


def correlate_normalize(a: DescriptorGrid, b: DescriptorGrid) -> CorrelationVolume:
    if a.data.shape != b.data.shape:
        raise AlignError(f"descriptor grid shapes differ: {a.data.shape} vs {b.data.shape}")
    h, w, d = a.data.shape
    m = a.data.reshape(h * w, d) @ b.data.reshape(h * w, d).T
    return CorrelationVolume(_channel_normalize(m).reshape(h, w, h * w))


# ---------------------------------------------------------------------------
# regression


def _peaks(score: np.ndarray, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of ``(B, h, w)`` odd-sized score maps with a per-axis sub-cell
    fit clamped to half a cell. Flat (all non-positive) maps give a zero
    displacement and a low-confidence flag.

    The fit is equiangular (two lines of opposite slope through the peak and
    its neighbors) on the score profile summed over the three lines around
    the peak. Normalized correlation peaks are cone-like, and a parabola
    biases them toward the nearest cell by up to a quarter cell.
    """
    b, h, w = score.shape
    flat = score.reshape(b, -1)
    k = np.argmax(flat, axis=1)
    i, j = np.divmod(k, w)
    low = ~np.any(flat > 0, axis=1)
    rows = np.arange(b)

    def fit(lo, mid, hi, ok):
        drop = mid - np.minimum(lo, hi)
        ok = ok & (drop > 0)
        sub = np.divide(0.5 * (hi - lo), drop, out=np.zeros(b), where=ok)
        return np.clip(sub, -0.5, 0.5)

    padded = np.pad(score, ((0, 0), (1, 1), (1, 1)))
    d = np.arange(-1, 2)
    # (B, 3, 3) window around the peak; zero padding drops lines outside the map
    win = padded[rows[:, None, None], (i + 1)[:, None, None] + d[None, :, None],
                 (j + 1)[:, None, None] + d[None, None, :]]
    col, line = win.sum(axis=1), win.sum(axis=2)
    sx = fit(col[:, 0], col[:, 1], col[:, 2], (j > 0) & (j < w - 1))
    sy = fit(line[:, 0], line[:, 1], line[:, 2], (i > 0) & (i < h - 1))
    off = np.stack([j - (w - 1) / 2 + sx, i - (h - 1) / 2 + sy], axis=1) * cell_size
    off[low] = 0.0
    return off, low


def _aggregate(m: np.ndarray, g: int, lo: int, hi: int) -> np.ndarray:
    """Mean of ``m[b, c, c + d]`` over source cells ``c`` in the window
    ``[lo, hi)^2``, for every displacement ``d`` on the ``g x g`` grid.

    ``m`` is ``(B, n, n, g, g)`` with ``n = hi - lo``.
    """
    b = m.shape[0]
    c = g // 2
    total = np.zeros((b, g, g), dtype=m.dtype)
    count = np.zeros((g, g))
    for i in range(lo, hi):
        di = i - c
        ti = slice(max(0, di), min(g, g + di))
        oi = slice(max(0, -di), min(g, g - di))
        for j in range(lo, hi):
            dj = j - c
            tj = slice(max(0, dj), min(g, g + dj))
            oj = slice(max(0, -dj), min(g, g - dj))
            total[:, oi, oj] += m[:, i - lo, j - lo, ti, tj]
            count[oi, oj] += 1
    return total / count


def displacement_scores(volume: CorrelationVolume, radius: int = AGGREGATION_RADIUS) -> np.ndarray:
    """Mean normalized correlation per displacement over source cells within
    ``radius`` of the center; ``radius=0`` reads the central cell alone.

    Entry ``[dy, dx]`` scores the displacement of ``(dx, dy) - center`` cells.
    """
    h, w = volume.h, volume.w
    if h != w:
        raise AlignError("displacement scores need a square grid")
    c = h // 2
    lo, hi = max(0, c - radius), min(h, c + radius + 1)
    vol = volume.values.reshape(h, w, h, w)[lo:hi, lo:hi]
    return _aggregate(vol[None], h, lo, hi)[0]


def regress_central_flow(
    volume: CorrelationVolume, cell_size: float, radius: int = AGGREGATION_RADIUS
) -> tuple[np.ndarray, bool]:
    """Central displacement in pixels plus a low-confidence flag."""
    if cell_size <= 0:
        raise AlignError("cell size must be positive")
    flows, low = _peaks(displacement_scores(volume, radius)[None], cell_size)
    return flows[0], bool(low[0])


def central_flows(
    image_u: ImageRef,
    us: np.ndarray,
    image_v: ImageRef,
    vs: np.ndarray,
    scale: float = 1.0,
    size: int = PATCH_SIZE,
    grid_size: int = GRID_SIZE,
    radius: int = AGGREGATION_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`predict_central_flow`; returns ``(B, 2)`` flows and ``(B,)`` flags."""
    from ._kernels import central_flows as kernel

    pix_u = np.ascontiguousarray(_require_pixels(image_u), dtype=np.float64)
    pix_v = np.ascontiguousarray(_require_pixels(image_v), dtype=np.float64)
    _descriptor_stride(size, grid_size)
    if scale <= 0:
        raise AlignError("patch scale must be positive")
    us = np.ascontiguousarray(us, dtype=np.float64).reshape(-1, 2)
    vs = np.ascontiguousarray(vs, dtype=np.float64).reshape(-1, 2)
    flows = np.zeros((len(us), 2))
    low = np.zeros(len(us), dtype=np.bool_)
    kernel(pix_u, pix_v, us, vs, float(scale), size, grid_size, radius, flows, low)
    return flows, low


def predict_central_flow(
    image_u: ImageRef,
    u,
    image_v: ImageRef,
    v,
    scale: float = 1.0,
    size: int = PATCH_SIZE,
    grid_size: int = GRID_SIZE,
    radius: int = AGGREGATION_RADIUS,
) -> tuple[np.ndarray, bool]:
    """Flow ``d`` of the central pixel: ``u`` corresponds to ``v + d``."""
    pu = dense_descriptors(sample_patch(image_u, u, scale, size), grid_size)
    pv = dense_descriptors(sample_patch(image_v, v, scale, size), grid_size)
    cell = _descriptor_stride(size, grid_size) * scale
    return regress_central_flow(correlate_normalize(pu, pv), cell, radius)


# ---------------------------------------------------------------------------
# flow fields

GRID_OFFSETS = np.array([[(gx, gy) for gx in (-1, 0, 1)] for gy in (-1, 0, 1)], dtype=np.float64)


def estimate_flow_fields(
    image_u: ImageRef,
    us: np.ndarray,
    image_v: ImageRef,
    vs: np.ndarray,
    spacing: float = GRID_SPACING,
    fine_zoom: float = FINE_ZOOM,
    size: int = PATCH_SIZE,
    grid_size: int = GRID_SIZE,
    radius: int = AGGREGATION_RADIUS,
) -> tuple[np.ndarray, np.ndarray]:
    """Coarse-to-fine 3x3 grids for many keypoint pairs of one image pair.

    The coarse flow comes from full-resolution patches around ``u`` and ``v``;
    each grid node ``g`` then adds the flow between sub-patches around
    ``u + g`` and ``v + coarse + g`` sampled ``fine_zoom`` times finer.
    Returns ``(B, 3, 3, 2)`` grids and ``(B, 3, 3)`` low-confidence flags.
    """
    if spacing <= 0:
        raise AlignError("grid spacing must be positive")
    if fine_zoom < 1:
        raise AlignError("fine zoom must be at least 1")
    us = np.asarray(us, dtype=np.float64).reshape(-1, 2)
    vs = np.asarray(vs, dtype=np.float64).reshape(-1, 2)
    b = len(us)
    coarse, coarse_low = central_flows(image_u, us, image_v, vs, 1.0, size, grid_size, radius)
    offsets = GRID_OFFSETS.reshape(9, 2) * spacing
    cu = (us[:, None, :] + offsets[None]).reshape(-1, 2)
    cv = (vs[:, None, :] + coarse[:, None, :] + offsets[None]).reshape(-1, 2)
    fine, fine_low = central_flows(image_u, cu, image_v, cv, 1.0 / fine_zoom,
                                   size, grid_size, radius)
    grids = coarse[:, None, :] + fine.reshape(b, 9, 2)
    low = coarse_low[:, None] | fine_low.reshape(b, 9)
    return grids.reshape(b, 3, 3, 2), low.reshape(b, 3, 3)


def estimate_flow_field(
    image_u: ImageRef, u, image_v: ImageRef, v,
    spacing: float = GRID_SPACING, fine_zoom: float = FINE_ZOOM, **kwargs,
) -> FlowField:
    grids, low = estimate_flow_fields(image_u, np.asarray(u)[None], image_v,
                                      np.asarray(v)[None], spacing, fine_zoom, **kwargs)
    return FlowField(grids[0], spacing, low_confidence=low[0])


def _basis(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic Lagrange basis on nodes -1, 0, 1 and its derivative; ``(..., 3)``."""
    val = np.stack([0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)], axis=-1)
    der = np.stack([t - 0.5, -2.0 * t, t + 0.5], axis=-1)
    return val, der


def eval_flow_batch(
    grids: np.ndarray, spacing: np.ndarray, offsets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Biquadratic interpolation of many grids at many offsets.

    ``grids`` is ``(E, 3, 3, 2)``, ``spacing`` ``(E,)`` and ``offsets`` ``(E, 2)``.
    Offsets are clamped to the grid footprint, with zero derivative along a
    clamped axis. Returns displacements ``(E, 2)`` and jacobians ``(E, 2, 2)``
    with ``jac[e, i, j] = d disp_i / d offset_j``.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    t = offsets / spacing[:, None]
    inside = np.abs(t) <= 1.0
    t = np.clip(t, -1.0, 1.0)
    bx, dbx = _basis(t[:, 0])
    by, dby = _basis(t[:, 1])
    dbx = np.where(inside[:, 0, None], dbx, 0.0) / spacing[:, None]
    dby = np.where(inside[:, 1, None], dby, 0.0) / spacing[:, None]
    # grids[e, iy, ix, c]; contract x first, then y
    row = sum(grids[:, :, k] * bx[:, None, k, None] for k in range(3))
    drow = sum(grids[:, :, k] * dbx[:, None, k, None] for k in range(3))
    disp = sum(row[:, k] * by[:, k, None] for k in range(3))
    jac = np.stack([
        sum(drow[:, k] * by[:, k, None] for k in range(3)),
        sum(row[:, k] * dby[:, k, None] for k in range(3)),
    ], axis=-1)
    return disp, jac


def eval_flow(field: FlowField, offset) -> tuple[np.ndarray, np.ndarray]:
    disp, jac = eval_flow_batch(field.grid[None], np.array([field.spacing]),
                                np.asarray(offset, dtype=np.float64)[None])
    return disp[0], jac[0]


def resize_factor(width: int, height: int, max_long_edge: int = MAX_LONG_EDGE) -> float:
    """Downscale factor so the longest edge fits ``max_long_edge``."""
    long_edge = max(width, height)
    return 1.0 if long_edge <= max_long_edge else max_long_edge / long_edge
