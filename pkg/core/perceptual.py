"""
Perceptual similarity metrics over 2-d maps.

The differentiable metrics (Sobel magnitude, quantile soft binarization,
SoftDice, SoftHOG, cosine) take nodes of shape ``(..., H, W)`` and reduce per
map, so a batch ``(N, H, W)`` yields ``N`` scores. The hard metrics (Edge IoU,
hard HOG cosine) take plain 2-d arrays and exist for analysis reports only.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core import ops
from core.errors import PerceptualError, ShapeError
from core.tensor import Node, const, data_constant, no_grad

logger = logging.getLogger(__name__)

SOBEL_EPS = 1e-12
DICE_EPS = 1e-6
HOG_EPS = 1e-6
HOG_MAGNITUDE_EPS = 1e-12
COSINE_EPS = 1e-12
# Keeps the norm differentiable at the zero vector without moving non-zero results.
_NORM_FLOOR = 1e-24


@dataclass(frozen=True)
class SoftBinarizeParams:
    q: float = 85.0
    k: float = 100.0

    def __post_init__(self):
        if not 0 < self.q < 100:
            raise PerceptualError(f"percentile q must lie in (0, 100), got {self.q}")
        if self.k <= 0:
            raise PerceptualError(f"sharpness k must be positive, got {self.k}")


@dataclass(frozen=True)
class HogParams:
    cell: int = 4
    block: int = 2
    bins: int = 9
    softness: float = 1.0

    def __post_init__(self):
        if self.cell < 1 or self.block < 1:
            raise PerceptualError("cell and block sizes must be positive")
        if self.bins < 2:
            raise PerceptualError(f"at least 2 orientation bins required, got {self.bins}")
        if self.softness <= 0:
            raise PerceptualError(f"softness must be positive, got {self.softness}")

    @property
    def bin_width(self) -> float:
        return 180.0 / self.bins


def _map_axes(ndim: int) -> Tuple[int, ...]:
    return tuple(range(ndim)) if ndim <= 2 else (ndim - 2, ndim - 1)


def _as_node(a) -> Node:
    return a if isinstance(a, Node) else const(a)


def channel_mean(x: Node) -> Node:
    """(N, C, H, W) -> (N, H, W)."""
    return ops.reduce_mean(x, axis=1)


def _pad_replicate(a: Node) -> Node:
    rows = ops.concat([a[..., :1, :], a, a[..., -1:, :]], axis=-2)
    return ops.concat([rows[..., :, :1], rows, rows[..., :, -1:]], axis=-1)


# ── Edges ───────────────────────────────────────────────────────────────

def sobel_magnitude(a) -> Node:
    """sqrt(Gx² + Gy² + 1e-12) with 3×3 Sobel kernels and replicate padding."""
    a = _as_node(a)
    if a.ndim < 2 or a.shape[-2] < 3 or a.shape[-1] < 3:
        raise PerceptualError(f"sobel_magnitude needs a spatial extent of at least 3×3, got {a.shape}")
    h, w = a.shape[-2:]
    p = _pad_replicate(a)

    def s(i, j):
        return p[..., i:i + h, j:j + w]

    gx = (s(0, 2) + 2.0 * s(1, 2) + s(2, 2)) - (s(0, 0) + 2.0 * s(1, 0) + s(2, 0))
    gy = (s(2, 0) + 2.0 * s(2, 1) + s(2, 2)) - (s(0, 0) + 2.0 * s(0, 1) + s(0, 2))
    return ops.sqrt(gx * gx + gy * gy + SOBEL_EPS)


def _map_percentile(values: np.ndarray, q: float) -> np.ndarray:
    if values.ndim <= 2:
        return np.asarray(np.percentile(values, q))
    lead = values.shape[:-2]
    flat = values.reshape(lead + (-1,))
    return np.percentile(flat, q, axis=-1).reshape(lead + (1, 1))


def soft_binarize(a, p: SoftBinarizeParams = SoftBinarizeParams()) -> Node:
    """sigmoid(k · (a − τ)) with τ the q-th percentile of each map, held constant."""
    a = _as_node(a)
    tau = data_constant(lambda: _map_percentile(a.value, p.q))
    return ops.sigmoid((a - const(tau)) * p.k)


def soft_dice(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape != b.shape:
        raise ShapeError("soft_dice", a.shape, b.shape)
    axes = _map_axes(a.ndim)
    inter = ops.reduce_sum(a * b, axes)
    total = ops.reduce_sum(a, axes) + ops.reduce_sum(b, axes)
    return (2.0 * inter) / (total + DICE_EPS)


def soft_edges(a, p: SoftBinarizeParams = SoftBinarizeParams()) -> Node:
    return soft_binarize(sobel_magnitude(a), p)


# ── Histograms of oriented gradients ────────────────────────────────────

def _center_crop(a: Node, p: HogParams) -> Node:
    h, w = a.shape[-2:]
    if h < 2 * p.cell or w < 2 * p.cell:
        raise PerceptualError(f"HOG needs at least {2 * p.cell}×{2 * p.cell} pixels, got {h}×{w}")
    hc, wc = h // p.cell * p.cell, w // p.cell * p.cell
    if (hc, wc) == (h, w):
        return a
    top, left = (h - hc) // 2, (w - wc) // 2
    return a[..., top:top + hc, left:left + wc]


def _central_differences(a: Node) -> Tuple[Node, Node]:
    p = _pad_replicate(a)
    gx = p[..., 1:-1, 2:] - p[..., 1:-1, :-2]
    gy = p[..., 2:, 1:-1] - p[..., :-2, 1:-1]
    return gx, gy


def _histogram_blocks(votes: Node, p: HogParams) -> Node:
    """Pool (..., H, W, bins) votes into cells, then L2-normalized overlapping blocks."""
    lead = votes.shape[:-3]
    h, w = votes.shape[-3:-1]
    cy, cx = h // p.cell, w // p.cell
    cells = ops.reshape(votes, lead + (cy, p.cell, cx, p.cell, p.bins))
    nd = len(lead)
    cells = ops.reduce_sum(cells, axis=(nd + 1, nd + 3))
    by, bx = cy - p.block + 1, cx - p.block + 1
    if by < 1 or bx < 1:
        raise PerceptualError(f"{cy}×{cx} cells cannot hold a {p.block}×{p.block} block")
    parts = [cells[..., i:i + by, j:j + bx, :] for i in range(p.block) for j in range(p.block)]
    blocks = ops.concat(parts, axis=-1)
    norm = ops.sqrt(ops.reduce_sum(blocks * blocks, axis=-1, keepdims=True) + HOG_EPS ** 2)
    return ops.reshape(blocks / norm, lead + (by * bx * p.block * p.block * p.bins,))


def soft_hog(a, p: HogParams = HogParams()) -> Node:
    """Differentiable HOG: Gaussian soft assignment of gradient orientation to bins."""
    a = _center_crop(_as_node(a), p)
    gx, gy = _central_differences(a)
    mag = ops.sqrt(gx * gx + gy * gy + HOG_MAGNITUDE_EPS) - float(np.sqrt(HOG_MAGNITUDE_EPS))
    theta = ops.mod(ops.atan2(gy, gx) * (180.0 / np.pi), 180.0)
    width = p.bin_width
    centers = const((np.arange(p.bins) + 0.5) * width)
    d = ops.mod(ops.reshape(theta, theta.shape + (1,)) - centers + 90.0, 180.0) - 90.0
    weights = ops.softmax(d * d * (-1.0 / (2.0 * p.softness * width * width)), axis=-1)
    votes = weights * ops.reshape(mag, mag.shape + (1,))
    return _histogram_blocks(votes, p)


def cosine_similarity(u, v) -> Node:
    """u·v / (‖u‖‖v‖ + 1e-12) along the last axis; zero vectors score 0."""
    u, v = _as_node(u), _as_node(v)
    if u.shape != v.shape:
        raise ShapeError("cosine_similarity", u.shape, v.shape)
    dot = ops.reduce_sum(u * v, axis=-1)
    nu = ops.sqrt(ops.reduce_sum(u * u, axis=-1) + _NORM_FLOOR)
    nv = ops.sqrt(ops.reduce_sum(v * v, axis=-1) + _NORM_FLOOR)
    return dot / (nu * nv + COSINE_EPS)


# ── Hard metrics (analysis only) ────────────────────────────────────────

def _check_pair(name: str, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(name, a.shape, b.shape)
    if a.ndim != 2:
        raise ShapeError(name, a.shape, detail="expected a 2-d map")
    return a, b


def edge_mask(a: np.ndarray, q: float = 85.0) -> np.ndarray:
    with no_grad():
        e = sobel_magnitude(const(a)).value
    return e > np.percentile(e, q)


def hard_edge_iou(a: np.ndarray, b: np.ndarray, q: float = 85.0) -> float:
    """IoU of Sobel maps binarized at their own q-th percentile; empty union gives 1."""
    a, b = _check_pair("hard_edge_iou", a, b)
    ma, mb = edge_mask(a, q), edge_mask(b, q)
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)


def hog_descriptor(a: np.ndarray, p: HogParams = HogParams(), assignment: str = "interpolate") -> np.ndarray:
    """Hard HOG of a 2-d map.

    ``interpolate`` splits each vote linearly between the two nearest bin
    centers; ``nearest`` gives it all to the closest center, which is the
    limit of :func:`soft_hog` as softness goes to 0.
    """
    if assignment not in ("interpolate", "nearest"):
        raise PerceptualError(f"unknown bin assignment '{assignment}'")
    with no_grad():
        cropped = _center_crop(const(a), p)
        gx, gy = (g.value for g in _central_differences(cropped))
        mag = np.sqrt(gx * gx + gy * gy)
        theta = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
        width = p.bin_width
        votes = np.zeros(mag.shape + (p.bins,))
        rows, cols = np.indices(mag.shape)
        if assignment == "nearest":
            idx = np.floor(theta / width).astype(np.int64) % p.bins
            votes[rows, cols, idx] = mag
        else:
            pos = theta / width - 0.5
            lo = np.floor(pos)
            frac = pos - lo
            lo_idx = lo.astype(np.int64) % p.bins
            hi_idx = (lo_idx + 1) % p.bins
            votes[rows, cols, lo_idx] += mag * (1.0 - frac)
            votes[rows, cols, hi_idx] += mag * frac
        return _histogram_blocks(const(votes), p).value


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.ravel(u)
    v = np.ravel(v)
    if u.shape != v.shape:
        raise ShapeError("cosine", u.shape, v.shape)
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + COSINE_EPS))


def hard_hog_cosine(a: np.ndarray, b: np.ndarray, p: HogParams = HogParams(),
                    assignment: str = "interpolate") -> float:
    a, b = _check_pair("hard_hog_cosine", a, b)
    return cosine(hog_descriptor(a, p, assignment), hog_descriptor(b, p, assignment))
