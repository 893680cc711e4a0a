"""Node feature pooling from per-frame feature maps.

Feature maps are stored as ``(T, h, w, D)`` arrays alongside the size of the
frame they were computed from. Feature cell ``c`` covers the continuous
range ``[c, c + 1)`` in feature coordinates, so its center sits at ``c + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_GRID = 7
MASK_SIZE = 28


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float
    cls: str
    score: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"box corners out of order: {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class StuffMask:
    mask: np.ndarray  # (H, W) bool at frame resolution
    cls: str


@dataclass
class FeatureMap:
    values: np.ndarray  # (T, h, w, D)
    frame_width: int
    frame_height: int

    def __post_init__(self):
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ValueError(f"feature map must be (T, h, w, D) with all dims >= 1, got {self.values.shape}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def D(self) -> int:
        return self.values.shape[3]


def bilinear_sample(frame: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an (h, w, D) map at continuous feature coordinates; edges clamp."""
    h, w, _ = frame.shape
    px = np.clip(np.asarray(xs, dtype=np.float64) - 0.5, 0.0, w - 1)
    py = np.clip(np.asarray(ys, dtype=np.float64) - 0.5, 0.0, h - 1)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (px - x0)[..., None]
    ay = (py - y0)[..., None]
    top = frame[y0, x0] * (1 - ax) + frame[y0, x1] * ax
    bottom = frame[y1, x0] * (1 - ax) + frame[y1, x1] * ax
    return top * (1 - ay) + bottom * ay


def roi_align_lite(fm: FeatureMap, t: int, box: BoundingBox, grid: int = DEFAULT_GRID) -> np.ndarray:
    """One bilinear sample per bin of a ``grid x grid`` lattice, then channel-wise max.

    Returns a ``(1, D)`` array.
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    W, H = fm.frame_width, fm.frame_height
    if box.x1 <= 0 or box.y1 <= 0 or box.x0 >= W or box.y0 >= H:
        raise ValueError(f"box {box} lies outside the {W}x{H} frame")
    sx, sy = fm.width / W, fm.height / H
    bx0, bx1 = max(box.x0, 0.0) * sx, min(box.x1, W) * sx
    by0, by1 = max(box.y0, 0.0) * sy, min(box.y1, H) * sy
    centers = (np.arange(grid) + 0.5) / grid
    xs = bx0 + centers * (bx1 - bx0)
    ys = by0 + centers * (by1 - by0)
    gx, gy = np.meshgrid(xs, ys)
    samples = bilinear_sample(fm.values[t], gx.ravel(), gy.ravel())
    return samples.max(axis=0, keepdims=True)


def mask_align(fm: FeatureMap, t: int, mask: np.ndarray) -> np.ndarray:
    """Average of the frame's features over the set cells of a downsampled mask, ``(1, D)``."""
    m = np.asarray(mask)
    if m.shape != (fm.height, fm.width):
        raise ValueError(f"mask shape {m.shape} != feature map spatial shape {(fm.height, fm.width)}")
    weights = m.astype(np.float64)
    total = weights.sum()
    if total == 0:
        raise ValueError("mask_align: empty mask")
    frame = fm.values[t].astype(np.float64)
    pooled = np.einsum("hw,hwd->d", weights, frame) / total
    return pooled.reshape(1, -1)


def downsample_mask(mask, width: int = MASK_SIZE, height: int = MASK_SIZE) -> np.ndarray:
    """Block-reduce a frame-resolution binary mask to ``(height, width)``.

    A cell is set when at least half of its source block is set. A nonempty
    source that would vanish keeps the single cell holding its centroid, so
    thin structures such as lane markings survive.
    """
    src = np.asarray(mask.mask if isinstance(mask, StuffMask) else mask).astype(bool)
    H, W = src.shape
    if width < 1 or height < 1:
        raise ValueError("target dims must be >= 1")
    if width > W or height > H:
        raise ValueError(f"cannot downsample {W}x{H} to a larger {width}x{height} grid")
    r_edges = (np.arange(height + 1) * H) // height
    c_edges = (np.arange(width + 1) * W) // width
    counts = np.add.reduceat(np.add.reduceat(src.astype(np.int64), r_edges[:-1], axis=0), c_edges[:-1], axis=1)
    area = np.diff(r_edges)[:, None] * np.diff(c_edges)[None, :]
    out = 2 * counts >= area
    if not out.any() and src.any():
        ys, xs = np.nonzero(src)
        row = min(int((ys.mean() + 0.5) * height / H), height - 1)
        col = min(int((xs.mean() + 0.5) * width / W), width - 1)
        out[row, col] = True
    return out


def top_k_indices(dets: Sequence[BoundingBox], k: int = 20) -> list[int]:
    """Indices of the ``k`` highest-scoring detections; ties keep input order."""
    if k < 1:
        raise ValueError("K must be >= 1")
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:k]


def select_top_k(dets: Sequence[BoundingBox], k: int = 20) -> list[BoundingBox]:
    return [dets[i] for i in top_k_indices(dets, k)]
