"""Pixel unprojection and 3D distance gating.

Pixels are addressed as ``(u, v)`` = (column, row). Depth lookups use the
nearest pixel (``floor(u + 0.5)``); bilinear blending across object borders
would invent depths that belong to neither surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MU_THING = 3.0
MU_STUFF = 0.8


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, p: Point3) -> tuple[float, float]:
        return (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # (height, width), relative depth

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {v.shape}")
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ValueError("depth values must be finite and positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def at(self, u: float, v: float) -> float:
        return float(self.values[_nearest(v), _nearest(u)])


def _nearest(c: float) -> int:
    return int(math.floor(c + 0.5))


def _check_bounds(u: float, v: float, depth: DepthMap) -> None:
    if not (0 <= _nearest(u) < depth.width and 0 <= _nearest(v) < depth.height):
        raise IndexError(f"pixel ({u}, {v}) outside {depth.width}x{depth.height} frame")


def unproject(u: float, v: float, depth: DepthMap, intr: CameraIntrinsics) -> Point3:
    """Lift pixel ``(u, v)`` to 3D: depth times the inverse intrinsics applied to ``[u, v, 1]``."""
    _check_bounds(u, v, depth)
    d = depth.at(u, v)
    return Point3(d * (u - intr.cx) / intr.fx, d * (v - intr.cy) / intr.fy, d)


def box_center(box) -> tuple[int, int]:
    """Integer center pixel of a box, halves rounded up."""
    return _nearest((box.x0 + box.x1) / 2), _nearest((box.y0 + box.y1) / 2)


def thing_location(box, depth: DepthMap, intr: CameraIntrinsics) -> Point3:
    if not (box.x1 > box.x0 and box.y1 > box.y0):
        raise ValueError(f"degenerate box {box}")
    u, v = box_center(box)
    u = min(u, depth.width - 1)
    v = min(v, depth.height - 1)
    return unproject(u, v, depth, intr)


def ego_pixel(width: int, height: int) -> tuple[int, int]:
    return width // 2, height - 1


def ego_location(depth: DepthMap, intr: CameraIntrinsics) -> Point3:
    """The ego vehicle is anchored at the middle-bottom pixel of the frame."""
    u, v = ego_pixel(depth.width, depth.height)
    return unproject(u, v, depth, intr)


def distance(a: Point3, b: Point3) -> float:
    return math.dist(a, b)


def spatial_gate(pi: Point3, pj: Point3, mu: float) -> int:
    """1 when the points are within ``mu`` of each other (boundary inclusive)."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    return int(math.dist(pi, pj) <= mu)


def gate_matrix(points: np.ndarray, mu: float) -> np.ndarray:
    """Pairwise gate for an (n, 3) array of locations."""
    pts = np.asarray(points, dtype=np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return (dist <= mu).astype(np.int8)


def mask_cell_pixels(mask: np.ndarray, frame_w: int, frame_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Full-frame coordinates of every set cell of a downsampled mask.

    Cell ``(x, y)`` maps to ``((x + 0.5) * frame_w / w, (y + 0.5) * frame_h / h)``.
    """
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    return (xs + 0.5) * (frame_w / w), (ys + 0.5) * (frame_h / h)


def stuff_nearest(mask: np.ndarray, depth: DepthMap, intr: CameraIntrinsics, ego: Point3) -> tuple[float, Point3]:
    """Distance from ``ego`` to the closest set cell of a downsampled mask, and that cell's 3D point."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("stuff_min_distance: empty mask")
    us, vs = mask_cell_pixels(m, depth.width, depth.height)
    cols = np.clip(np.floor(us + 0.5).astype(int), 0, depth.width - 1)
    rows = np.clip(np.floor(vs + 0.5).astype(int), 0, depth.height - 1)
    d = depth.values[rows, cols].astype(np.float64)
    pts = np.stack([d * (us - intr.cx) / intr.fx, d * (vs - intr.cy) / intr.fy, d], axis=1)
    diff = pts - np.asarray(ego, dtype=np.float64)
    dist = np.sqrt((diff * diff).sum(axis=1))
    k = int(np.argmin(dist))
    return float(dist[k]), Point3(*map(float, pts[k]))


def stuff_min_distance(mask: np.ndarray, depth: DepthMap, intr: CameraIntrinsics, ego: Point3) -> float:
    """Smallest 3D distance from ``ego`` to any set cell of a downsampled mask."""
    return stuff_nearest(mask, depth, intr, ego)[0]
