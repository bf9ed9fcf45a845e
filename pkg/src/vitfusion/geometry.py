"""Oriented-box geometry: corners, 3D/BEV/2D IoU, non-maximum suppression.

Boxes are (cx, cy, cz, l, w, h, theta): center in meters, extents along
heading / lateral / vertical, and yaw about the vertical axis in radians.

Corner order (canonical, used everywhere a corner index matters):
bottom face counter-clockwise in the box frame, then the top face in the
same planar order::

    0 (+l/2, +w/2, -h/2)    4 (+l/2, +w/2, +h/2)
    1 (-l/2, +w/2, -h/2)    5 (-l/2, +w/2, +h/2)
    2 (-l/2, -w/2, -h/2)    6 (-l/2, -w/2, +h/2)
    3 (+l/2, -w/2, -h/2)    7 (+l/2, -w/2, +h/2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidBoxError(ValueError):
    """Raised for non-positive box extents."""


def wrap_angle(theta):
    """Wrap an angle (array ok) to [-pi, pi)."""
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


CORNER_SIGNS = 0.5 * np.array(
    [
        [+1, +1, -1], [-1, +1, -1], [-1, -1, -1], [+1, -1, -1],
        [+1, +1, +1], [-1, +1, +1], [-1, -1, +1], [+1, -1, +1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"non-positive extent: l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.theta])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @staticmethod
    def from_params(p) -> "Box3D":
        return Box3D(*(float(v) for v in p))


@dataclass(frozen=True)
class Box2D:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"non-positive extent: w={self.w} h={self.h}")

    @property
    def params(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    @staticmethod
    def from_params(p) -> "Box2D":
        return Box2D(*(float(v) for v in p))


def rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def corners_of(box: Box3D) -> np.ndarray:
    """Eight box corners, (8, 3), in the canonical order above."""
    offsets = CORNER_SIGNS * np.array([box.l, box.w, box.h])
    return offsets @ rotation_z(box.theta).T + np.array([box.cx, box.cy, box.cz])


def corners_of_params(params: np.ndarray) -> np.ndarray:
    """Vectorized corners for an (N, 7) parameter array -> (N, 8, 3)."""
    params = np.atleast_2d(params)
    c, s = np.cos(params[:, 6]), np.sin(params[:, 6])
    off = CORNER_SIGNS[None, :, :] * params[:, None, 3:6]   # (N, 8, 3)
    x = off[..., 0] * c[:, None] - off[..., 1] * s[:, None]
    y = off[..., 0] * s[:, None] + off[..., 1] * c[:, None]
    z = off[..., 2]
    return np.stack([x, y, z], axis=-1) + params[:, None, 0:3]


def box_from_corners(corners: np.ndarray) -> Box3D:
    """Reconstruct a box from a canonical-order corner set.

    Heading is recovered from the first bottom edge, so it carries the usual
    theta vs theta+pi ambiguity relative to the source box.
    """
    corners = np.asarray(corners, dtype=np.float64)
    center = corners.mean(axis=0)
    e_l = corners[0] - corners[1]
    e_w = corners[1] - corners[2]
    l = float(np.linalg.norm(e_l[:2]))
    w = float(np.linalg.norm(e_w[:2]))
    h = float(corners[4:, 2].mean() - corners[:4, 2].mean())
    theta = float(np.arctan2(e_l[1], e_l[0]))
    return Box3D(*center, l, w, h, theta)


def bev_polygon(box: Box3D) -> np.ndarray:
    """Counter-clockwise BEV footprint, (4, 2)."""
    return corners_of(box)[:4, :2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW polygon."""
    output = [p for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        pts = output
        output = []
        prev = pts[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in pts:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                if denom != 0.0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_polygon(bev_polygon(a), bev_polygon(b)))


def _ordered(a: Box3D, b: Box3D):
    # fixed evaluation order makes iou(a, b) == iou(b, a) bit-exact
    if tuple(a.params) <= tuple(b.params):
        return a, b
    return b, a


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of the rotated box footprints."""
    a, b = _ordered(a, b)
    inter = _bev_intersection_area(a, b)
    area_a = a.l * a.w
    area_b = b.l * b.w
    union = area_a + area_b - inter
    return float(inter / union) if union > 0.0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: exact BEV polygon intersection times vertical overlap."""
    a, b = _ordered(a, b)
    inter_area = _bev_intersection_area(a, b)
    z_lo = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    z_hi = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    inter = inter_area * max(0.0, z_hi - z_lo)
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0.0 else 0.0


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Axis-aligned 2D IoU."""
    ax1, ax2 = a.cx - 0.5 * a.w, a.cx + 0.5 * a.w
    ay1, ay2 = a.cy - 0.5 * a.h, a.cy + 0.5 * a.h
    bx1, bx2 = b.cx - 0.5 * b.w, b.cx + 0.5 * b.w
    by1, by2 = b.cy - 0.5 * b.h, b.cy + 0.5 * b.h
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union) if union > 0.0 else 0.0


def iou_of(a, b) -> float:
    """Dispatch on box type: BEV IoU for 3D boxes, plain IoU for 2D."""
    if isinstance(a, Box3D):
        return iou_bev(a, b)
    return iou_2d(a, b)


def nms_indices(boxes, scores, iou_threshold: float, max_out: int | None = None,
                iou_fn=iou_of) -> np.ndarray:
    """Greedy descending-confidence suppression; returns kept input indices.

    Ties in confidence are broken by input index. Every kept pair has
    IoU <= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    if max_out is None:
        max_out = n
    order = np.lexsort((np.arange(n), -scores))
    keep: list[int] = []
    for i in order:
        if len(keep) >= max_out:
            break
        if all(iou_fn(boxes[i], boxes[j]) <= iou_threshold for j in keep):
            keep.append(int(i))
    return np.asarray(keep, dtype=np.intp)


def nms(dets, iou_threshold: float, max_out: int | None = None, iou_fn=iou_of):
    """NMS over a detection container exposing .boxes, .confidences(), .take()."""
    keep = nms_indices(dets.boxes, dets.confidences(), iou_threshold, max_out, iou_fn)
    return dets.take(keep)
