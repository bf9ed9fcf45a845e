"""Qualitative scene rendering: a BEV plot of the point cloud with ground
truth and predicted boxes, and the camera image with projected wireframes.

Ground truth draws green, predictions red. Output is plain Pillow raster
drawing, so files are identical across reruns of the same inputs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import kitti
from .evaluation import predict_with_nms
from .geometry import bev_polygon, corners_of

GT_COLOR = (60, 220, 60)
PRED_COLOR = (235, 60, 60)

# edges of the canonical corner ordering: bottom ring, top ring, verticals
BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0),
             (4, 5), (5, 6), (6, 7), (7, 4),
             (0, 4), (1, 5), (2, 6), (3, 7)]


def _bev_canvas(point_range, scale: float):
    (x0, x1), (y0, y1), _ = point_range
    W = int(round((y1 - y0) * scale))
    H = int(round((x1 - x0) * scale))
    img = Image.new("RGB", (max(W, 8), max(H, 8)), (15, 15, 20))

    def to_px(x, y):
        return ((y1 - y) * scale, (x1 - x) * scale)

    return img, to_px


def draw_bev(sample, boxes_gt, boxes_pred, point_range, scale: float = 8.0):
    img, to_px = _bev_canvas(point_range, scale)
    draw = ImageDraw.Draw(img)
    for x, y, _ in sample.cloud:
        u, v = to_px(x, y)
        draw.point((u, v), fill=(130, 130, 140))
    for boxes, color in ((boxes_gt, GT_COLOR), (boxes_pred, PRED_COLOR)):
        for box in boxes:
            poly = [to_px(px, py) for px, py in bev_polygon(box)]
            draw.polygon(poly, outline=color)
    return np.asarray(img)


def draw_camera(sample, boxes_gt, boxes_pred):
    img = Image.fromarray(sample.image.copy())
    draw = ImageDraw.Draw(img)
    for boxes, color in ((boxes_gt, GT_COLOR), (boxes_pred, PRED_COLOR)):
        for box in boxes:
            uv, depth = sample.calib.project(corners_of(box))
            if np.any(depth <= 0.1):
                continue
            for a, b in BOX_EDGES:
                draw.line([tuple(uv[a]), tuple(uv[b])], fill=color, width=1)
    return np.asarray(img)


def render_scene(model, sample, out_dir, *, min_confidence: float = 0.3,
                 scale: float = 8.0) -> dict:
    """Write `<scene>_bev.png` and `<scene>_camera.png`; returns paths and
    the drawn detection count (all post-NMS detections above the cutoff)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dets = predict_with_nms(model, sample)
    keep = np.flatnonzero(dets.confidences() >= min_confidence)
    dets = dets.take(keep)
    point_range = model.cfg.point_range
    bev = draw_bev(sample, sample.gt.boxes, dets.boxes, point_range, scale)
    cam = draw_camera(sample, sample.gt.boxes, dets.boxes)
    bev_path = out_dir / f"{sample.scene_id}_bev.png"
    cam_path = out_dir / f"{sample.scene_id}_camera.png"
    kitti.write_image(bev_path, bev)
    kitti.write_image(cam_path, cam)
    return {
        "bev": str(bev_path),
        "camera": str(cam_path),
        "n_predictions_drawn": len(dets),
        "n_gt": len(sample.gt),
        "detections": dets,
    }
