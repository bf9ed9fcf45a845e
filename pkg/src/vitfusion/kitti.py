"""KITTI-format file IO: velodyne point binaries, label text rows, calib
matrices and PNG images, plus the camera/lidar frame conversions.

Labels follow the usual 15-column layout (type, truncation, occlusion,
alpha, 2D bbox, h w l, camera-frame bottom-center x y z, rotation_y). Boxes
are converted between the camera rectified frame (x right, y down,
z forward; location at the box bottom center) and the lidar frame (x
forward, y left, z up; location at the box center).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box3D, corners_of, wrap_angle


class IngestError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass
class Calibration:
    """Projection P2 (3x4), rectification R0 (3x3), and lidar-to-camera
    extrinsics Tr_velo_to_cam (3x4)."""

    P2: np.ndarray
    R0: np.ndarray
    Tr: np.ndarray

    def __post_init__(self):
        self.P2 = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        self.R0 = np.asarray(self.R0, dtype=np.float64).reshape(3, 3)
        self.Tr = np.asarray(self.Tr, dtype=np.float64).reshape(3, 4)

    def velo_to_rect(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return (self.R0 @ (self.Tr[:, :3] @ pts.T + self.Tr[:, 3:4])).T

    def rect_to_velo(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        cam = np.linalg.solve(self.R0, pts.T)
        return np.linalg.solve(self.Tr[:, :3], cam - self.Tr[:, 3:4]).T

    def project(self, pts_velo: np.ndarray):
        """Project lidar points to pixels. Returns ((N,2) uv, (N,) depth)."""
        rect = self.velo_to_rect(pts_velo)
        hom = self.P2 @ np.concatenate([rect.T, np.ones((1, rect.shape[0]))])
        depth = hom[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = (hom[:2] / depth).T
        return uv, depth

    @staticmethod
    def standard(focal: float, cu: float, cv: float) -> "Calibration":
        """Pinhole camera at the lidar origin looking along +x."""
        P2 = np.array([[focal, 0.0, cu, 0.0],
                       [0.0, focal, cv, 0.0],
                       [0.0, 0.0, 1.0, 0.0]])
        R0 = np.eye(3)
        Tr = np.array([[0.0, -1.0, 0.0, 0.0],
                       [0.0, 0.0, -1.0, 0.0],
                       [1.0, 0.0, 0.0, 0.0]])
        return Calibration(P2, R0, Tr)


# ---------------------------------------------------------------------------
# box frame conversions
# ---------------------------------------------------------------------------

def box_velo_to_label(box: Box3D, calib: Calibration):
    """Lidar-frame box -> (location_rect bottom center, ry)."""
    bottom = np.array([box.cx, box.cy, box.cz - 0.5 * box.h])
    loc = calib.velo_to_rect(bottom)[0]
    ry = float(wrap_angle(-box.theta - 0.5 * np.pi))
    return loc, ry


def box_label_to_velo(h: float, w: float, l: float, loc, ry: float,
                      calib: Calibration) -> Box3D:
    bottom = calib.rect_to_velo(np.asarray(loc, dtype=np.float64))[0]
    theta = wrap_angle(-ry - 0.5 * np.pi)
    return Box3D(bottom[0], bottom[1], bottom[2] + 0.5 * h, l, w, h, theta)


# ---------------------------------------------------------------------------
# file readers / writers
# ---------------------------------------------------------------------------

def read_velodyne(path) -> np.ndarray:
    """Read float32 LE (x, y, z, intensity) quadruples; intensity dropped."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise IngestError(f"{path}: size {raw.size * 4} bytes is not a multiple of 16")
    return raw.reshape(-1, 4)[:, :3].astype(np.float64)


def write_velodyne(path, points: np.ndarray, intensity=None):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if intensity is None:
        intensity = np.zeros(points.shape[0])
    rows = np.concatenate([points, np.asarray(intensity).reshape(-1, 1)], axis=1)
    rows.astype("<f4").tofile(path)


def read_calib(path) -> Calibration:
    vals = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, rest = line.split(":", 1)
            vals[key.strip()] = np.array([float(v) for v in rest.split()])
    try:
        return Calibration(vals["P2"], vals["R0_rect"], vals["Tr_velo_to_cam"])
    except KeyError as err:
        raise IngestError(f"{path}: missing calibration key {err}") from None


def write_calib(path, calib: Calibration):
    def fmt(arr):
        return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())

    with open(path, "w") as fh:
        fh.write(f"P2: {fmt(calib.P2)}\n")
        fh.write(f"R0_rect: {fmt(calib.R0)}\n")
        fh.write(f"Tr_velo_to_cam: {fmt(calib.Tr)}\n")


def bbox_2d_of(box: Box3D, calib: Calibration, image_hw=None, min_depth: float = 0.1):
    """Axis-aligned pixel bbox of the projected 3D corners, clipped to the
    image; None when the box sits behind the camera."""
    uv, depth = calib.project(corners_of(box))
    front = depth > min_depth
    if front.sum() < 3:
        return None
    uv = uv[front]
    x1, y1 = uv.min(axis=0)
    x2, y2 = uv.max(axis=0)
    if image_hw is not None:
        H, W = image_hw
        x1, x2 = np.clip([x1, x2], 0.0, W - 1.0)
        y1, y2 = np.clip([y1, y2], 0.0, H - 1.0)
        if x2 - x1 < 1.0 or y2 - y1 < 1.0:
            return None
    return float(x1), float(y1), float(x2), float(y2)


def read_labels(path, calib: Calibration, keep_classes=("Car", "Pedestrian")):
    """Parse label rows into lidar-frame boxes. Returns (boxes, names)."""
    boxes, names = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 15:
                raise IngestError(f"{path}:{lineno}: expected >= 15 fields, got {len(parts)}")
            name = parts[0]
            try:
                vals = [float(v) for v in parts[1:15]]
            except ValueError as err:
                raise IngestError(f"{path}:{lineno}: {err}") from None
            if keep_classes is not None and name not in keep_classes:
                continue
            h, w, l = vals[7], vals[8], vals[9]
            loc = vals[10:13]
            ry = vals[13]
            boxes.append(box_label_to_velo(h, w, l, loc, ry, calib))
            names.append(name)
    return boxes, names


def write_labels(path, boxes, names, calib: Calibration, image_hw=None):
    lines = []
    for box, name in zip(boxes, names):
        loc, ry = box_velo_to_label(box, calib)
        bb = bbox_2d_of(box, calib, image_hw)
        if bb is None:
            bb = (-1.0, -1.0, -1.0, -1.0)
        alpha = wrap_angle(ry - np.arctan2(loc[0], loc[2]))
        fields = [name, "0.00", "0", repr(float(alpha))]
        fields += [f"{v:.2f}" for v in bb]
        fields += [repr(float(v)) for v in (box.h, box.w, box.l)]
        fields += [repr(float(v)) for v in loc]
        fields.append(repr(float(ry)))
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_image(path, img: np.ndarray):
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# scene directories (synthetic datasets persist in this layout too)
# ---------------------------------------------------------------------------

SUBDIRS = ("velodyne", "label_2", "calib", "image_2")


def scene_paths(root, scene_id: str) -> dict:
    root = Path(root)
    return {
        "velodyne": root / "velodyne" / f"{scene_id}.bin",
        "label_2": root / "label_2" / f"{scene_id}.txt",
        "calib": root / "calib" / f"{scene_id}.txt",
        "image_2": root / "image_2" / f"{scene_id}.png",
    }


def list_scene_ids(root) -> list[str]:
    vdir = Path(root) / "velodyne"
    if not vdir.is_dir():
        raise IngestError(f"{root} has no velodyne/ directory")
    return sorted(p.stem for p in vdir.glob("*.bin"))
