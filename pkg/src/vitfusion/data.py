"""Paired-scene data: synthetic scene generation, KITTI ingestion and the
geometric training augmentations.

Synthetic scenes place non-overlapping oriented boxes on a ground plane,
sample lidar points uniformly on the box surfaces plus ground clutter, and
render a flat-shaded camera view by projecting each box as a filled
class-colored convex quad over a blocky textured background. Scenes are
fully deterministic per seed and can be persisted in the KITTI directory
layout, so the synthetic and real paths share one reader.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import kitti
from .detection import GroundTruth
from .geometry import Box2D, Box3D, corners_of, iou_bev, rotation_z
from .nn import ConfigError

CLASS_COLORS = {
    "Car": (70, 100, 205),
    "Pedestrian": (225, 130, 45),
}
_FALLBACK_COLORS = [(90, 200, 90), (200, 80, 160), (160, 160, 60)]


@dataclass
class SceneSample:
    """One paired sample: image, point cloud, calibration and ground truth."""

    image: np.ndarray                  # (H, W, 3) uint8
    cloud: np.ndarray                  # (P, 3) float64, lidar frame
    calib: kitti.Calibration
    gt: GroundTruth
    class_names: list
    scene_id: str
    warnings: list = field(default_factory=list)


@dataclass
class SynthConfig:
    image_hw: list = field(default_factory=lambda: [128, 128])
    focal: float = 110.0
    point_range: list = field(default_factory=lambda: [[0.0, 40.0], [-16.0, 16.0], [-2.0, 2.0]])
    ground_z: float = -1.6
    classes: list = field(default_factory=lambda: ["Car", "Pedestrian"])
    boxes_per_scene: list = field(default_factory=lambda: [1, 3])
    # per class: mean (l, w, h) and jitter std
    size_means: dict = field(default_factory=lambda: {
        "Car": [4.2, 1.8, 1.6], "Pedestrian": [0.9, 0.9, 1.75]})
    size_jitter: dict = field(default_factory=lambda: {
        "Car": [0.35, 0.12, 0.10], "Pedestrian": [0.08, 0.08, 0.12]})
    points_per_m2: float = 9.0
    min_points_per_box: int = 60
    clutter_points: int = 300
    patch_multiple: int = 32
    max_place_trials: int = 1000
    bev_overlap_limit: float = 0.05

    def __post_init__(self):
        if self.points_per_m2 <= 0:
            raise ConfigError("points_per_m2 must be positive")
        H, W = self.image_hw
        if H % self.patch_multiple or W % self.patch_multiple:
            raise ConfigError("image resolution must be a multiple of the patch size")

    def calibration(self) -> kitti.Calibration:
        H, W = self.image_hw
        return kitti.Calibration.standard(self.focal, (W - 1) / 2.0, (H - 1) / 2.0)


def class_color(name: str, classes) -> tuple:
    if name in CLASS_COLORS:
        return CLASS_COLORS[name]
    return _FALLBACK_COLORS[list(classes).index(name) % len(_FALLBACK_COLORS)]


def surface_area(box: Box3D) -> float:
    return 2.0 * (box.l * box.w + box.l * box.h + box.w * box.h)


def sample_box_surface(rng, box: Box3D, n: int) -> np.ndarray:
    """Uniform samples on the box surface (area-weighted over the 6 faces)."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * w, l * w, l * h, l * h, w * h, w * h])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        if f in (0, 1):      # bottom / top
            pts[m] = np.stack([u[m] * l, v[m] * w,
                               np.full(m.sum(), (-0.5 if f == 0 else 0.5) * h)], axis=1)
        elif f in (2, 3):    # y = -/+ w/2 sides
            pts[m] = np.stack([u[m] * l,
                               np.full(m.sum(), (-0.5 if f == 2 else 0.5) * w),
                               v[m] * h], axis=1)
        else:                # x = -/+ l/2 ends
            pts[m] = np.stack([np.full(m.sum(), (-0.5 if f == 4 else 0.5) * l),
                               u[m] * w, v[m] * h], axis=1)
    return pts @ rotation_z(box.theta).T + np.array([box.cx, box.cy, box.cz])


def points_in_box(points: np.ndarray, box: Box3D, inflate: float = 0.01) -> np.ndarray:
    """Boolean mask of points inside the (slightly inflated) box."""
    rel = (np.atleast_2d(points) - np.array([box.cx, box.cy, box.cz])) @ rotation_z(box.theta)
    half = 0.5 * np.array([box.l, box.w, box.h]) + inflate
    return np.all(np.abs(rel) <= half, axis=1)


def _place_boxes(rng, cfg: SynthConfig):
    lo = np.array([r[0] for r in cfg.point_range])
    hi = np.array([r[1] for r in cfg.point_range])
    n_target = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    boxes, labels = [], []
    warnings = []
    trials = 0
    while len(boxes) < n_target and trials < cfg.max_place_trials:
        trials += 1
        ci = int(rng.integers(len(cfg.classes)))
        name = cfg.classes[ci]
        size = np.maximum(0.3, np.asarray(cfg.size_means[name])
                          + rng.normal(0, 1, 3) * np.asarray(cfg.size_jitter[name]))
        margin = 0.5 * float(np.hypot(size[0], size[1]))
        # keep boxes off the near edge so the camera sees them
        x_lo = lo[0] + margin + 0.12 * (hi[0] - lo[0])
        x_hi = hi[0] - margin
        if x_lo >= x_hi:
            x_lo, x_hi = lo[0] + margin, hi[0] - margin
        cx = rng.uniform(x_lo, x_hi)
        cy = rng.uniform(lo[1] + margin, hi[1] - margin)
        theta = rng.uniform(-np.pi, np.pi)
        box = Box3D(cx, cy, cfg.ground_z + 0.5 * size[2], *size, theta)
        if any(iou_bev(box, other) >= cfg.bev_overlap_limit for other in boxes):
            continue
        boxes.append(box)
        labels.append(ci)
    if len(boxes) < n_target:
        warnings.append(f"placed {len(boxes)}/{n_target} boxes after {trials} trials")
    return boxes, labels, warnings


def _render_image(cfg: SynthConfig, calib, boxes, labels, rng) -> np.ndarray:
    from PIL import Image, ImageDraw

    H, W = cfg.image_hw
    base = rng.integers(60, 110, size=(8, 8, 3), dtype=np.int64)
    img_arr = np.repeat(np.repeat(base, H // 8, axis=0), W // 8, axis=1).astype(np.uint8)
    img = Image.fromarray(img_arr)
    draw = ImageDraw.Draw(img)
    # painter's order: far boxes first
    order = np.argsort([-b.cx for b in boxes])
    for i in order:
        box, ci = boxes[i], labels[i]
        uv, depth = calib.project(corners_of(box))
        if np.any(depth <= 0.5):
            continue
        try:
            hull = ConvexHull(uv)
        except QhullError:
            continue
        poly = [tuple(uv[v]) for v in hull.vertices]
        color = class_color(cfg.classes[ci], cfg.classes)
        shade = max(0.55, 1.0 - 0.012 * box.cx)
        draw.polygon(poly, fill=tuple(int(c * shade) for c in color))
    return np.asarray(img)


def generate_scene(cfg: SynthConfig, seed: int) -> SceneSample:
    """Deterministic synthetic scene for a seed: boxes + surface points +
    ground clutter + flat-shaded camera rendering."""
    rng = np.random.default_rng(seed)
    lo = np.array([r[0] for r in cfg.point_range])
    hi = np.array([r[1] for r in cfg.point_range])
    boxes, labels, warnings = _place_boxes(rng, cfg)

    clouds = []
    for box in boxes:
        n = max(cfg.min_points_per_box, int(round(surface_area(box) * cfg.points_per_m2)))
        clouds.append(sample_box_surface(rng, box, n))
    n_cl = cfg.clutter_points
    if n_cl:
        ground = np.stack([
            rng.uniform(lo[0], hi[0], n_cl),
            rng.uniform(lo[1], hi[1], n_cl),
            cfg.ground_z + rng.uniform(0.0, 0.06, n_cl),
        ], axis=1)
        clouds.append(ground)
    cloud = np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))
    cloud = cloud[np.all((cloud >= lo) & (cloud < hi), axis=1)]

    calib = cfg.calibration()
    image = _render_image(cfg, calib, boxes, labels, rng)
    gt = GroundTruth(boxes, np.asarray(labels, dtype=np.intp), len(cfg.classes))
    return SceneSample(image=image, cloud=cloud, calib=calib, gt=gt,
                       class_names=[cfg.classes[i] for i in labels],
                       scene_id=f"{seed:06d}", warnings=warnings)


def make_dataset(cfg: SynthConfig, n_scenes: int, base_seed: int = 0) -> list:
    return [generate_scene(cfg, base_seed + i) for i in range(n_scenes)]


# ---------------------------------------------------------------------------
# KITTI ingestion and persistence
# ---------------------------------------------------------------------------

def load_kitti(velodyne_path, label_path, calib_path, image_path,
               classes=("Car", "Pedestrian"), scene_id=None) -> SceneSample:
    """Load one sample from KITTI-format files (camera-frame labels are
    converted to lidar-frame boxes)."""
    calib = kitti.read_calib(calib_path)
    cloud = kitti.read_velodyne(velodyne_path)
    boxes, names = kitti.read_labels(label_path, calib, keep_classes=classes)
    labels = np.array([list(classes).index(n) for n in names], dtype=np.intp)
    image = kitti.read_image(image_path)
    gt = GroundTruth(boxes, labels, len(classes))
    if scene_id is None:
        scene_id = Path(velodyne_path).stem
    return SceneSample(image=image, cloud=cloud, calib=calib, gt=gt,
                       class_names=list(names), scene_id=scene_id)


def save_scene(root, sample: SceneSample):
    """Persist a scene in the KITTI directory layout."""
    root = Path(root)
    for sub in kitti.SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    paths = kitti.scene_paths(root, sample.scene_id)
    kitti.write_velodyne(paths["velodyne"], sample.cloud)
    kitti.write_labels(paths["label_2"], sample.gt.boxes, sample.class_names,
                       sample.calib, image_hw=sample.image.shape[:2])
    kitti.write_calib(paths["calib"], sample.calib)
    kitti.write_image(paths["image_2"], sample.image)


def load_scene(root, scene_id: str, classes=("Car", "Pedestrian")) -> SceneSample:
    paths = kitti.scene_paths(root, scene_id)
    return load_kitti(paths["velodyne"], paths["label_2"], paths["calib"],
                      paths["image_2"], classes=classes, scene_id=scene_id)


def load_dataset(root, classes=("Car", "Pedestrian")) -> list:
    return [load_scene(root, sid, classes) for sid in kitti.list_scene_ids(root)]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range: float = np.pi / 4.0     # global yaw ~ U(-range, range)
    scale_range: list = field(default_factory=lambda: [0.95, 1.05])
    translation_std: float = 0.2            # meters, per axis
    shuffle_points: bool = True


def augment_scene(sample: SceneSample, seed: int,
                  cfg: AugmentConfig | None = None) -> SceneSample:
    """Global flip / rotation / scale / translation applied consistently to
    points and boxes; point order shuffled; the image is only flipped."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    cloud = sample.cloud.copy()
    params = sample.gt.box_params().copy() if len(sample.gt) else np.zeros((0, 7))
    image = sample.image

    if rng.random() < cfg.flip_prob:
        cloud[:, 1] *= -1.0
        params[:, 1] *= -1.0
        params[:, 6] *= -1.0
        image = image[:, ::-1].copy()

    yaw = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    R = rotation_z(yaw)
    cloud = cloud @ R.T
    params[:, :3] = params[:, :3] @ R.T
    params[:, 6] += yaw

    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    cloud *= scale
    params[:, :6] *= scale

    shift = rng.normal(0.0, cfg.translation_std, size=3)
    cloud += shift
    params[:, :3] += shift

    if cfg.shuffle_points and len(cloud):
        cloud = cloud[rng.permutation(len(cloud))]

    boxes = [Box3D.from_params(p) for p in params]
    gt = GroundTruth(boxes, sample.gt.labels.copy(), sample.gt.num_classes)
    return SceneSample(image=image, cloud=cloud, calib=sample.calib, gt=gt,
                       class_names=list(sample.class_names),
                       scene_id=sample.scene_id, warnings=list(sample.warnings))


def gt_boxes_2d(sample: SceneSample) -> GroundTruth:
    """Projected axis-aligned 2D ground truth for camera pre-training.

    Boxes behind the camera or degenerate after clipping are dropped.
    """
    H, W = sample.image.shape[:2]
    boxes, labels = [], []
    for box, label in zip(sample.gt.boxes, sample.gt.labels):
        bb = kitti.bbox_2d_of(box, sample.calib, image_hw=(H, W))
        if bb is None:
            continue
        x1, y1, x2, y2 = bb
        boxes.append(Box2D(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1))
        labels.append(int(label))
    return GroundTruth(boxes, np.asarray(labels, dtype=np.intp), sample.gt.num_classes)
